//! Surrogate Lagrangian relaxation coordinator.
//!
//! Iteration `k` runs two stages. Stage 1 takes optimizer steps on
//! `L_ρ(·, Z^{k−1}, Λ^k)` and, if the Lagrangian decreased, moves the
//! multipliers by `s′(W^k − Z^{k−1})`. Stage 2 projects `W^k + Λ′/ρ` onto the
//! cardinality set and, if that decreased the Lagrangian, moves the
//! multipliers by `s(W^k − Z^k)`. Both stepsizes are scaled by the ratio of
//! successive violation norms and damped by `α^k`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    slr_dual_overestimate, DualBoundConfig, Event, IterationRecord, Method, RunReport, SocCondition,
};
use crate::engine::{
    augmented_lagrangian_with, check_state, coupling_terms, initial_duplicates,
    solve_cardinality_subproblem, solve_loss_subproblem, update_multipliers, violation_norm,
    Iterates, Probe, StopCriteria,
};
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::sparsity::SparsityPlan;
use crate::tensor::LayerSet;

/// `α^k = 1 − 1/(M·k^(1 − 1/k^r))`.
pub fn alpha_schedule(k: usize, m: f64, r: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig(
            "alpha schedule starts at k = 1".into(),
        ));
    }
    if !(m > 1.0) {
        return Err(Error::InvalidConfig(format!("M must be > 1, got {m}")));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "r must lie in (0, 1), got {r}"
        )));
    }
    let k = k as f64;
    let exponent = 1.0 - 1.0 / k.powf(r);
    Ok(1.0 - 1.0 / (m * k.powf(exponent)))
}

/// Result of a norm-ratio stepsize update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stepsize {
    Step(f64),
    /// The new violation is exactly zero: nothing to update.
    Feasible,
}

/// `s′ = α·s^{k−1}·‖W^{k−1} − Z^{k−1}‖ / ‖W^k − Z^{k−1}‖`.
pub fn stepsize_stage1(s_prev: f64, alpha: f64, prev_norm: f64, new_norm: f64) -> Stepsize {
    ratio_step(s_prev, alpha, prev_norm, new_norm)
}

/// `s = α·s′·‖W^{k−1} − Z^{k−1}‖ / ‖W^k − Z^k‖`.
pub fn stepsize_stage2(s_prime: f64, alpha: f64, prev_norm: f64, new_norm: f64) -> Stepsize {
    ratio_step(s_prime, alpha, prev_norm, new_norm)
}

fn ratio_step(s: f64, alpha: f64, prev_norm: f64, new_norm: f64) -> Stepsize {
    if new_norm == 0.0 {
        Stepsize::Feasible
    } else {
        Stepsize::Step(alpha * s * prev_norm / new_norm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StepsizeRule {
    /// Norm-ratio stepsizes damped by the α schedule.
    Surrogate,
    /// Constant stepsizes for the two stages; a zero skips that stage's update.
    Fixed { stage1: f64, stage2: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SocPolicy {
    /// Update multipliers only when the condition holds.
    Gated,
    /// Treat both conditions as satisfied.
    ForceTrue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlrConfig {
    pub rho: f64,
    pub m: f64,
    pub r: f64,
    pub s0: f64,
    /// Optimizer steps per loss subproblem; `None` means one epoch.
    pub inner_steps: Option<usize>,
    /// Apply the update anyway after this many consecutive failures of one condition.
    pub soc_override_after: Option<usize>,
    pub stepsize: StepsizeRule,
    pub soc_policy: SocPolicy,
    pub dual: DualBoundConfig,
    pub optimizer: OptimizerConfig,
    pub record_wall_time: bool,
}

impl Default for SlrConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            m: 300.0,
            r: 0.1,
            s0: 1e-2,
            inner_steps: None,
            soc_override_after: Some(3),
            stepsize: StepsizeRule::Surrogate,
            soc_policy: SocPolicy::Gated,
            dual: DualBoundConfig::default(),
            optimizer: OptimizerConfig::default(),
            record_wall_time: false,
        }
    }
}

impl SlrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "rho must be > 0, got {}",
                self.rho
            )));
        }
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "s0 must be > 0, got {}",
                self.s0
            )));
        }
        alpha_schedule(1, self.m, self.r)?;
        if self.inner_steps == Some(0) {
            return Err(Error::InvalidConfig("inner steps must be >= 1".into()));
        }
        if self.soc_override_after == Some(0) {
            return Err(Error::InvalidConfig("soc override cap must be >= 1".into()));
        }
        self.dual.validate()?;
        self.optimizer.validate()
    }
}

/// Scalars of the coordinator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorState {
    /// Completed iterations.
    pub k: usize,
    pub s: f64,
    pub s_prime: f64,
    pub alpha: f64,
    /// `‖W^k − Z^k‖` of the last completed iteration.
    pub prev_violation_norm: f64,
    pub soc1: bool,
    pub soc2: bool,
    pub soc1_failures: usize,
    pub soc2_failures: usize,
}

/// What happened in one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageOutcome {
    pub soc: bool,
    /// The update was forced by the failure cap.
    pub overridden: bool,
    /// Multipliers changed.
    pub updated: bool,
}

struct Pending {
    train_loss: f64,
    f_new: f64,
    lambda_in: LayerSet,
    z_prev: LayerSet,
    prev_norm: f64,
    stage1: StageOutcome,
    stage2: Option<StageOutcome>,
}

pub struct SlrEngine {
    config: SlrConfig,
    plan: SparsityPlan,
    w: LayerSet,
    z: LayerSet,
    lambda: LayerSet,
    optimizer: Optimizer,
    state: CoordinatorState,
    /// `f(W^{k−1})` on the evaluation batch.
    f_prev: f64,
    total_steps: usize,
    pending: Option<Pending>,
}

impl SlrEngine {
    /// `Z⁰ = Π(W⁰)`, `Λ⁰ = 0`, `s = s₀`.
    pub fn new(
        config: SlrConfig,
        plan: SparsityPlan,
        w0: LayerSet,
        obj: &dyn Objective,
    ) -> Result<Self> {
        config.validate()?;
        let z = initial_duplicates(&w0, &plan)?;
        let lambda = z.zeros_like();
        let f_prev = obj.eval_loss(&w0)?;
        let prev_violation_norm = violation_norm(&w0, &z)?;
        let optimizer = Optimizer::new(config.optimizer);
        let state = CoordinatorState {
            k: 0,
            s: config.s0,
            s_prime: config.s0,
            alpha: alpha_schedule(1, config.m, config.r)?,
            prev_violation_norm,
            soc1: true,
            soc2: true,
            soc1_failures: 0,
            soc2_failures: 0,
        };
        Ok(Self {
            config,
            plan,
            w: w0,
            z,
            lambda,
            optimizer,
            state,
            f_prev,
            total_steps: 0,
            pending: None,
        })
    }

    pub fn config(&self) -> &SlrConfig {
        &self.config
    }

    pub fn state(&self) -> &CoordinatorState {
        &self.state
    }

    pub fn w(&self) -> &LayerSet {
        &self.w
    }

    pub fn z(&self) -> &LayerSet {
        &self.z
    }

    pub fn lambda(&self) -> &LayerSet {
        &self.lambda
    }

    pub fn into_iterates(self) -> Iterates {
        Iterates {
            w: self.w,
            z: self.z,
            lambda: self.lambda,
        }
    }

    fn gate(&mut self, soc: bool, condition: SocCondition) -> (bool, bool) {
        let cap = self.config.soc_override_after;
        let failures = match condition {
            SocCondition::Soc1 => &mut self.state.soc1_failures,
            SocCondition::Soc2 => &mut self.state.soc2_failures,
        };
        if soc {
            *failures = 0;
            return (true, false);
        }
        *failures += 1;
        match cap {
            Some(cap) if *failures >= cap => {
                *failures = 0;
                (true, true)
            }
            _ => (false, false),
        }
    }

    /// Loss subproblem, first condition and first multiplier update.
    pub fn stage1(&mut self, obj: &mut dyn Objective) -> Result<StageOutcome> {
        if self.pending.as_ref().is_some_and(|p| p.stage2.is_none()) {
            return Err(Error::InvalidConfig(
                "stage 1 called twice without stage 2".into(),
            ));
        }
        let k = self.state.k + 1;
        let rho = self.config.rho;
        self.state.alpha = alpha_schedule(k, self.config.m, self.config.r)?;
        let steps = self
            .config
            .inner_steps
            .unwrap_or_else(|| obj.steps_per_epoch());

        let w_prev = self.w.clone();
        let train_loss = solve_loss_subproblem(
            obj,
            &mut self.optimizer,
            &mut self.w,
            &self.z,
            &self.lambda,
            rho,
            steps,
        )?;
        self.total_steps += steps;
        let f_new = obj.eval_loss(&self.w)?;

        let l_new =
            augmented_lagrangian_with(f_new, &self.w, &self.z, &self.lambda, rho, &self.plan)?;
        let l_old = augmented_lagrangian_with(
            self.f_prev,
            &w_prev,
            &self.z,
            &self.lambda,
            rho,
            &self.plan,
        )?;
        let soc = match self.config.soc_policy {
            SocPolicy::Gated => l_new < l_old,
            SocPolicy::ForceTrue => true,
        };
        let (apply, overridden) = self.gate(soc, SocCondition::Soc1);

        let prev_norm = self.state.prev_violation_norm;
        let lambda_in = self.lambda.clone();
        let mut updated = false;
        let mut s_prime = self.state.s;
        if apply {
            let step = match self.config.stepsize {
                StepsizeRule::Surrogate => {
                    let new_norm = violation_norm(&self.w, &self.z)?;
                    stepsize_stage1(self.state.s, self.state.alpha, prev_norm, new_norm)
                }
                StepsizeRule::Fixed { stage1, .. } => Stepsize::Step(stage1),
            };
            if let Stepsize::Step(step) = step {
                if step > 0.0 {
                    self.lambda = update_multipliers(&self.lambda, step, &self.w, &self.z)?;
                    s_prime = step;
                    updated = true;
                }
            }
        }
        if let StepsizeRule::Fixed { stage1, .. } = self.config.stepsize {
            s_prime = stage1;
        }
        self.state.s_prime = s_prime;
        self.state.soc1 = soc;
        self.f_prev = f_new;

        let outcome = StageOutcome {
            soc,
            overridden,
            updated,
        };
        self.pending = Some(Pending {
            train_loss,
            f_new,
            lambda_in,
            z_prev: self.z.clone(),
            prev_norm,
            stage1: outcome,
            stage2: None,
        });
        Ok(outcome)
    }

    /// Cardinality subproblem, second condition and second multiplier update.
    pub fn stage2(&mut self) -> Result<StageOutcome> {
        let Some(p) = self.pending.as_ref().filter(|p| p.stage2.is_none()) else {
            return Err(Error::InvalidConfig("stage 2 called before stage 1".into()));
        };
        let rho = self.config.rho;
        self.z = solve_cardinality_subproblem(&self.w, &self.lambda, rho, &self.plan)?;

        let l_new =
            augmented_lagrangian_with(p.f_new, &self.w, &self.z, &self.lambda, rho, &self.plan)?;
        let l_old =
            augmented_lagrangian_with(p.f_new, &self.w, &p.z_prev, &self.lambda, rho, &self.plan)?;
        let prev_norm = p.prev_norm;
        let soc = match self.config.soc_policy {
            SocPolicy::Gated => l_new < l_old,
            SocPolicy::ForceTrue => true,
        };
        let (apply, overridden) = self.gate(soc, SocCondition::Soc2);

        let new_norm = violation_norm(&self.w, &self.z)?;
        let mut updated = false;
        let mut s = self.state.s_prime;
        if apply {
            let step = match self.config.stepsize {
                StepsizeRule::Surrogate => {
                    stepsize_stage2(self.state.s_prime, self.state.alpha, prev_norm, new_norm)
                }
                StepsizeRule::Fixed { stage2, .. } => Stepsize::Step(stage2),
            };
            if let Stepsize::Step(step) = step {
                if step > 0.0 {
                    self.lambda = update_multipliers(&self.lambda, step, &self.w, &self.z)?;
                    s = step;
                    updated = true;
                }
            }
        }
        if let StepsizeRule::Fixed { stage2, .. } = self.config.stepsize {
            s = stage2;
        }
        self.state.s = s;
        self.state.soc2 = soc;
        self.state.prev_violation_norm = new_norm;
        self.state.k += 1;
        check_state(&self.w, &self.z, &self.lambda, self.state.k)?;
        let outcome = StageOutcome {
            soc,
            overridden,
            updated,
        };
        if let Some(p) = self.pending.as_mut() {
            p.stage2 = Some(outcome);
        }
        Ok(outcome)
    }

    /// Both stages; returns the record and any override events.
    pub fn iterate(&mut self, obj: &mut dyn Objective) -> Result<(IterationRecord, Vec<Event>)> {
        self.stage1(obj)?;
        let stage2 = self.stage2()?;
        let p = self.pending.take().expect("stage 1 ran");
        let k = self.state.k;
        let mut events = Vec::new();
        if p.stage1.overridden || stage2.overridden {
            log::info!("surrogate condition overridden at k={k}");
        }
        if p.stage1.overridden {
            events.push(Event::SocOverride {
                k,
                condition: SocCondition::Soc1,
            });
        }
        if stage2.overridden {
            events.push(Event::SocOverride {
                k,
                condition: SocCondition::Soc2,
            });
        }
        let violation = self.state.prev_violation_norm;
        let l_rho = p.f_new + coupling_terms(&self.w, &self.z, &p.lambda_in, self.config.rho)?;
        let record = IterationRecord {
            k,
            epoch: self.total_steps as f64 / obj.steps_per_epoch() as f64,
            train_loss: p.train_loss,
            l_rho,
            violation,
            s: self.state.s,
            s_prime: self.state.s_prime,
            alpha: Some(self.state.alpha),
            soc1: p.stage1.soc,
            soc2: stage2.soc,
            qbar_slr: Some(slr_dual_overestimate(
                self.config.dual.gamma,
                self.state.s,
                violation * violation,
                l_rho,
            )),
            qbar_admm: None,
            hardprune_accuracy: None,
            wall_time: None,
        };
        Ok((record, events))
    }

    /// Iterate until the stop criteria say otherwise.
    pub fn run(
        &mut self,
        obj: &mut dyn Objective,
        stop: &StopCriteria,
        probe: &mut dyn Probe,
        seed: u64,
    ) -> Result<RunReport> {
        let mut report = RunReport::default();
        report.push_event(Event::RunStart {
            method: Method::Slr,
            seed,
            first_batch_checksum: obj.first_batch_checksum(),
        });
        let record_time = self.config.record_wall_time;
        drive(stop, probe, &mut report, record_time, |probe_w| {
            let (rec, events) = self.iterate(obj)?;
            probe_w(&self.w, rec, events)
        })?;
        Ok(report)
    }
}

type Emit<'a> = dyn FnMut(&LayerSet, IterationRecord, Vec<Event>) -> Result<bool> + 'a;

/// Shared run loop: iterate, probe at checks, emit lines, honor the threshold.
pub(crate) fn drive(
    stop: &StopCriteria,
    probe: &mut dyn Probe,
    report: &mut RunReport,
    record_time: bool,
    mut step: impl FnMut(&mut Emit<'_>) -> Result<bool>,
) -> Result<()> {
    let start = Instant::now();
    let mut reached = false;
    for k in 1..=stop.max_iterations {
        let mut emit =
            |w: &LayerSet, mut rec: IterationRecord, events: Vec<Event>| -> Result<bool> {
                if stop.is_check(k) {
                    let acc = probe.accuracy(w)?;
                    rec.hardprune_accuracy = Some(acc);
                }
                if record_time {
                    rec.wall_time = Some(start.elapsed().as_secs_f64());
                }
                let hit = match (stop.accuracy_threshold, rec.hardprune_accuracy) {
                    (Some(t), Some(acc)) if !reached && acc >= t => Some((rec.k, rec.epoch, acc)),
                    _ => None,
                };
                log::debug!(
                    "k={} epoch={:.2} loss={:.4} violation={:.4e} s={:.4e} acc={:?}",
                    rec.k,
                    rec.epoch,
                    rec.train_loss,
                    rec.violation,
                    rec.s,
                    rec.hardprune_accuracy
                );
                report.push_record(rec);
                for e in events {
                    report.push_event(e);
                }
                if let Some((k, epoch, accuracy)) = hit {
                    reached = true;
                    report.push_event(Event::ThresholdReached { k, epoch, accuracy });
                    return Ok(stop.stop_at_threshold);
                }
                Ok(false)
            };
        if step(&mut emit)? {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::QuadraticObjective;
    use crate::tensor::Tensor;

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_schedule(1, 300.0, 0.1).unwrap(), 1.0 - 1.0 / 300.0);
        // 2^(1 − 2^−0.1) evaluated independently.
        let e = 1.0 - 2f64.powf(-0.1);
        let expected = 1.0 - 1.0 / (300.0 * 2f64.powf(e));
        assert!((alpha_schedule(2, 300.0, 0.1).unwrap() - expected).abs() < 1e-15);
        assert!((alpha_schedule(2, 300.0, 0.1).unwrap() - 0.996818).abs() < 5e-7);
        assert!(alpha_schedule(0, 300.0, 0.1).is_err());
        assert!(alpha_schedule(1, 1.0, 0.1).is_err());
        assert!(alpha_schedule(1, 300.0, 1.0).is_err());
    }

    #[test]
    fn stepsize_examples() {
        match stepsize_stage1(0.01, 0.9968, 2.0, 4.0) {
            Stepsize::Step(s) => assert!((s - 0.004984).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert_eq!(stepsize_stage1(0.3, 1.0, 2.0, 2.0), Stepsize::Step(0.3));
        assert_eq!(stepsize_stage1(0.3, 1.0, 2.0, 0.0), Stepsize::Feasible);
        assert_eq!(stepsize_stage2(0.3, 1.0, 5.0, 5.0), Stepsize::Step(0.3));
        match stepsize_stage2(0.02, 0.5, 1.0, 2.0) {
            Stepsize::Step(s) => assert!((s - 0.005).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
        assert_eq!(stepsize_stage2(0.3, 1.0, 2.0, 0.0), Stepsize::Feasible);
    }

    #[test]
    fn stepsizes_telescope_with_unit_ratios() {
        let (s0, m, r) = (1e-2, 300.0, 0.1);
        let mut s = s0;
        let mut oracle = s0;
        for k in 1..=200 {
            let a = alpha_schedule(k, m, r).unwrap();
            let Stepsize::Step(sp) = stepsize_stage1(s, a, 1.5, 1.5) else {
                panic!()
            };
            let Stepsize::Step(next) = stepsize_stage2(sp, a, 1.5, 1.5) else {
                panic!()
            };
            s = next;
            oracle *= a * a;
        }
        assert!((s - oracle).abs() <= 1e-15 * oracle);
    }

    fn one(values: &[f32]) -> LayerSet {
        let mut s = LayerSet::new();
        s.insert("w", Tensor::vector(values));
        s
    }

    fn toy_config() -> SlrConfig {
        SlrConfig {
            inner_steps: Some(1),
            optimizer: OptimizerConfig::sgd(0.1),
            ..SlrConfig::default()
        }
    }

    #[test]
    fn zero_iterations_leave_state() {
        let mut obj = QuadraticObjective::vector(&[3.0, 1.0]);
        let mut plan = SparsityPlan::new();
        plan.set("w", 1);
        let w0 = one(&[0.5, 0.25]);
        let mut engine = SlrEngine::new(toy_config(), plan, w0.clone(), &obj).unwrap();
        let report = engine
            .run(
                &mut obj,
                &StopCriteria::iterations(0),
                &mut crate::engine::NoProbe,
                0,
            )
            .unwrap();
        assert_eq!(report.records().count(), 0);
        assert_eq!(engine.w(), &w0);
        assert_eq!(engine.z().require("w").unwrap().data(), &[0.5, 0.0]);
        assert!(engine
            .lambda()
            .require("w")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn stage_order_is_enforced() {
        let obj = QuadraticObjective::vector(&[1.0]);
        let mut plan = SparsityPlan::new();
        plan.set("w", 1);
        let mut engine = SlrEngine::new(toy_config(), plan, one(&[0.0]), &obj).unwrap();
        assert!(engine.stage2().is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = SlrConfig {
            m: 0.5,
            ..SlrConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SlrConfig {
            rho: 0.0,
            ..SlrConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
