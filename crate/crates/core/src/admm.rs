//! ADMM baseline on the same splitting: a loss step, a projection, and a
//! multiplier step of fixed length `ρ`, with no gating.

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    admm_dual_overestimate, DualBoundConfig, Event, IterationRecord, Method, RunReport,
};
use crate::engine::{
    augmented_lagrangian_with, check_state, coupling_terms, initial_duplicates,
    solve_cardinality_subproblem, solve_loss_subproblem, update_multipliers, violation_norm,
    Iterates, Probe, StopCriteria,
};
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::slr::drive;
use crate::sparsity::SparsityPlan;
use crate::tensor::LayerSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub rho: f64,
    /// Optimizer steps per W-update; `None` means one epoch.
    pub inner_steps: Option<usize>,
    pub dual: DualBoundConfig,
    pub optimizer: OptimizerConfig,
    pub record_wall_time: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            inner_steps: None,
            dual: DualBoundConfig::default(),
            optimizer: OptimizerConfig::default(),
            record_wall_time: false,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "rho must be > 0, got {}",
                self.rho
            )));
        }
        if self.inner_steps == Some(0) {
            return Err(Error::InvalidConfig("inner steps must be >= 1".into()));
        }
        self.dual.validate()?;
        self.optimizer.validate()
    }
}

pub struct AdmmEngine {
    config: AdmmConfig,
    plan: SparsityPlan,
    w: LayerSet,
    z: LayerSet,
    lambda: LayerSet,
    optimizer: Optimizer,
    k: usize,
    f_prev: f64,
    total_steps: usize,
}

impl AdmmEngine {
    /// Same initialization as the SLR coordinator.
    pub fn new(
        config: AdmmConfig,
        plan: SparsityPlan,
        w0: LayerSet,
        obj: &dyn Objective,
    ) -> Result<Self> {
        config.validate()?;
        let z = initial_duplicates(&w0, &plan)?;
        let lambda = z.zeros_like();
        let f_prev = obj.eval_loss(&w0)?;
        let optimizer = Optimizer::new(config.optimizer);
        Ok(Self {
            config,
            plan,
            w: w0,
            z,
            lambda,
            optimizer,
            k: 0,
            f_prev,
            total_steps: 0,
        })
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

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn into_iterates(self) -> Iterates {
        Iterates {
            w: self.w,
            z: self.z,
            lambda: self.lambda,
        }
    }

    /// One W-step, Z-step and multiplier step. Both conditions are evaluated
    /// for the record but never gate anything.
    pub fn iterate(&mut self, obj: &mut dyn Objective) -> Result<IterationRecord> {
        let rho = self.config.rho;
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
        let soc1 = l_new < l_old;
        self.f_prev = f_new;

        let z_prev = std::mem::replace(
            &mut self.z,
            solve_cardinality_subproblem(&self.w, &self.lambda, rho, &self.plan)?,
        );
        let l_z_new =
            augmented_lagrangian_with(f_new, &self.w, &self.z, &self.lambda, rho, &self.plan)?;
        let l_z_old =
            augmented_lagrangian_with(f_new, &self.w, &z_prev, &self.lambda, rho, &self.plan)?;
        let soc2 = l_z_new < l_z_old;

        let l_rho = f_new + coupling_terms(&self.w, &self.z, &self.lambda, rho)?;
        self.lambda = update_multipliers(&self.lambda, rho, &self.w, &self.z)?;
        self.k += 1;
        check_state(&self.w, &self.z, &self.lambda, self.k)?;

        let violation = violation_norm(&self.w, &self.z)?;
        Ok(IterationRecord {
            k: self.k,
            epoch: self.total_steps as f64 / obj.steps_per_epoch() as f64,
            train_loss,
            l_rho,
            violation,
            s: rho,
            s_prime: rho,
            alpha: None,
            soc1,
            soc2,
            qbar_slr: None,
            qbar_admm: Some(admm_dual_overestimate(
                self.config.dual.gamma,
                rho,
                violation * violation,
                l_rho,
            )),
            hardprune_accuracy: None,
            wall_time: None,
        })
    }

    pub fn run(
        &mut self,
        obj: &mut dyn Objective,
        stop: &StopCriteria,
        probe: &mut dyn Probe,
        seed: u64,
    ) -> Result<RunReport> {
        let mut report = RunReport::default();
        report.push_event(Event::RunStart {
            method: Method::Admm,
            seed,
            first_batch_checksum: obj.first_batch_checksum(),
        });
        let record_time = self.config.record_wall_time;
        drive(stop, probe, &mut report, record_time, |emit| {
            let rec = self.iterate(obj)?;
            emit(&self.w, rec, Vec::new())
        })?;
        Ok(report)
    }
}
