//! Pieces shared by the SLR and ADMM coordinators: the augmented Lagrangian,
//! the two subproblem solvers, the multiplier update and stopping rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::optim::Optimizer;
use crate::sparsity::SparsityPlan;
use crate::tensor::{frobenius_norm_sq, global_distance_sq, trace_inner, LayerSet};

/// `Σₙ tr(Λₙᵀ(Wₙ − Zₙ)) + ρ/2 Σₙ ‖Wₙ − Zₙ‖²` over the layers of `z`.
pub fn coupling_terms(w: &LayerSet, z: &LayerSet, lambda: &LayerSet, rho: f64) -> Result<f64> {
    let mut linear = 0.0;
    let mut quadratic = 0.0;
    for (name, zn) in z.iter() {
        let diff = w.require(name)?.sub(zn)?;
        linear += trace_inner(lambda.require(name)?, &diff)?;
        quadratic += frobenius_norm_sq(&diff);
    }
    Ok(linear + 0.5 * rho * quadratic)
}

/// Augmented Lagrangian given an already evaluated `f(W)`.
///
/// An infeasible `Z` makes the indicator term infinite and is reported as
/// [`Error::IndicatorInfinite`].
pub fn augmented_lagrangian_with(
    f_value: f64,
    w: &LayerSet,
    z: &LayerSet,
    lambda: &LayerSet,
    rho: f64,
    plan: &SparsityPlan,
) -> Result<f64> {
    plan.check_feasible(z)?;
    if !f_value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let value = f_value + coupling_terms(w, z, lambda, rho)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("augmented Lagrangian".into()));
    }
    Ok(value)
}

/// Augmented Lagrangian with `f` taken on the objective's evaluation batch.
pub fn augmented_lagrangian(
    obj: &dyn Objective,
    w: &LayerSet,
    z: &LayerSet,
    lambda: &LayerSet,
    rho: f64,
    plan: &SparsityPlan,
) -> Result<f64> {
    plan.check_feasible(z)?;
    augmented_lagrangian_with(obj.eval_loss(w)?, w, z, lambda, rho, plan)
}

/// Global `‖W − Z‖_F`.
pub fn violation_norm(w: &LayerSet, z: &LayerSet) -> Result<f64> {
    Ok(global_distance_sq(w, z)?.sqrt())
}

/// `steps` optimizer steps on `L_ρ(·, Z, Λ)`; returns the mean minibatch loss.
///
/// The indicator term does not depend on `W` and contributes no gradient.
pub fn solve_loss_subproblem(
    obj: &mut dyn Objective,
    optimizer: &mut Optimizer,
    w: &mut LayerSet,
    z: &LayerSet,
    lambda: &LayerSet,
    rho: f64,
    steps: usize,
) -> Result<f64> {
    let rho32 = rho as f32;
    let mut total = 0.0;
    for _ in 0..steps {
        let (loss, mut grads) = obj.minibatch_grad(w)?;
        for (name, zn) in z.iter() {
            let g = grads.require_mut(name)?;
            let (wn, ln) = (w.require(name)?, lambda.require(name)?);
            for (((g, &wv), &zv), &lv) in g
                .data_mut()
                .iter_mut()
                .zip(wn.data())
                .zip(zn.data())
                .zip(ln.data())
            {
                *g += lv + rho32 * (wv - zv);
            }
        }
        optimizer.step(w, &grads)?;
        total += loss;
    }
    if !w.all_finite() {
        return Err(Error::NonFinite("weights after loss subproblem".into()));
    }
    Ok(if steps == 0 {
        0.0
    } else {
        total / steps as f64
    })
}

/// `Zₙ = Π(Wₙ + Λₙ/ρ)` onto `card ≤ lₙ` for every planned layer.
pub fn solve_cardinality_subproblem(
    w: &LayerSet,
    lambda: &LayerSet,
    rho: f64,
    plan: &SparsityPlan,
) -> Result<LayerSet> {
    let rho32 = rho as f32;
    let mut shifted = LayerSet::new();
    for name in plan.names() {
        let wn = w.require(name)?;
        shifted.insert(
            name,
            wn.zip_map(lambda.require(name)?, |w, l| w + l / rho32)?,
        );
    }
    plan.project(&shifted)
}

/// `Λ + step·(W − Z)` for every layer of `lambda`.
pub fn update_multipliers(
    lambda: &LayerSet,
    step: f64,
    w: &LayerSet,
    z: &LayerSet,
) -> Result<LayerSet> {
    let step32 = step as f32;
    let mut out = LayerSet::new();
    for (name, ln) in lambda.iter() {
        let (wn, zn) = (w.require(name)?, z.require(name)?);
        let mut next = ln.clone();
        for ((l, &wv), &zv) in next.data_mut().iter_mut().zip(wn.data()).zip(zn.data()) {
            *l += step32 * (wv - zv);
        }
        out.insert(name, next);
    }
    Ok(out)
}

/// Upper approximation of the dual function `q(Λ) = min_{W,Z} L_ρ(W, Z, Λ)`.
///
/// Alternates `rounds` pairs of loss-subproblem steps (`inner_steps` each) and
/// exact projections at fixed `Λ`, starting from `w`, `z`. Zero rounds returns
/// `L_ρ` at the given iterates.
#[allow(clippy::too_many_arguments)]
pub fn estimate_dual_value(
    obj: &mut dyn Objective,
    optimizer: &mut Optimizer,
    w: &LayerSet,
    z: &LayerSet,
    lambda: &LayerSet,
    rho: f64,
    plan: &SparsityPlan,
    rounds: usize,
    inner_steps: usize,
) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "rho must be positive, got {rho}"
        )));
    }
    let mut w = w.clone();
    let mut z = z.clone();
    for _ in 0..rounds {
        solve_loss_subproblem(obj, optimizer, &mut w, &z, lambda, rho, inner_steps)?;
        z = solve_cardinality_subproblem(&w, lambda, rho, plan)?;
    }
    augmented_lagrangian(obj, &w, &z, lambda, rho, plan)
}

/// Layers of `w` named by `plan`, projected.
pub fn initial_duplicates(w: &LayerSet, plan: &SparsityPlan) -> Result<LayerSet> {
    plan.project(&w.subset(plan.names())?)
}

pub(crate) fn check_state(w: &LayerSet, z: &LayerSet, lambda: &LayerSet, k: usize) -> Result<()> {
    if w.all_finite() && z.all_finite() && lambda.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "coordinator state at iteration {k}"
        )))
    }
}

/// When a run ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopCriteria {
    pub max_iterations: usize,
    /// Hardprune accuracy to look for at each check.
    pub accuracy_threshold: Option<f64>,
    /// Check every this many iterations (and at the last); 0 disables checks.
    pub check_every: usize,
    /// End the run at the first check meeting the threshold.
    pub stop_at_threshold: bool,
}

impl StopCriteria {
    pub fn iterations(max_iterations: usize) -> Self {
        Self {
            max_iterations,
            accuracy_threshold: None,
            check_every: 0,
            stop_at_threshold: false,
        }
    }

    pub(crate) fn is_check(&self, k: usize) -> bool {
        self.check_every > 0 && (k.is_multiple_of(self.check_every) || k == self.max_iterations)
    }
}

/// Periodic evaluation of the current weights, e.g. hardprune accuracy.
pub trait Probe {
    fn accuracy(&mut self, w: &LayerSet) -> Result<f64>;
}

/// A probe that is never consulted.
pub struct NoProbe;

impl Probe for NoProbe {
    fn accuracy(&mut self, _w: &LayerSet) -> Result<f64> {
        Ok(0.0)
    }
}

impl<F: FnMut(&LayerSet) -> Result<f64>> Probe for F {
    fn accuracy(&mut self, w: &LayerSet) -> Result<f64> {
        self(w)
    }
}

/// Weights, duplicates and multipliers at the end of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Iterates {
    pub w: LayerSet,
    pub z: LayerSet,
    pub lambda: LayerSet,
}
