//! Hardpruning, masked retraining, and accuracy-at-budget runs.

use serde::{Deserialize, Serialize};

use crate::admm::{AdmmConfig, AdmmEngine};
use crate::data::{Batcher, Dataset};
use crate::diagnostics::{Event, Method, RunReport};
use crate::engine::{Iterates, Probe, StopCriteria};
use crate::error::{Error, Result};
use crate::models::Architecture;
use crate::objective::{NetworkObjective, Objective};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::slr::{SlrConfig, SlrEngine};
use crate::sparsity::{compression_from_masks, PruneMask, SparsityPlan};
use crate::tensor::LayerSet;

/// Project every planned layer onto its budget; the mask is the resulting support.
pub fn hardprune(params: &LayerSet, plan: &SparsityPlan) -> Result<(LayerSet, PruneMask)> {
    let pruned = plan.project(params)?;
    let mask = PruneMask::from_layers(&pruned, plan.names())?;
    Ok((pruned, mask))
}

/// Plain minibatch training of `f`. With a mask, gradients outside it are
/// dropped and masked-out weights are rewritten to `+0.0` after every step.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs(
    arch: &Architecture,
    params: &LayerSet,
    train: &Dataset,
    epochs: usize,
    optimizer: OptimizerConfig,
    seed: u64,
    stream: &str,
    mask: Option<&PruneMask>,
) -> Result<LayerSet> {
    optimizer.validate()?;
    let mut params = params.clone();
    if epochs == 0 {
        return Ok(params);
    }
    let mut batcher = Batcher::with_stream(train.len(), optimizer.batch_size, seed, stream)?;
    let mut opt = Optimizer::new(optimizer);
    for _ in 0..epochs * batcher.batches_per_epoch() {
        let (x, y) = train.batch(&batcher.next_indices())?;
        let (_, mut grads) = arch.loss_and_grad(&params, &x, &y)?;
        if let Some(mask) = mask {
            mask.apply(&mut grads)?;
        }
        opt.step(&mut params, &grads)?;
        if let Some(mask) = mask {
            mask.apply(&mut params)?;
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("weights after training".into()));
    }
    Ok(params)
}

/// Fine-tune only the weights inside `mask`, with a fresh optimizer.
pub fn masked_retrain(
    arch: &Architecture,
    params: &LayerSet,
    mask: &PruneMask,
    train: &Dataset,
    epochs: usize,
    optimizer: OptimizerConfig,
    seed: u64,
) -> Result<LayerSet> {
    let mut start = params.clone();
    mask.apply(&mut start)?;
    train_epochs(
        arch,
        &start,
        train,
        epochs,
        optimizer,
        seed,
        "retrain",
        Some(mask),
    )
}

/// Accuracy of a hardpruned copy of the weights.
pub struct HardpruneProbe<'a> {
    pub arch: &'a Architecture,
    pub plan: &'a SparsityPlan,
    pub data: &'a Dataset,
}

impl Probe for HardpruneProbe<'_> {
    fn accuracy(&mut self, w: &LayerSet) -> Result<f64> {
        let (pruned, _) = hardprune(w, self.plan)?;
        self.arch.evaluate_accuracy(&pruned, self.data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub mask: PruneMask,
    pub hardprune_accuracy: f64,
    pub compression_rate: f64,
    pub epochs_used: f64,
}

impl PruneOutcome {
    pub fn event(&self) -> Event {
        Event::PruneOutcome {
            hardprune_accuracy: self.hardprune_accuracy,
            compression_rate: self.compression_rate,
            epochs_used: self.epochs_used,
            popcount: self.mask.popcount(),
        }
    }
}

/// Hardprune `w` and score it on `data`.
pub fn prune_outcome(
    arch: &Architecture,
    w: &LayerSet,
    plan: &SparsityPlan,
    data: &Dataset,
    epochs_used: f64,
) -> Result<(LayerSet, PruneOutcome)> {
    let (pruned, mask) = hardprune(w, plan)?;
    let hardprune_accuracy = arch.evaluate_accuracy(&pruned, data)?;
    let compression_rate = compression_from_masks(&mask)?.overall;
    Ok((
        pruned,
        PruneOutcome {
            mask,
            hardprune_accuracy,
            compression_rate,
            epochs_used,
        },
    ))
}

/// Everything a paired SLR/ADMM comparison shares.
#[derive(Clone, Debug)]
pub struct PairedSetup {
    pub arch: Architecture,
    pub pretrained: LayerSet,
    pub train: Dataset,
    pub test: Dataset,
    pub plan: SparsityPlan,
    pub optimizer: OptimizerConfig,
    pub slr: SlrConfig,
    pub admm: AdmmConfig,
    pub epochs: usize,
    /// Hardprune check period in iterations; 0 disables checks.
    pub check_every: usize,
    pub threshold: Option<f64>,
    pub stop_at_threshold: bool,
    /// Samples in the fixed batch on which Lagrangian values are compared.
    pub eval_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct BudgetRun {
    pub method: Method,
    pub report: RunReport,
    pub iterates: Iterates,
    pub pruned: LayerSet,
    pub outcome: PruneOutcome,
    /// Epoch of the first check meeting the threshold.
    pub epochs_to_threshold: Option<f64>,
}

/// Run one engine under the shared setup, then hardprune its weights.
pub fn accuracy_at_budget(setup: &PairedSetup, method: Method) -> Result<BudgetRun> {
    let mut obj = NetworkObjective::new(
        setup.arch.clone(),
        setup.train.clone(),
        setup.optimizer.batch_size,
        setup.eval_size,
        setup.seed,
    )?;
    let inner = match method {
        Method::Slr => setup.slr.inner_steps,
        Method::Admm => setup.admm.inner_steps,
        Method::Baseline => None,
    }
    .unwrap_or_else(|| obj.steps_per_epoch());
    let iterations = (setup.epochs * obj.steps_per_epoch()).div_ceil(inner);
    let stop = StopCriteria {
        max_iterations: iterations,
        accuracy_threshold: setup.threshold,
        check_every: setup.check_every,
        stop_at_threshold: setup.stop_at_threshold,
    };
    let mut probe = HardpruneProbe {
        arch: &setup.arch,
        plan: &setup.plan,
        data: &setup.test,
    };
    let pretrained = setup.pretrained.clone();
    let (mut report, iterates) = match method {
        Method::Slr => {
            let config = SlrConfig {
                optimizer: setup.optimizer,
                ..setup.slr.clone()
            };
            let mut engine = SlrEngine::new(config, setup.plan.clone(), pretrained, &obj)?;
            let report = engine.run(&mut obj, &stop, &mut probe, setup.seed)?;
            (report, engine.into_iterates())
        }
        Method::Admm => {
            let config = AdmmConfig {
                optimizer: setup.optimizer,
                ..setup.admm.clone()
            };
            let mut engine = AdmmEngine::new(config, setup.plan.clone(), pretrained, &obj)?;
            let report = engine.run(&mut obj, &stop, &mut probe, setup.seed)?;
            (report, engine.into_iterates())
        }
        Method::Baseline => {
            return Err(Error::InvalidConfig(
                "accuracy at budget needs slr or admm".into(),
            ))
        }
    };
    let epochs_used = report.last_record().map_or(0.0, |r| r.epoch);
    let (pruned, outcome) = prune_outcome(
        &setup.arch,
        &iterates.w,
        &setup.plan,
        &setup.test,
        epochs_used,
    )?;
    report.push_event(outcome.event());
    let epochs_to_threshold = report.events().find_map(|e| match e {
        Event::ThresholdReached { epoch, .. } => Some(*epoch),
        _ => None,
    });
    Ok(BudgetRun {
        method,
        report,
        iterates,
        pruned,
        outcome,
        epochs_to_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::sparsity::{cardinality_ok, Mask};
    use crate::tensor::Tensor;

    fn small() -> (Architecture, LayerSet, Dataset, SparsityPlan) {
        let arch: Architecture = "mlp-6-8-3".parse().unwrap();
        let params = arch.init(3);
        let data = make_synthetic(60, 3, 6, 4).unwrap();
        let plan =
            SparsityPlan::from_keep_fraction(&params, ["fc1.weight", "fc2.weight"], 0.3).unwrap();
        (arch, params, data, plan)
    }

    #[test]
    fn hardprune_feasible_input_is_unchanged() {
        let mut params = LayerSet::new();
        params.insert("w", Tensor::vector(&[0.0, 2.0, 0.0, -1.0]));
        let mut plan = SparsityPlan::new();
        plan.set("w", 2);
        let (pruned, mask) = hardprune(&params, &plan).unwrap();
        assert_eq!(pruned, params);
        assert_eq!(mask.layers["w"].bits(), &[false, true, false, true]);
        plan.set("w", 4);
        assert_eq!(hardprune(&params, &plan).unwrap().0, params);
    }

    #[test]
    fn zero_epochs_retrain_is_identity_on_masked_weights() {
        let (arch, params, data, plan) = small();
        let (pruned, mask) = hardprune(&params, &plan).unwrap();
        let out = masked_retrain(
            &arch,
            &pruned,
            &mask,
            &data,
            0,
            OptimizerConfig::sgd(0.1),
            0,
        )
        .unwrap();
        assert_eq!(out, pruned);
    }

    #[test]
    fn retrain_keeps_exact_zeros() {
        let (arch, params, data, plan) = small();
        let (pruned, mask) = hardprune(&params, &plan).unwrap();
        let out = masked_retrain(
            &arch,
            &pruned,
            &mask,
            &data,
            2,
            OptimizerConfig::default(),
            0,
        )
        .unwrap();
        for (name, budget) in plan.iter() {
            let t = out.require(name).unwrap();
            assert!(cardinality_ok(t, budget));
            for (&v, &keep) in t.data().iter().zip(mask.layers[name].bits()) {
                if !keep {
                    assert_eq!(v.to_bits(), 0);
                }
            }
        }
        assert_ne!(out, pruned);
    }

    #[test]
    fn all_true_mask_is_ordinary_training() {
        let (arch, params, data, _) = small();
        let mut mask = PruneMask::default();
        for name in ["fc1.weight", "fc2.weight"] {
            mask.layers.insert(
                name.into(),
                Mask::all(params.require(name).unwrap().dims(), true),
            );
        }
        let cfg = OptimizerConfig::sgd(0.05);
        let masked =
            train_epochs(&arch, &params, &data, 1, cfg, 0, "retrain", Some(&mask)).unwrap();
        let plain = train_epochs(&arch, &params, &data, 1, cfg, 0, "retrain", None).unwrap();
        assert_eq!(masked, plain);
    }

    #[test]
    fn probe_matches_direct_evaluation() {
        let (arch, params, data, plan) = small();
        let (pruned, _) = hardprune(&params, &plan).unwrap();
        let mut probe = HardpruneProbe {
            arch: &arch,
            plan: &plan,
            data: &data,
        };
        assert_eq!(
            probe.accuracy(&params).unwrap(),
            arch.evaluate_accuracy(&pruned, &data).unwrap()
        );
    }
}
