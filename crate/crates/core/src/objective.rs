//! The loss `f(W)` as seen by the engines: a fixed evaluation batch for
//! comparisons and a minibatch stream for gradient steps.

use sha2::{Digest, Sha256};

use crate::data::{Batcher, Dataset};
use crate::error::{Error, Result};
use crate::models::Architecture;
use crate::rng;
use crate::tensor::{LayerSet, Tensor};

pub trait Objective {
    /// `f` on the fixed evaluation batch.
    fn eval_loss(&self, params: &LayerSet) -> Result<f64>;

    /// Loss and gradient on the next training minibatch.
    fn minibatch_grad(&mut self, params: &LayerSet) -> Result<(f64, LayerSet)>;

    /// Minibatches per pass over the training data.
    fn steps_per_epoch(&self) -> usize;

    /// Digest of the first training minibatch, when the objective has one.
    fn first_batch_checksum(&self) -> Option<String> {
        None
    }
}

/// Cross-entropy of a classifier over a dataset.
#[derive(Debug)]
pub struct NetworkObjective {
    arch: Architecture,
    train: Dataset,
    batcher: Batcher,
    eval_x: Tensor,
    eval_y: Vec<usize>,
    checksum: String,
}

impl NetworkObjective {
    /// `eval_size` samples drawn once from the `soc-eval` stream form the evaluation batch.
    pub fn new(
        arch: Architecture,
        train: Dataset,
        batch_size: usize,
        eval_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if train.num_classes() > arch.num_classes() {
            return Err(Error::InvalidConfig(format!(
                "dataset has {} classes but model `{arch}` predicts {}",
                train.num_classes(),
                arch.num_classes()
            )));
        }
        let eval_size = eval_size.clamp(1, train.len());
        let eval_idx = {
            use rand::seq::index::sample;
            let mut idx =
                sample(&mut rng::stream(seed, "soc-eval"), train.len(), eval_size).into_vec();
            idx.sort_unstable();
            idx
        };
        let (eval_x, eval_y) = train.batch(&eval_idx)?;
        let batcher = Batcher::new(train.len(), batch_size, seed)?;
        let checksum = indices_checksum(&batcher.clone().next_indices());
        Ok(Self {
            arch,
            train,
            batcher,
            eval_x,
            eval_y,
            checksum,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }
}

fn indices_checksum(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in indices {
        h.update((i as u64).to_le_bytes());
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Objective for NetworkObjective {
    fn eval_loss(&self, params: &LayerSet) -> Result<f64> {
        self.arch.loss(params, &self.eval_x, &self.eval_y)
    }

    fn minibatch_grad(&mut self, params: &LayerSet) -> Result<(f64, LayerSet)> {
        let idx = self.batcher.next_indices();
        let (x, y) = self.train.batch(&idx)?;
        self.arch.loss_and_grad(params, &x, &y)
    }

    fn steps_per_epoch(&self) -> usize {
        self.batcher.batches_per_epoch()
    }

    fn first_batch_checksum(&self) -> Option<String> {
        Some(self.checksum.clone())
    }
}

/// `f(W) = Σ ‖Wₙ − Tₙ‖²` over the layers of a target; deterministic gradients.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    target: LayerSet,
}

impl QuadraticObjective {
    pub fn new(target: LayerSet) -> Self {
        Self { target }
    }

    /// Single-layer target named `w`.
    pub fn vector(target: &[f32]) -> Self {
        let mut t = LayerSet::new();
        t.insert("w", Tensor::vector(target));
        Self::new(t)
    }

    pub fn target(&self) -> &LayerSet {
        &self.target
    }
}

impl Objective for QuadraticObjective {
    fn eval_loss(&self, params: &LayerSet) -> Result<f64> {
        crate::tensor::global_distance_sq(params, &self.target)
    }

    fn minibatch_grad(&mut self, params: &LayerSet) -> Result<(f64, LayerSet)> {
        let mut grads = LayerSet::new();
        for (name, t) in self.target.iter() {
            let w = params.require(name)?;
            grads.insert(name, w.zip_map(t, |w, t| 2.0 * (w - t))?);
        }
        Ok((self.eval_loss(params)?, grads))
    }

    fn steps_per_epoch(&self) -> usize {
        1
    }
}
