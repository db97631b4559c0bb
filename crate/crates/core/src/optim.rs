//! First-order optimizers over a [`LayerSet`].

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LayerSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "momentum" => Ok(Self::Momentum),
            "adam" => Ok(Self::Adam),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer `{other}` (expected sgd, momentum or adam)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    /// Momentum coefficient, also Adam's first-moment decay.
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f32) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer with per-layer state.
#[derive(Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: IndexMap<String, Slot>,
    t: u32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            state: IndexMap::new(),
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// One update of every tensor in `params` that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut LayerSet, grads: &LayerSet) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let (bc1, bc2) = (
            1.0 - c.beta1.powi(self.t as i32),
            1.0 - c.beta2.powi(self.t as i32),
        );
        for (name, w) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            w.check_same(g, "optimizer_step")?;
            let (w, g) = (w.data_mut(), g.data());
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in w.iter_mut().zip(g) {
                        *w -= c.lr * g;
                    }
                }
                OptimizerKind::Momentum => {
                    let slot = self.slot(name, w.len());
                    for ((w, &g), m) in w.iter_mut().zip(g).zip(&mut slot.m) {
                        *m = c.beta1 * *m + g;
                        *w -= c.lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let slot = self.slot(name, w.len());
                    let Slot { m, v } = slot;
                    for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m).zip(v) {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }

    fn slot(&mut self, name: &str, len: usize) -> &mut Slot {
        self.state.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; len],
            v: vec![0.0; len],
        })
    }
}
