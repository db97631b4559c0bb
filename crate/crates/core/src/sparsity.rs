//! Cardinality budgets, the projection onto `card(x) <= l`, and prune masks.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LayerSet, Tensor};

/// True iff `w` has at most `l` entries different from zero.
///
/// `-0.0` compares equal to zero and is not counted.
pub fn cardinality_ok(w: &Tensor, l: usize) -> bool {
    w.count_nonzero() <= l
}

/// Flat indices of the `l` largest-magnitude entries, in ascending order.
/// Equal magnitudes prefer the lower index.
pub fn top_support(x: &[f32], l: usize) -> Vec<usize> {
    if l >= x.len() {
        return (0..x.len()).collect();
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    if l > 0 {
        let cmp =
            |&a: &usize, &b: &usize| x[b].abs().total_cmp(&x[a].abs()).then_with(|| a.cmp(&b));
        order.select_nth_unstable_by(l - 1, cmp);
    }
    order.truncate(l);
    order.sort_unstable();
    order
}

/// Euclidean projection of `x` onto `{z : card(z) <= l}`.
///
/// Kept entries are copied unchanged, everything else becomes `+0.0`.
/// Budgets at or above `x.len()` return `x` as is.
pub fn project_cardinality(x: &Tensor, l: usize) -> Tensor {
    if l >= x.len() {
        return x.clone();
    }
    let mut out = Tensor::zeros(x.dims());
    let src = x.data();
    let dst = out.data_mut();
    for i in top_support(src, l) {
        dst[i] = src[i];
    }
    out
}

/// Boolean support of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    dims: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn all(dims: &[usize], value: bool) -> Self {
        Self {
            dims: dims.to_vec(),
            bits: vec![value; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Write `+0.0` wherever the mask is false.
    pub fn apply(&self, t: &mut Tensor) -> Result<()> {
        if t.dims() != self.dims.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "mask_apply",
                lhs: t.dims().to_vec(),
                rhs: self.dims.clone(),
            });
        }
        for (v, &keep) in t.data_mut().iter_mut().zip(&self.bits) {
            if !keep {
                *v = 0.0;
            }
        }
        Ok(())
    }
}

/// True exactly where `z` is nonzero.
pub fn mask_from(z: &Tensor) -> Mask {
    Mask {
        dims: z.dims().to_vec(),
        bits: z.data().iter().map(|&v| v != 0.0).collect(),
    }
}

/// Per-layer masks, keyed like the parameters they cover.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layers: IndexMap<String, Mask>,
}

impl PruneMask {
    pub fn from_layers(
        params: &LayerSet,
        names: impl IntoIterator<Item = impl AsRef<str>>,
    ) -> Result<Self> {
        let mut layers = IndexMap::new();
        for name in names {
            let name = name.as_ref();
            layers.insert(name.to_string(), mask_from(params.require(name)?));
        }
        Ok(Self { layers })
    }

    pub fn apply(&self, params: &mut LayerSet) -> Result<()> {
        for (name, mask) in &self.layers {
            mask.apply(params.require_mut(name)?)?;
        }
        Ok(())
    }

    pub fn popcount(&self) -> usize {
        self.layers.values().map(Mask::popcount).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.values().map(|m| m.bits.len()).sum()
    }
}

/// Allowed nonzero count per prunable layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityPlan {
    budgets: IndexMap<String, usize>,
}

impl SparsityPlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// `l = ceil(keep * size)` for each named layer.
    pub fn from_keep_fraction<'a>(
        params: &LayerSet,
        names: impl IntoIterator<Item = &'a str>,
        keep: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep) {
            return Err(Error::InvalidConfig(format!(
                "keep fraction must lie in [0, 1], got {keep}"
            )));
        }
        let mut plan = Self::new();
        for name in names {
            let size = params.require(name)?.len();
            plan.set(name, keep_count(keep, size));
        }
        Ok(plan)
    }

    pub fn set(&mut self, name: impl Into<String>, budget: usize) {
        self.budgets.insert(name.into(), budget);
    }

    pub fn budget(&self, name: &str) -> Option<usize> {
        self.budgets.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.budgets.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.budgets.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.budgets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.budgets.is_empty()
    }

    /// Every layer exists in `params`, is listed in `prunable`, and has `l <= size`.
    pub fn validate(&self, params: &LayerSet, prunable: &[String]) -> Result<()> {
        for (name, &budget) in &self.budgets {
            let size = params.require(name)?.len();
            if !prunable.iter().any(|p| p == name) {
                return Err(Error::InvalidConfig(format!(
                    "layer `{name}` is not prunable"
                )));
            }
            if budget > size {
                return Err(Error::InvalidConfig(format!(
                    "budget {budget} for layer `{name}` exceeds its size {size}"
                )));
            }
        }
        Ok(())
    }

    /// Project every planned layer of `params`; other layers are copied.
    pub fn project(&self, params: &LayerSet) -> Result<LayerSet> {
        let mut out = params.clone();
        self.project_in_place(&mut out)?;
        Ok(out)
    }

    pub fn project_in_place(&self, params: &mut LayerSet) -> Result<()> {
        for (name, &budget) in &self.budgets {
            let t = params.require_mut(name)?;
            *t = project_cardinality(t, budget);
        }
        Ok(())
    }

    /// First layer of `z` over budget, if any.
    pub fn check_feasible(&self, z: &LayerSet) -> Result<()> {
        for (name, &budget) in &self.budgets {
            let nonzeros = z.require(name)?.count_nonzero();
            if nonzeros > budget {
                return Err(Error::IndicatorInfinite {
                    layer: name.clone(),
                    nonzeros,
                    budget,
                });
            }
        }
        Ok(())
    }
}

fn keep_count(keep: f64, size: usize) -> usize {
    // The small slack keeps products like 0.1 * 235200 from rounding up an extra weight.
    let raw = keep * size as f64;
    ((raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize).min(size)
}

/// Whole-model and per-layer compression (`total / retained`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub overall: f64,
    pub total: usize,
    pub retained: usize,
    /// `None` for a layer with nothing retained.
    pub per_layer: IndexMap<String, Option<f64>>,
}

fn compression(
    counts: impl IntoIterator<Item = (String, usize, usize)>,
) -> Result<CompressionReport> {
    let mut per_layer = IndexMap::new();
    let (mut total, mut retained) = (0usize, 0usize);
    for (name, size, kept) in counts {
        total += size;
        retained += kept;
        per_layer.insert(name, (kept > 0).then(|| size as f64 / kept as f64));
    }
    if retained == 0 {
        return Err(Error::DivisionByZero(
            "compression rate with zero retained weights".into(),
        ));
    }
    Ok(CompressionReport {
        overall: total as f64 / retained as f64,
        total,
        retained,
        per_layer,
    })
}

/// Compression implied by the budgets of `plan`.
pub fn compression_from_plan(params: &LayerSet, plan: &SparsityPlan) -> Result<CompressionReport> {
    let mut counts = Vec::with_capacity(plan.len());
    for (name, budget) in plan.iter() {
        let size = params.require(name)?.len();
        counts.push((name.to_string(), size, budget.min(size)));
    }
    compression(counts)
}

/// Compression realized by a set of masks.
pub fn compression_from_masks(masks: &PruneMask) -> Result<CompressionReport> {
    compression(
        masks
            .layers
            .iter()
            .map(|(name, m)| (name.clone(), m.bits.len(), m.popcount())),
    )
}
