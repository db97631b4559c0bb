//! Dense row-major `f32` tensors and named parameter collections.
//!
//! Reductions (norms, inner products) accumulate in `f64` in flat index
//! order, so results are reproducible bit-for-bit for a given input.

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "dims must be non-empty positive extents, got {dims:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            data,
            grad: None,
        })
    }

    /// 1-D tensor from a non-empty slice.
    pub fn vector(values: &[f32]) -> Self {
        Self::new(vec![values.len()], values.to_vec()).expect("non-empty vector")
    }

    /// 2-D tensor from rows of equal length.
    pub fn matrix(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidTensor("ragged matrix rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), vec![value; n]).expect("positive dims")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_grad",
                lhs: self.dims.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), self.data.clone())
    }

    pub fn same_dims(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            })
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.check_same(other, "zip_map")?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            grad: None,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|x| x * factor)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    /// Σᵢ aᵢ², accumulated in `f64`.
    pub fn frobenius_norm_sq(&self) -> f64 {
        frobenius_norm_sq(self)
    }

    /// Largest entry; lowest index wins ties.
    pub fn argmax(values: &[f32]) -> usize {
        let mut best = 0;
        for (i, &v) in values.iter().enumerate() {
            if v > values[best] {
                best = i;
            }
        }
        best
    }
}

/// Σᵢ aᵢ² in `f64`.
pub fn frobenius_norm_sq(a: &Tensor) -> f64 {
    a.data.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
}

/// tr(AᵀB) = Σᵢⱼ AᵢⱼBᵢⱼ in `f64`.
pub fn trace_inner(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same(b, "trace_inner")?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum())
}

/// ‖A − B‖²_F in `f64`, without materializing the difference.
pub fn distance_sq(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same(b, "distance_sq")?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum())
}

/// Ordered map from layer name to tensor.
///
/// Used for weights, duplicates, multipliers and gradients alike; iteration
/// follows insertion order, which is the architecture's layer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerSet {
    layers: IndexMap<String, Tensor>,
}

impl LayerSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.layers.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layers.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.layers.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn require_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.layers.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Zero tensors with the same names and dims.
    pub fn zeros_like(&self) -> Self {
        self.iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.dims())))
            .collect()
    }

    /// Copies of the named layers, in the order given.
    pub fn subset<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        names
            .into_iter()
            .map(|n| Ok((n.to_string(), self.require(n)?.clone())))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.values().all(Tensor::all_finite)
    }

    pub fn total_len(&self) -> usize {
        self.layers.values().map(Tensor::len).sum()
    }
}

impl FromIterator<(String, Tensor)> for LayerSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            layers: iter.into_iter().collect(),
        }
    }
}

/// ‖W − Z‖²_F summed over every layer of `z`, looked up by name in `w`.
///
/// This is the global (all layers concatenated) squared violation.
pub fn global_distance_sq(w: &LayerSet, z: &LayerSet) -> Result<f64> {
    let mut total = 0.0;
    for (name, zt) in z.iter() {
        total += distance_sq(w.require(name)?, zt)?;
    }
    Ok(total)
}
