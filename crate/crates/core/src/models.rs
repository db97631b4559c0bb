//! Reference classifiers: fully connected MLPs and a small LeNet-style convnet.
//!
//! Dense weights are stored `[in, out]` so a layer computes `x·W + b`.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{LayerSet, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Layer widths from input to output, e.g. `[784, 300, 100, 10]`.
    Mlp(Vec<usize>),
    /// conv 1→6 5×5 pad 2, pool, conv 6→16 5×5, pool, fc 400→120, fc 120→10 on 28×28 inputs.
    LeNet5Like,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "lenet5-like" {
            return Ok(Self::LeNet5Like);
        }
        if let Some(rest) = s.strip_prefix("mlp-") {
            let widths: std::result::Result<Vec<usize>, _> =
                rest.split('-').map(str::parse).collect();
            if let Ok(widths) = widths {
                if widths.len() >= 2 && widths.iter().all(|&w| w > 0) {
                    return Ok(Self::Mlp(widths));
                }
            }
        }
        Err(Error::InvalidConfig(format!(
            "unknown model `{s}` (expected mlp-<in>-...-<out> or lenet5-like)"
        )))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mlp(widths) => {
                write!(f, "mlp")?;
                for w in widths {
                    write!(f, "-{w}")?;
                }
                Ok(())
            }
            Self::LeNet5Like => write!(f, "lenet5-like"),
        }
    }
}

impl Architecture {
    pub fn num_classes(&self) -> usize {
        match self {
            Self::Mlp(w) => *w.last().unwrap(),
            Self::LeNet5Like => 10,
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            Self::Mlp(w) => w[0],
            Self::LeNet5Like => 28 * 28,
        }
    }

    /// Parameter names and shapes in forward order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Self::Mlp(widths) => widths
                .windows(2)
                .enumerate()
                .flat_map(|(i, w)| {
                    [
                        (format!("fc{}.weight", i + 1), vec![w[0], w[1]]),
                        (format!("fc{}.bias", i + 1), vec![w[1]]),
                    ]
                })
                .collect(),
            Self::LeNet5Like => vec![
                ("conv1.weight".into(), vec![6, 1, 5, 5]),
                ("conv1.bias".into(), vec![6]),
                ("conv2.weight".into(), vec![16, 6, 5, 5]),
                ("conv2.bias".into(), vec![16]),
                ("fc1.weight".into(), vec![400, 120]),
                ("fc1.bias".into(), vec![120]),
                ("fc2.weight".into(), vec![120, 10]),
                ("fc2.bias".into(), vec![10]),
            ],
        }
    }

    /// Weight tensors only; biases are never pruned.
    pub fn prunable(&self) -> Vec<String> {
        self.shapes()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.ends_with(".weight"))
            .collect()
    }

    /// He-normal weights, zero biases, drawn from the `init` stream of `seed`.
    pub fn init(&self, seed: u64) -> LayerSet {
        let mut rng = rng::stream(seed, "init");
        let mut params = LayerSet::new();
        for (name, dims) in self.shapes() {
            let len: usize = dims.iter().product();
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&dims)
            } else {
                let fan_in: usize = if dims.len() == 4 {
                    dims[1..].iter().product()
                } else {
                    dims[0]
                };
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("std > 0");
                let data = (0..len).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(dims, data).expect("dims match")
            };
            params.insert(name, tensor);
        }
        params
    }

    /// Record the forward pass; returns the logits node and the parameter leaves.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &LayerSet,
        x: &Tensor,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        let batch = x.dims()[0];
        let per_sample: usize = x.dims()[1..].iter().product();
        if per_sample != self.input_len() {
            return Err(Error::ShapeMismatch {
                op: "model_input",
                lhs: x.dims().to_vec(),
                rhs: vec![batch, self.input_len()],
            });
        }
        let mut leaves = Vec::new();
        let mut leaf = |tape: &mut Tape, name: String| -> Result<Var> {
            let v = tape.leaf(params.require(&name)?.clone());
            leaves.push((name, v));
            Ok(v)
        };
        let logits = match self {
            Self::Mlp(widths) => {
                let mut h = tape.leaf(x.reshape(&[batch, per_sample])?);
                let layers = widths.len() - 1;
                for i in 1..=layers {
                    let w = leaf(tape, format!("fc{i}.weight"))?;
                    let b = leaf(tape, format!("fc{i}.bias"))?;
                    h = tape.matmul(h, w)?;
                    h = tape.add_bias(h, b)?;
                    if i < layers {
                        h = tape.relu(h)?;
                    }
                }
                h
            }
            Self::LeNet5Like => {
                let mut h = tape.leaf(x.reshape(&[batch, 1, 28, 28])?);
                for (i, pad) in [(1, 2), (2, 0)] {
                    let w = leaf(tape, format!("conv{i}.weight"))?;
                    let b = leaf(tape, format!("conv{i}.bias"))?;
                    h = tape.conv2d(h, w, pad)?;
                    h = tape.add_bias(h, b)?;
                    h = tape.relu(h)?;
                    h = tape.maxpool2d(h)?;
                }
                h = tape.reshape(h, &[batch, 400])?;
                let w = leaf(tape, "fc1.weight".into())?;
                let b = leaf(tape, "fc1.bias".into())?;
                h = tape.matmul(h, w)?;
                h = tape.add_bias(h, b)?;
                h = tape.relu(h)?;
                let w = leaf(tape, "fc2.weight".into())?;
                let b = leaf(tape, "fc2.bias".into())?;
                h = tape.matmul(h, w)?;
                tape.add_bias(h, b)?
            }
        };
        Ok((logits, leaves))
    }

    pub fn logits(&self, params: &LayerSet, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, params, x)?;
        Ok(tape.value(out).clone())
    }

    /// Mean cross-entropy of the batch.
    pub fn loss(&self, params: &LayerSet, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, params, x)?;
        let loss = tape.softmax_cross_entropy(out, labels)?;
        Ok(f64::from(tape.value(loss).data()[0]))
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        params: &LayerSet,
        x: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, LayerSet)> {
        if labels.is_empty() {
            return Err(Error::InvalidTensor("empty batch".into()));
        }
        let mut tape = Tape::new();
        let (out, leaves) = self.forward(&mut tape, params, x)?;
        let loss = tape.softmax_cross_entropy(out, labels)?;
        let value = f64::from(tape.value(loss).data()[0]);
        let mut grads = tape.backward(loss)?;
        let grad_set = leaves
            .into_iter()
            .map(|(name, v)| (name, grads.take_or_zeros(v)))
            .collect();
        Ok((value, grad_set))
    }

    /// Fraction of samples whose arg-max logit (lowest class on ties) equals the label.
    pub fn evaluate_accuracy(&self, params: &LayerSet, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        Ok(self.correct_count(params, data)? as f64 / data.len() as f64)
    }

    pub fn correct_count(&self, params: &LayerSet, data: &Dataset) -> Result<usize> {
        const CHUNK: usize = 1000;
        let classes = self.num_classes();
        let mut correct = 0;
        for start in (0..data.len()).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
            let (x, labels) = data.batch(&idx)?;
            let logits = self.logits(params, &x)?;
            for (row, &label) in labels.iter().enumerate() {
                let pred = Tensor::argmax(&logits.data()[row * classes..(row + 1) * classes]);
                correct += usize::from(pred == label);
            }
        }
        Ok(correct)
    }
}
