//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node holding its forward value; node indices
//! are a topological order, so the backward pass walks the tape from the
//! root down to index 0, visiting each node once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Conv2d {
        input: Var,
        weight: Var,
        padding: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    dims: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.get(v)?;
        Tensor::new(self.dims[v.0].clone(), g.to_vec()).ok()
    }

    /// Take the gradient out, or zeros when the node did not influence the root.
    pub fn take_or_zeros(&mut self, v: Var) -> Tensor {
        let dims = self.dims[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(dims, g).expect("gradient dims"),
            None => Tensor::zeros(&dims),
        }
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        Ok(self.push(value, op))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.dims()[1] != bv.dims()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.dims().to_vec(),
                rhs: bv.dims().to_vec(),
            });
        }
        let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        self.push_checked(value, Op::MatMul { a, b }, "matmul")
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .add(self.value(b))
            .map_err(|_| Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).dims().to_vec(),
                rhs: self.value(b).dims().to_vec(),
            })?;
        self.push_checked(value, Op::Add { a, b }, "add")
    }

    /// Adds a 1-D bias along axis 1 (features of `[B, n]`, channels of `[N, C, H, W]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.rank() < 2 || bv.rank() != 1 || bv.dims()[0] != xv.dims()[1] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xv.dims().to_vec(),
                rhs: bv.dims().to_vec(),
            });
        }
        let channels = xv.dims()[1];
        let inner: usize = xv.dims()[2..].iter().product();
        let b = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % channels])
            .collect();
        let value = Tensor::new(xv.dims().to_vec(), data)?;
        self.push_checked(value, Op::AddBias { x, bias }, "add_bias")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| Error::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).dims().to_vec(),
                rhs: self.value(b).dims().to_vec(),
            })?;
        self.push_checked(value, Op::Mul { a, b }, "mul")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push_checked(value, Op::Relu { x }, "relu")
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let value = xv.reshape(dims).map_err(|_| Error::ShapeMismatch {
            op: "reshape",
            lhs: xv.dims().to_vec(),
            rhs: dims.to_vec(),
        })?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Stride-1 convolution: input `[N, C, H, W]`, weight `[O, C, KH, KW]`,
    /// symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, padding: usize) -> Result<Var> {
        let (iv, wv) = (self.value(input), self.value(weight));
        let geom = ConvGeometry::new(iv.dims(), wv.dims(), padding)?;
        let mut out = vec![0.0; geom.n * geom.out_channels * geom.out_area()];
        let mut cols = vec![0.0; geom.patch_len() * geom.out_area()];
        let per_in = geom.channels * geom.h * geom.w;
        let per_out = geom.out_channels * geom.out_area();
        for img in 0..geom.n {
            geom.im2col(&iv.data()[img * per_in..(img + 1) * per_in], &mut cols);
            gemm(
                geom.out_channels,
                geom.patch_len(),
                geom.out_area(),
                wv.data(),
                false,
                &cols,
                false,
                &mut out[img * per_out..(img + 1) * per_out],
                0.0,
            );
        }
        let value = Tensor::new(
            vec![geom.n, geom.out_channels, geom.out_h(), geom.out_w()],
            out,
        )?;
        self.push_checked(
            value,
            Op::Conv2d {
                input,
                weight,
                padding,
            },
            "conv2d",
        )
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let iv = self.value(input);
        if iv.rank() != 4 || iv.dims()[2] < 2 || iv.dims()[3] < 2 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d",
                lhs: iv.dims().to_vec(),
                rhs: vec![2, 2],
            });
        }
        let (n, c, h, w) = (iv.dims()[0], iv.dims()[1], iv.dims()[2], iv.dims()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = iv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push_checked(value, Op::MaxPool2d { input, argmax }, "maxpool2d")
    }

    /// Mean cross-entropy of softmax(logits) against integer targets; scalar output.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.dims()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lv.dims().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (batch, classes) = (lv.dims()[0], lv.dims()[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidTensor(format!(
                "target class {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![0.0f32; batch * classes];
        let mut total = 0.0f64;
        for (row, &target) in targets.iter().enumerate() {
            let x = &lv.data()[row * classes..(row + 1) * classes];
            let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = x.iter().map(|&v| f64::from(v - max).exp()).sum();
            let log_sum = sum.ln();
            for (j, &v) in x.iter().enumerate() {
                probs[row * classes + j] = (f64::from(v - max).exp() / sum) as f32;
            }
            total += log_sum - f64::from(x[target] - max);
        }
        let loss = (total / batch as f64) as f32;
        let value = Tensor::new(vec![1], vec![loss])?;
        self.push_checked(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    /// Backward pass from a scalar root with seed 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::InvalidTensor(format!(
                "backward needs a scalar root, got dims {:?}",
                rv.dims()
            )));
        }
        self.backward_with(root, &Tensor::ones(rv.dims()))
    }

    /// Backward pass seeded with an upstream gradient of the root's shape.
    pub fn backward_with(&self, root: Var, seed: &Tensor) -> Result<Gradients> {
        self.value(root).check_same(seed, "backward_with")?;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.data().to_vec());
        let mut visited = Vec::with_capacity(root.0 + 1);
        for idx in (0..=root.0).rev() {
            visited.push(idx);
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {idx}")));
                }
            }
        }
        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
            visited,
        })
    }

    fn propagate(&self, idx: usize, up: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let ga = slot(grads, *a, m * k);
                gemm(m, n, k, up, false, bv.data(), true, ga, 1.0);
                let gb = slot(grads, *b, k * n);
                gemm(k, m, n, av.data(), true, up, false, gb, 1.0);
            }
            Op::Add { a, b } => {
                accumulate(slot(grads, *a, up.len()), up);
                accumulate(slot(grads, *b, up.len()), up);
            }
            Op::AddBias { x, bias } => {
                accumulate(slot(grads, *x, up.len()), up);
                let dims = self.value(*x).dims();
                let channels = dims[1];
                let inner: usize = dims[2..].iter().product();
                let gb = slot(grads, *bias, channels);
                for (i, &g) in up.iter().enumerate() {
                    gb[(i / inner) % channels] += g;
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = slot(grads, *a, up.len());
                for ((g, &u), &y) in ga.iter_mut().zip(up).zip(bv) {
                    *g += u * y;
                }
                let gb = slot(grads, *b, up.len());
                for ((g, &u), &x) in gb.iter_mut().zip(up).zip(av) {
                    *g += u * x;
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, up.len());
                for ((g, &u), &v) in gx.iter_mut().zip(up).zip(xv) {
                    if v > 0.0 {
                        *g += u;
                    }
                }
            }
            Op::Reshape { x } => accumulate(slot(grads, *x, up.len()), up),
            Op::Conv2d {
                input,
                weight,
                padding,
            } => {
                let (iv, wv) = (self.value(*input), self.value(*weight));
                let geom = ConvGeometry::new(iv.dims(), wv.dims(), *padding)
                    .expect("geometry validated in forward");
                let per_in = geom.channels * geom.h * geom.w;
                let per_out = geom.out_channels * geom.out_area();
                let mut cols = vec![0.0; geom.patch_len() * geom.out_area()];
                let mut dcols = vec![0.0; geom.patch_len() * geom.out_area()];
                {
                    let gw = slot(grads, *weight, wv.len());
                    for img in 0..geom.n {
                        geom.im2col(&iv.data()[img * per_in..(img + 1) * per_in], &mut cols);
                        // dW += dOut · colsᵀ
                        gemm(
                            geom.out_channels,
                            geom.out_area(),
                            geom.patch_len(),
                            &up[img * per_out..(img + 1) * per_out],
                            false,
                            &cols,
                            true,
                            gw,
                            1.0,
                        );
                    }
                }
                let gi = slot(grads, *input, iv.len());
                for img in 0..geom.n {
                    // dCols = Wᵀ · dOut
                    gemm(
                        geom.patch_len(),
                        geom.out_channels,
                        geom.out_area(),
                        wv.data(),
                        true,
                        &up[img * per_out..(img + 1) * per_out],
                        false,
                        &mut dcols,
                        0.0,
                    );
                    geom.col2im(&dcols, &mut gi[img * per_in..(img + 1) * per_in]);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let gi = slot(grads, *input, self.value(*input).len());
                for (&src, &u) in argmax.iter().zip(up) {
                    gi[src] += u;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let batch = targets.len();
                let classes = probs.len() / batch;
                let scale = up[0] / batch as f32;
                let gl = slot(grads, *logits, probs.len());
                for (row, &t) in targets.iter().enumerate() {
                    for j in 0..classes {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[row * classes + j] += scale * (probs[row * classes + j] - onehot);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-major `C = op(A)·op(B) + beta·C` with `op(A)` of shape `[m, k]`
/// and `op(B)` of shape `[k, n]`. `trans_*` reads the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices cover every element addressed by the given strides,
    // asserted above; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    channels: usize,
    h: usize,
    w: usize,
    out_channels: usize,
    kh: usize,
    kw: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], padding: usize) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        };
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
            return Err(mismatch());
        }
        let g = Self {
            n: input[0],
            channels: input[1],
            h: input[2],
            w: input[3],
            out_channels: weight[0],
            kh: weight[2],
            kw: weight[3],
            padding,
        };
        if g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw {
            return Err(mismatch());
        }
        Ok(g)
    }

    fn out_h(&self) -> usize {
        self.h + 2 * self.padding - self.kh + 1
    }

    fn out_w(&self) -> usize {
        self.w + 2 * self.padding - self.kw + 1
    }

    fn out_area(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Input pixel feeding column `(oy, ox)` of patch row `(c, ky, kx)`, if inside.
    fn source(&self, c: usize, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy + ky).checked_sub(self.padding)?;
        let x = (ox + kx).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then(|| (c * self.h + y) * self.w + x)
    }

    fn im2col(&self, image: &[f32], cols: &mut [f32]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut row = 0;
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[oy * ow + ox] =
                                self.source(c, ky, kx, oy, ox).map_or(0.0, |i| image[i]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], image_grad: &mut [f32]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut row = 0;
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some(i) = self.source(c, ky, kx, oy, ox) {
                                image_grad[i] += src[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
