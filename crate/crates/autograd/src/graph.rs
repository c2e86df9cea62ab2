use std::sync::atomic::{AtomicU64, Ordering};

use crate::conv::{col2im, from_channel_major, im2col, to_channel_major, ConvGeometry};
use crate::error::{shape_err, Error, Result};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Upper bound on the elements of a temporary column matrix.
const COLS_BUDGET: usize = 1 << 21;

fn samples_per_chunk(per_sample: usize, n: usize) -> usize {
    (COLS_BUDGET / per_sample.max(1)).clamp(1, n.max(1))
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance of the batch.
    pub var: Vec<S>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

enum Op<S> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<S>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// Output is the normalized input; `per_instance` selects (n, c)
    /// groups instead of channel groups.
    Normalize {
        x: Var,
        per_instance: bool,
        inv_std: Vec<S>,
    },
    FixedNormalize {
        x: Var,
        inv_std: Vec<S>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Relu(Var),
    LeakyRelu(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, S),
    SpatialMean(Var),
    Mean(Var),
    MeanAbsError {
        x: Var,
        target: Tensor<S>,
    },
    SumSqErrorMean {
        x: Var,
        target: Tensor<S>,
    },
    BceWithLogits {
        x: Var,
        target: f64,
        eps: f64,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A single-use computation tape.
pub struct Graph<S> {
    id: u64,
    nodes: Vec<Node<S>>,
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits an `[N, C, ...]` shape into `(N, C, spatial)`.
fn ncs(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [n, c] => (*n, *c, 1),
        [n, c, rest @ ..] => (*n, *c, rest.iter().product()),
        [n] => (*n, 1, 1),
        [] => (1, 1, 1),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Process-unique identity of this tape.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a single-element node, widened to `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item().to_f64_lossy()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (&[n, cin, h, wd], &[cout, wcin, k, k2]) = (xs.as_slice(), ws.as_slice()) else {
            return shape_err("conv2d", &[0, 0, 0, 0], &xs);
        };
        if wcin != cin || k != k2 {
            return shape_err("conv2d", &[cout, cin, k, k], &ws);
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return shape_err("conv2d bias", &[cout], self.value(b).shape());
            }
        }
        let geom = ConvGeometry::new(cin, h, wd, k, stride, pad)?;
        let (patch, grid) = (geom.patch_len(), geom.grid_len());
        let keep_cols = self.rg(w);
        // Columns of several samples side by side: [patch, chunk * grid].
        // Without a weight gradient the columns are dropped after use, so
        // the batch is processed in slices to bound their size.
        let chunk = if keep_cols { n } else { samples_per_chunk(patch * grid, n) };
        let mut out = vec![S::zero(); n * cout * grid];
        let mut saved = Vec::new();
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for start in (0..n).step_by(chunk.max(1)) {
                let m = chunk.min(n - start);
                let wide = m * grid;
                let mut cols = vec![S::zero(); patch * wide];
                for i in 0..m {
                    let img = &xv[(start + i) * geom.image_len()..(start + i + 1) * geom.image_len()];
                    im2col(img, &geom, &mut cols, wide, i * grid);
                }
                let mut ycm = vec![S::zero(); cout * wide];
                matmul(wv, false, &cols, false, &mut ycm, cout, patch, wide, false);
                if let Some(bv) = bv {
                    for (row, &bb) in ycm.chunks_mut(wide).zip(bv) {
                        row.iter_mut().for_each(|v| *v += bb);
                    }
                }
                out[start * cout * grid..(start + m) * cout * grid]
                    .copy_from_slice(&from_channel_major(&ycm, m, cout, grid));
                if keep_cols {
                    saved = cols;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new([n, cout, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols: saved }, rg))
    }

    /// Transposed convolution; `w` has shape `[C_in, C_out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (&[n, cin, h, wd], &[wcin, cout, k, k2]) = (xs.as_slice(), ws.as_slice()) else {
            return shape_err("conv_transpose2d", &[0, 0, 0, 0], &xs);
        };
        if wcin != cin || k != k2 {
            return shape_err("conv_transpose2d", &[cin, cout, k, k], &ws);
        }
        let geom = ConvGeometry::for_transpose(cout, h, wd, k, stride, pad)?;
        let (patch, grid) = (geom.patch_len(), geom.grid_len());
        let chunk = samples_per_chunk(patch * grid, n);
        let mut out = vec![S::zero(); n * geom.image_len()];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for start in (0..n).step_by(chunk) {
                let m = chunk.min(n - start);
                let wide = m * grid;
                let xs = &xv[start * cin * grid..(start + m) * cin * grid];
                let xcm = to_channel_major(xs, m, cin, grid);
                let mut cols = vec![S::zero(); patch * wide];
                matmul(wv, true, &xcm, false, &mut cols, patch, cin, wide, false);
                for i in 0..m {
                    let yi = &mut out[(start + i) * geom.image_len()..(start + i + 1) * geom.image_len()];
                    col2im(&cols, &geom, yi, wide, i * grid);
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                let plane = geom.height * geom.width;
                for (j, row) in out.chunks_mut(plane).enumerate() {
                    let bb = bv[j % cout];
                    row.iter_mut().for_each(|v| *v += bb);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new([n, cout, geom.height, geom.width], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// Dense layer; `w` has shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (&[n, fin], &[fout, wfin]) = (xs.as_slice(), ws.as_slice()) else {
            return shape_err("linear", &[0, 0], &xs);
        };
        if fin != wfin {
            return shape_err("linear", &[fout, fin], &ws);
        }
        let mut out = vec![S::zero(); n * fout];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            // Row by row so that a sample's output does not depend on the
            // rest of the batch.
            for (xi, yi) in xv.chunks(fin).zip(out.chunks_mut(fout)) {
                matmul(xi, false, wv, true, yi, 1, fin, fout, false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for row in out.chunks_mut(fout) {
                    row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new([n, fout], out)?, Op::Linear { x, w, b }, rg))
    }

    fn normalize(&mut self, x: Var, per_instance: bool) -> (Var, NormStats<S>) {
        let xv = self.value(x);
        let (n, c, sp) = ncs(xv.shape());
        let groups = if per_instance { n * c } else { c };
        let count = if per_instance { sp } else { n * sp };
        let mut mean = vec![0.0f64; groups];
        let mut var = vec![0.0f64; groups];
        let group_of = |i: usize, ch: usize| if per_instance { i * c + ch } else { ch };
        let data = xv.data();
        for i in 0..n {
            for ch in 0..c {
                let g = group_of(i, ch);
                let block = &data[(i * c + ch) * sp..(i * c + ch + 1) * sp];
                mean[g] += block.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for i in 0..n {
            for ch in 0..c {
                let g = group_of(i, ch);
                let block = &data[(i * c + ch) * sp..(i * c + ch + 1) * sp];
                var[g] += block.iter().map(|v| (v.to_f64_lossy() - mean[g]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut out = Vec::with_capacity(data.len());
        for i in 0..n {
            for ch in 0..c {
                let g = group_of(i, ch);
                let block = &data[(i * c + ch) * sp..(i * c + ch + 1) * sp];
                out.extend(block.iter().map(|v| S::from_f64_lossy((v.to_f64_lossy() - mean[g]) * inv_std[g])));
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        let inv_std = inv_std.into_iter().map(S::from_f64_lossy).collect();
        let out = self.push(
            Tensor::new(shape, out).expect("same length"),
            Op::Normalize { x, per_instance, inv_std },
            rg,
        );
        let stats = NormStats {
            mean: mean.into_iter().map(S::from_f64_lossy).collect(),
            var: var.into_iter().map(S::from_f64_lossy).collect(),
            count,
        };
        (out, stats)
    }

    /// Training-mode batch normalization (no affine part): standardizes each
    /// channel over batch and spatial positions.
    pub fn batch_norm(&mut self, x: Var) -> (Var, NormStats<S>) {
        self.normalize(x, false)
    }

    /// Instance normalization: standardizes each (sample, channel) plane.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        self.normalize(x, true).0
    }

    /// Inference-mode normalization with fixed per-channel statistics.
    pub fn normalize_with(&mut self, x: Var, mean: &[S], var: &[S]) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, sp) = ncs(xv.shape());
        if mean.len() != c || var.len() != c {
            return shape_err("normalize_with", &[c], &[mean.len()]);
        }
        let inv_std: Vec<S> = var
            .iter()
            .map(|v| S::from_f64_lossy(1.0 / (v.to_f64_lossy() + NORM_EPS).sqrt()))
            .collect();
        let mut out = xv.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                out[(i * c + ch) * sp..(i * c + ch + 1) * sp]
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::FixedNormalize { x, inv_std }, rg))
    }

    /// `y[n, c, ..] = gamma[c] * x[n, c, ..] + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, sp) = ncs(xv.shape());
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err("channel_affine", &[c], self.value(gamma).shape());
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xv.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                out[(i * c + ch) * sp..(i * c + ch + 1) * sp]
                    .iter_mut()
                    .for_each(|v| *v = *v * g[ch] + b[ch]);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(shape, out)?, Op::ChannelAffine { x, gamma, beta }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(S::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        self.unary(x, move |v| if v > S::zero() { v } else { v * slope }, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, S::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| S::one() / (S::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("add", av.shape(), bv.shape());
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        self.unary(x, move |v| v * c, Op::Scale(x, c))
    }

    /// Averages `[N, C, H, W]` over the spatial axes, giving `[N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return shape_err("spatial_mean", &[0, 0, 0, 0], xv.shape());
        }
        let (n, c, sp) = ncs(xv.shape());
        let inv = S::one() / S::from_usize(sp).unwrap();
        let out = xv.data().chunks(sp).map(|p| p.iter().copied().sum::<S>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([n, c], out)?, Op::SpatialMean(x), rg))
    }

    /// Mean over every element, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(S::from_f64_lossy(m)), Op::Mean(x), rg)
    }

    /// `mean |x - target|` over every element.
    pub fn mean_abs_error(&mut self, x: Var, target: &Tensor<S>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return shape_err("mean_abs_error", target.shape(), xv.shape());
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).to_f64_lossy().abs())
            .sum();
        let value = Tensor::scalar(S::from_f64_lossy(s / xv.numel() as f64));
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanAbsError { x, target: target.clone() }, rg))
    }

    /// Sum of squared errors divided by the batch size (leading dimension).
    pub fn sum_sq_error_mean(&mut self, x: Var, target: &Tensor<S>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return shape_err("sum_sq_error_mean", target.shape(), xv.shape());
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).to_f64_lossy().powi(2))
            .sum();
        let value = Tensor::scalar(S::from_f64_lossy(s / xv.batch() as f64));
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumSqErrorMean { x, target: target.clone() }, rg))
    }

    /// Binary cross-entropy of `sigmoid(x)` against a constant label, with
    /// probabilities clamped to `[eps, 1 - eps]`; averaged over elements.
    pub fn bce_with_logits(&mut self, x: Var, target: f64, eps: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&target) || !(0.0..0.5).contains(&eps) {
            return Err(Error::Invalid {
                op: "bce_with_logits",
                msg: format!("target {target} / eps {eps} out of range"),
            });
        }
        let xv = self.value(x);
        let s: f64 = xv
            .data()
            .iter()
            .map(|z| {
                let p = sigmoid64(z.to_f64_lossy()).clamp(eps, 1.0 - eps);
                -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
            })
            .sum();
        let value = Tensor::scalar(S::from_f64_lossy(s / xv.numel() as f64));
        let rg = self.rg(x);
        Ok(self.push(value, Op::BceWithLogits { x, target, eps }, rg))
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return shape_err("backward", &[1], self.value(loss).shape());
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<S>, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.batch();
                let cout = wv.shape()[0];
                let (patch, grid) = (geom.patch_len(), geom.grid_len());
                let wide = n * grid;
                let gcm = to_channel_major(gy.data(), n, cout, grid);
                if self.rg(*w) {
                    let mut dw = vec![S::zero(); cout * patch];
                    matmul(&gcm, false, cols, true, &mut dw, cout, wide, patch, false);
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let db = channel_sums(&gcm, 1, cout, wide);
                    self.accumulate(grads, b, Tensor::new([cout], db).unwrap());
                }
                if self.rg(*x) {
                    let mut dcols = vec![S::zero(); patch * wide];
                    matmul(wv.data(), true, &gcm, false, &mut dcols, patch, cout, wide, false);
                    let mut dx = vec![S::zero(); xv.numel()];
                    for i in 0..n {
                        let dxi = &mut dx[i * geom.image_len()..(i + 1) * geom.image_len()];
                        col2im(&dcols, geom, dxi, wide, i * grid);
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.batch();
                let cin = wv.shape()[0];
                let cout = geom.channels;
                let (patch, grid) = (geom.patch_len(), geom.grid_len());
                let wide = n * grid;
                let gd = gy.data();
                let mut gcols = vec![S::zero(); patch * wide];
                for i in 0..n {
                    im2col(&gd[i * geom.image_len()..(i + 1) * geom.image_len()], geom, &mut gcols, wide, i * grid);
                }
                if self.rg(*x) {
                    let mut dxcm = vec![S::zero(); cin * wide];
                    matmul(wv.data(), false, &gcols, false, &mut dxcm, cin, patch, wide, false);
                    let dx = from_channel_major(&dxcm, n, cin, grid);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.rg(*w) {
                    let xcm = to_channel_major(xv.data(), n, cin, grid);
                    let mut dw = vec![S::zero(); cin * patch];
                    matmul(&xcm, false, &gcols, true, &mut dw, cin, wide, patch, false);
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let db = channel_sums(gd, n, cout, geom.height * geom.width);
                    self.accumulate(grads, b, Tensor::new([cout], db).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                let gd = gy.data();
                if self.rg(*x) {
                    let mut dx = vec![S::zero(); n * fin];
                    matmul(gd, false, wv.data(), false, &mut dx, n, fout, fin, false);
                    self.accumulate(grads, *x, Tensor::new([n, fin], dx).unwrap());
                }
                if self.rg(*w) {
                    let mut dw = vec![S::zero(); fout * fin];
                    matmul(gd, true, xv.data(), false, &mut dw, fout, n, fin, false);
                    self.accumulate(grads, *w, Tensor::new([fout, fin], dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let db = channel_sums(gd, n, fout, 1);
                    self.accumulate(grads, b, Tensor::new([fout], db).unwrap());
                }
            }
            Op::Normalize { x, per_instance, inv_std } => {
                let (n, c, sp) = ncs(y.shape());
                let count = if *per_instance { sp } else { n * sp } as f64;
                let groups = inv_std.len();
                let group_of = |i: usize, ch: usize| if *per_instance { i * c + ch } else { ch };
                let (yd, gd) = (y.data(), gy.data());
                let mut mg = vec![0.0f64; groups];
                let mut mgy = vec![0.0f64; groups];
                for i in 0..n {
                    for ch in 0..c {
                        let g = group_of(i, ch);
                        let r = (i * c + ch) * sp..(i * c + ch + 1) * sp;
                        for (a, b) in gd[r.clone()].iter().zip(&yd[r]) {
                            let a = a.to_f64_lossy();
                            mg[g] += a;
                            mgy[g] += a * b.to_f64_lossy();
                        }
                    }
                }
                let mut dx = vec![S::zero(); yd.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let g = group_of(i, ch);
                        let (m1, m2) = (mg[g] / count, mgy[g] / count);
                        let s = inv_std[g].to_f64_lossy();
                        let r = (i * c + ch) * sp..(i * c + ch + 1) * sp;
                        for ((d, a), b) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&yd[r]) {
                            *d = S::from_f64_lossy(s * (a.to_f64_lossy() - m1 - b.to_f64_lossy() * m2));
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::FixedNormalize { x, inv_std } => {
                let (n, c, sp) = ncs(y.shape());
                let mut dx = gy.data().to_vec();
                for i in 0..n {
                    for ch in 0..c {
                        dx[(i * c + ch) * sp..(i * c + ch + 1) * sp]
                            .iter_mut()
                            .for_each(|v| *v *= inv_std[ch]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let xv = self.value(*x);
                let (n, c, sp) = ncs(xv.shape());
                let gd = gy.data();
                if self.rg(*gamma) {
                    let mut dg = vec![S::zero(); c];
                    for i in 0..n {
                        for (ch, d) in dg.iter_mut().enumerate() {
                            let r = (i * c + ch) * sp..(i * c + ch + 1) * sp;
                            *d += gd[r.clone()].iter().zip(&xv.data()[r]).map(|(&a, &b)| a * b).sum::<S>();
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new([c], dg).unwrap());
                }
                if self.rg(*beta) {
                    let db = channel_sums(gd, n, c, sp);
                    self.accumulate(grads, *beta, Tensor::new([c], db).unwrap());
                }
                if self.rg(*x) {
                    let g = self.value(*gamma).data();
                    let mut dx = gd.to_vec();
                    for i in 0..n {
                        for ch in 0..c {
                            dx[(i * c + ch) * sp..(i * c + ch + 1) * sp]
                                .iter_mut()
                                .for_each(|v| *v *= g[ch]);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Relu(x) => {
                let dx = zip_map(gy, self.value(*x), |g, v| if v > S::zero() { g } else { S::zero() });
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let dx = zip_map(gy, self.value(*x), |g, v| if v > S::zero() { g } else { g * s });
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = zip_map(gy, y, |g, t| g * (S::one() - t * t));
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = zip_map(gy, y, |g, s| g * s * (S::one() - s));
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, gy.clone().reshape(shape).unwrap());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, gy.map(|g| g * c));
            }
            Op::SpatialMean(x) => {
                let xv = self.value(*x);
                let (_, _, sp) = ncs(xv.shape());
                let inv = S::one() / S::from_usize(sp).unwrap();
                let mut dx = Vec::with_capacity(xv.numel());
                for &g in gy.data() {
                    dx.extend(std::iter::repeat_n(g * inv, sp));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = gy.item() / S::from_usize(xv.numel()).unwrap();
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), g));
            }
            Op::MeanAbsError { x, target } => {
                let xv = self.value(*x);
                let g = gy.item() / S::from_usize(xv.numel()).unwrap();
                let dx = zip_map(xv, target, |a, b| {
                    let d = a - b;
                    if d > S::zero() {
                        g
                    } else if d < S::zero() {
                        -g
                    } else {
                        S::zero()
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::SumSqErrorMean { x, target } => {
                let xv = self.value(*x);
                let g = gy.item() * S::from_f64_lossy(2.0 / xv.batch() as f64);
                let dx = zip_map(xv, target, |a, b| g * (a - b));
                self.accumulate(grads, *x, dx);
            }
            Op::BceWithLogits { x, target, eps } => {
                let xv = self.value(*x);
                let g = gy.item().to_f64_lossy() / xv.numel() as f64;
                let dx = xv.map(|z| {
                    let p = sigmoid64(z.to_f64_lossy());
                    if p <= *eps || p >= 1.0 - *eps {
                        S::zero()
                    } else {
                        S::from_f64_lossy(g * (p - target))
                    }
                });
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn sigmoid64(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn channel_sums<S: Scalar>(data: &[S], n: usize, c: usize, sp: usize) -> Vec<S> {
    let mut out = vec![S::zero(); c];
    for i in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += data[(i * c + ch) * sp..(i * c + ch + 1) * sp].iter().copied().sum::<S>();
        }
    }
    out
}
