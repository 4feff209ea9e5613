//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value and whatever the backward pass needs. Parameters are not
//! copied onto the tape: param nodes read straight from the borrowed slice.
//! [`Graph::backward`] walks the tape in reverse and returns the gradients of
//! the parameters and of any inputs created with [`Graph::input_with_grad`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{conv2d_backward, conv2d_forward};
use super::element::{gemm, MatMut, MatRef};
use super::norm::{batch_norm_backward, batch_norm_forward, BatchStats, BnSaved};
use super::pool::{max_pool2d_backward, max_pool2d_forward, pooled_extent};
use super::{Element, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    Relu { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Linear { x: Var, w: Var, b: Var },
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, argmax: Vec<u32> },
    Add { a: Var, b: Var },
    Reshape { x: Var },
    MeanAll { x: Var },
    DotConst { x: Var, weights: Vec<T> },
    /// Scalar computed outside the tape with a known gradient.
    External { x: Var, grad: Vec<f64> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<Option<Vec<T>>>,
    inputs: Vec<(Var, Vec<T>)>,
}

impl<T: Element> Gradients<T> {
    pub fn param(&self, index: usize) -> Option<&[T]> {
        self.params.get(index).and_then(|g| g.as_deref())
    }

    pub fn input(&self, var: Var) -> Option<&[T]> {
        self.inputs
            .iter()
            .find(|(v, _)| *v == var)
            .map(|(_, g)| g.as_slice())
    }

    /// Moves parameter gradients into the tensors' `grad` buffers. Parameters
    /// that received no gradient get zeros.
    pub fn store_into(self, params: &mut [Tensor<T>]) -> Result<(), NnError> {
        for (p, g) in params.iter_mut().zip(self.params) {
            let g = g.unwrap_or_else(|| vec![T::zero(); p.numel()]);
            p.set_grad(g)?;
        }
        Ok(())
    }
}

pub struct Graph<'p, T: Element> {
    params: &'p [Tensor<T>],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
    batch_stats: Vec<(usize, BatchStats)>,
}

fn shape_err(msg: String) -> NnError {
    NnError::ShapeMismatch(msg)
}

impl<'p, T: Element> Graph<'p, T> {
    /// New empty tape over `params`; `seed` drives dropout masks.
    pub fn new(params: &'p [Tensor<T>], mode: Mode, seed: u64) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite forward value");
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        match self.nodes[v.0].op {
            Op::Param(i) => self.params[i].data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shapes are valid")
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Input, false)
    }

    /// Input whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Input, true)
    }

    /// Node for parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        let p = &self.params[index];
        let v = self.push(p.shape().to_vec(), Vec::new(), Op::Param(index), p.requires_grad());
        self.param_vars[index] = Some(v);
        v
    }

    /// Batch statistics gathered by train-mode batch norms, keyed by the
    /// caller-supplied layer id.
    pub fn take_batch_stats(&mut self) -> Vec<(usize, BatchStats)> {
        std::mem::take(&mut self.batch_stats)
    }

    /// 2-D convolution, stride 1, zero padding `k / 2` (same-size output).
    /// `x`: (N, C, H, W); `w`: (O, C, k, k) with odd k; `b`: (O).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(shape_err(format!("conv2d ranks: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        if ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 || bs[0] != ws[0] {
            return Err(shape_err(format!("conv2d shapes: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let shape = vec![xs[0], ws[0], xs[2], xs[3]];
        let out = conv2d_forward(self.value(x), xs, self.value(w), ws, self.value(b));
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(shape, out, Op::Conv2d { x, w, b }, needs))
    }

    /// Per-channel batch normalization of (N, C, H, W) with eps 1e-5.
    ///
    /// Train mode normalizes with batch statistics and records them under
    /// `layer` for a later running-stat update. Eval mode uses the given
    /// running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        layer: usize,
    ) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err(format!("batch_norm2d expects rank 4, got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(shape_err(format!("batch_norm2d channel count {c} mismatch")));
        }
        let train = self.mode == Mode::Train;
        if train && xs[0] * xs[2] * xs[3] <= 1 {
            return Err(NnError::DegenerateBatch);
        }
        let (out, saved, stats) = batch_norm_forward(
            self.value(x),
            &xs,
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            train,
        );
        if let Some(stats) = stats {
            self.batch_stats.push((layer, stats));
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(xs, out, Op::BatchNorm { x, gamma, beta, saved }, needs))
    }

    /// 2x2 max pooling over the last two axes with stride 1 or 2.
    pub fn max_pool2d(&mut self, x: Var, stride: usize) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err(format!("max_pool2d expects rank 4, got {xs:?}")));
        }
        if stride == 0 {
            return Err(NnError::InvalidArgument("pool stride must be positive".into()));
        }
        let (ho, wo) = match (pooled_extent(xs[2], stride), pooled_extent(xs[3], stride)) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(NnError::InputTooSmall { height: xs[2], width: xs[3] }),
        };
        let (out, argmax) = max_pool2d_forward(self.value(x), &xs, stride, ho, wo);
        let needs = self.needs(x);
        Ok(self.push(vec![xs[0], xs[1], ho, wo], out, Op::MaxPool2d { x, argmax }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let (shape, needs) = (self.shape(x).to_vec(), self.needs(x));
        self.push(shape, out, Op::Relu { x }, needs)
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::InvalidArgument(format!("dropout p {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of_f64(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let (shape, needs) = (self.shape(x).to_vec(), self.needs(x));
        Ok(self.push(shape, out, Op::Dropout { x, mask }, needs))
    }

    /// `x w^T + b` for `x`: (N, F), `w`: (O, F), `b`: (O).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(shape_err(format!("linear shapes: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        gemm(
            T::one(),
            MatRef::rows(self.value(x), n, f),
            MatRef::transposed(self.value(w), f, o),
            T::zero(),
            MatMut::rows(&mut out, n, o),
        );
        let bias = self.value(b);
        for row in out.chunks_exact_mut(o) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v = *v + bb;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![n, o], out, Op::Linear { x, w, b }, needs))
    }

    fn split_axis(&self, x: Var, axis: usize) -> Result<(usize, usize, usize, Vec<usize>), NnError> {
        let s = self.shape(x);
        if axis >= s.len() || s.len() < 2 {
            return Err(shape_err(format!("axis {axis} invalid for shape {s:?}")));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        let mut out_shape = s.to_vec();
        out_shape.remove(axis);
        Ok((outer, s[axis], inner, out_shape))
    }

    /// Mean over one axis (the axis is removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let (outer, len, inner, shape) = self.split_axis(x, axis)?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|l| xv[(o * len + l) * inner + i].as_f64()).sum();
                out.push(T::of_f64(s / len as f64));
            }
        }
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::MeanAxis { x, axis }, needs))
    }

    /// Max over one axis (the axis is removed); first maximum wins ties.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let (outer, len, inner, shape) = self.split_axis(x, axis)?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                out.push(xv[best]);
                argmax.push(best as u32);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::MaxAxis { x, argmax }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Add { a, b }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NnError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err(format!("reshape {:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::Reshape { x }, needs))
    }

    /// Mean of every element, as a scalar of shape `[1]`.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.iter().map(|v| v.as_f64()).sum();
        let out = vec![T::of_f64(s / xv.len() as f64)];
        let needs = self.needs(x);
        self.push(vec![1], out, Op::MeanAll { x }, needs)
    }

    /// `sum(x * weights)` for a fixed weight tensor, as a scalar.
    pub fn dot_const(&mut self, x: Var, weights: Vec<T>) -> Result<Var, NnError> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err(format!(
                "dot_const: {} weights for {} values",
                weights.len(),
                self.value(x).len()
            )));
        }
        let s: f64 = self
            .value(x)
            .iter()
            .zip(&weights)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        let needs = self.needs(x);
        Ok(self.push(vec![1], vec![T::of_f64(s)], Op::DotConst { x, weights }, needs))
    }

    /// Registers a scalar `value` computed outside the tape from `x`, with
    /// `grad[i] = d value / d x[i]`.
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var, NnError> {
        if grad.len() != self.value(x).len() {
            return Err(shape_err("external_scalar gradient length".into()));
        }
        let needs = self.needs(x);
        Ok(self.push(vec![1], vec![T::of_f64(value)], Op::External { x, grad }, needs))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: vec![None; self.params.len()],
            inputs: Vec::new(),
        };

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            debug_assert!(gy.iter().all(|v| v.is_finite()), "non-finite gradient");
            match &node.op {
                Op::Input => out.inputs.push((Var(id), gy)),
                Op::Param(i) => out.params[*i] = Some(gy),
                Op::Conv2d { x, w, b } => {
                    let (xs, ws) = (self.shape(*x), self.shape(*w));
                    let g = conv2d_backward(
                        self.value(*x),
                        xs,
                        self.value(*w),
                        ws,
                        &gy,
                        self.needs(*x),
                        self.needs(*w),
                    );
                    if let Some(dx) = g.dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = g.dw {
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.db);
                    }
                }
                Op::BatchNorm { x, gamma, beta, saved } => {
                    let g = batch_norm_backward(&gy, &node.shape, self.value(*gamma), saved);
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g.dx);
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads, *gamma, g.dgamma);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, g.dbeta);
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    let dx = max_pool2d_backward(&gy, argmax, self.value(*x).len());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Relu { x } => {
                    let dx = self
                        .value(*x)
                        .iter()
                        .zip(&gy)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let dx = gy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let o = self.shape(*w)[0];
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); n * f];
                        gemm(
                            T::one(),
                            MatRef::rows(&gy, n, o),
                            MatRef::rows(self.value(*w), o, f),
                            T::zero(),
                            MatMut::rows(&mut dx, n, f),
                        );
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let mut dw = vec![T::zero(); o * f];
                        gemm(
                            T::one(),
                            MatRef::transposed(&gy, o, n),
                            MatRef::rows(self.value(*x), n, f),
                            T::zero(),
                            MatMut::rows(&mut dw, o, f),
                        );
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.needs(*b) {
                        let db = (0..o)
                            .map(|j| T::of_f64((0..n).map(|i| gy[i * o + j].as_f64()).sum()))
                            .collect();
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MeanAxis { x, axis } => {
                    let (outer, len, inner, _) = self.split_axis(*x, *axis)?;
                    let scale = T::of_f64(1.0 / len as f64);
                    let mut dx = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                dx[(o * len + l) * inner + i] = gy[o * inner + i] * scale;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxAxis { x, argmax, .. } => {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (&src, &g) in argmax.iter().zip(&gy) {
                        dx[src as usize] = dx[src as usize] + g;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, gy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, gy);
                    }
                }
                Op::Reshape { x } => accumulate(&mut grads, *x, gy),
                Op::MeanAll { x } => {
                    let n = self.value(*x).len();
                    let g = T::of_f64(gy[0].as_f64() / n as f64);
                    accumulate(&mut grads, *x, vec![g; n]);
                }
                Op::DotConst { x, weights } => {
                    let dx = weights.iter().map(|&w| w * gy[0]).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::External { x, grad } => {
                    let g0 = gy[0].as_f64();
                    let dx = grad.iter().map(|&d| T::of_f64(d * g0)).collect();
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(g) {
                *e = *e + d;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Output extent of a 2x2 pool for an input extent.
pub fn pool_output_extent(extent: usize, stride: usize) -> Option<usize> {
    pooled_extent(extent, stride)
}
