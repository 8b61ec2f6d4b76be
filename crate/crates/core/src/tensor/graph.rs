//! Reverse-mode differentiation over an append-only node arena.
//!
//! Node ids grow monotonically, so reverse id order is a valid reverse
//! topological order for the backward sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectral::fft;
use crate::tensor::array::{Shape, Tensor};
use crate::tensor::kernels;
use crate::tensor::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Sin,
    Cos,
}

impl UnaryKind {
    /// Slope used by every leaky-relu in the network.
    pub const LEAKY_SLOPE: f64 = 0.01;

    pub fn leaky_relu() -> Self {
        UnaryKind::LeakyRelu(Self::LEAKY_SLOPE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Mean over rows, keeping a `(N, C, 1, W)` result.
    Height,
    /// Mean over columns, keeping a `(N, C, H, 1)` result.
    Width,
    /// Mean over the whole plane, keeping `(N, C, 1, 1)`.
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Upsample {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Re,
    Im,
}

/// An operation whose backward rule lives outside the engine.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Var>;

    /// Gradients for each entry of [`CustomOp::inputs`], given the output gradient.
    fn backward(&self, grad: &Tensor<T>, inputs: &[&Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Unary {
        input: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Affine {
        input: Var,
        scale: T,
    },
    AxisMean {
        input: Var,
        axis: Axis,
    },
    SumAll {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    Upsample {
        input: Var,
        mode: Upsample,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Fft2 {
        re: Var,
        im: Option<Var>,
        inverse: bool,
        part: Part,
    },
    Magnitude {
        re: Var,
        im: Var,
    },
    Phase {
        re: Var,
        im: Var,
    },
    Custom(Box<dyn CustomOp<T>>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Batch statistics produced by a train-mode batch norm.
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel the moments were computed over.
    pub count: usize,
}

/// A differentiation graph. Build it with the op methods, call
/// [`Graph::backward`] on a scalar, then read gradients back.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bindings: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a.0[i], b.0[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(Shape(out))
}

/// Element strides of `s` when read through broadcast shape `out`.
fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let [_, c, h, w] = s.0;
    let full = [c * h * w, h * w, w, 1];
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if s.0[i] == 1 && out.0[i] != 1 { 0 } else { full[i] };
    }
    st
}

fn for_each_index(out: Shape, mut f: impl FnMut(usize, [usize; 4])) {
    let mut flat = 0;
    for n in 0..out.n() {
        for c in 0..out.c() {
            for h in 0..out.h() {
                for w in 0..out.w() {
                    f(flat, [n, c, h, w]);
                    flat += 1;
                }
            }
        }
    }
}

#[inline]
fn offset(st: &[usize; 4], idx: [usize; 4]) -> usize {
    idx[0] * st[0] + idx[1] * st[1] + idx[2] * st[2] + idx[3] * st[3]
}

/// Sums a full-size contribution down to `target` along broadcast axes.
fn reduce_to<T: Scalar>(full: Vec<T>, out: Shape, target: Shape) -> Tensor<T> {
    if out == target {
        return Tensor::from_vec(target, full).expect("reduce shape");
    }
    let st = broadcast_strides(target, out);
    let mut red = vec![T::zero(); target.numel()];
    for_each_index(out, |flat, idx| {
        let o = offset(&st, idx);
        red[o] = red[o] + full[flat];
    });
    Tensor::from_vec(target, red).expect("reduce shape")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Largest absolute value held by any node.
    pub fn max_abs_value(&self) -> T {
        self.nodes
            .iter()
            .fold(T::zero(), |m, n| m.max(n.value.max_abs()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Unary { input, .. }
            | Op::Affine { input, .. }
            | Op::AxisMean { input, .. }
            | Op::SumAll { input }
            | Op::SliceChannels { input, .. }
            | Op::Upsample { input, .. }
            | Op::MaxPool2 { input, .. } => vec![*input],
            Op::Binary { a, b, .. } | Op::Concat { a, b } => vec![*a, *b],
            Op::Fft2 { re, im, .. } => {
                let mut v = vec![*re];
                v.extend(im);
                v
            }
            Op::Magnitude { re, im } | Op::Phase { re, im } => vec![*re, *im],
            Op::Custom(c) => c.inputs(),
        }
    }

    /// Adds a leaf. Leaves with `requires_grad` collect gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a gradient-collecting leaf (once per graph).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bindings.get(&id) {
            return Ok(v);
        }
        let v = self.leaf(store.value(id).clone(), true)?;
        self.bindings.insert(id, v);
        Ok(v)
    }

    /// Gradient of every bound parameter, indexed like the store.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        store
            .ids()
            .map(|id| {
                self.bindings
                    .get(&id)
                    .and_then(|v| self.nodes[v.0].grad.clone())
            })
            .collect()
    }

    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bindings.get(&id).copied()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            "conv2d",
        )
    }

    /// Batch normalization. `running` selects eval mode (normalize with the
    /// given mean/variance); `None` normalizes with batch statistics and
    /// returns them so the caller can update its running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let x = self.value(input);
        let count = x.shape().n() * x.shape().plane();
        let f = kernels::batch_norm_forward(x, self.value(gamma).data(), self.value(beta).data(), running, eps)?;
        let batch_stats = f.moments.is_some();
        let moments = f.moments.map(|(mean, var)| BatchMoments { mean, var, count });
        let v = self.push(
            f.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: f.xhat,
                inv_std: f.inv_std,
                batch_stats,
            },
            "batch_norm",
        )?;
        Ok((v, moments))
    }

    pub fn unary(&mut self, input: Var, kind: UnaryKind) -> Result<Var> {
        let x = self.value(input);
        let out = match kind {
            UnaryKind::LeakyRelu(s) => {
                let s = T::of(s);
                x.map(|v| if v > T::zero() { v } else { v * s })
            }
            UnaryKind::Tanh => x.map(|v| v.tanh()),
            UnaryKind::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
            UnaryKind::Sin => x.map(|v| v.sin()),
            UnaryKind::Cos => x.map(|v| v.cos()),
        };
        self.push(out, Op::Unary { input, kind }, "unary")
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::leaky_relu())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sin)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Cos)
    }

    /// Elementwise arithmetic with singleton-axis broadcasting on either side.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::shape("binary", format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (xa, xb) = (self.value(a), self.value(b));
        if kind == BinaryKind::Div && xb.data().iter().any(|v| v.abs() < T::of(1e-12)) {
            return Err(Error::DivisionByZero { op: "binary div" });
        }
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data = if sa == sb {
            xa.data().iter().zip(xb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (st_a, st_b) = (broadcast_strides(sa, out_shape), broadcast_strides(sb, out_shape));
            let mut d = Vec::with_capacity(out_shape.numel());
            for_each_index(out_shape, |_, idx| {
                d.push(f(xa.data()[offset(&st_a, idx)], xb.data()[offset(&st_b, idx)]));
            });
            d
        };
        self.push(Tensor::from_vec(out_shape, data)?, Op::Binary { a, b, kind }, "binary")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(input).map(|v| scale * v + shift);
        self.push(out, Op::Affine { input, scale }, "affine")
    }

    pub fn axis_mean(&mut self, input: Var, axis: Axis) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims();
        let out = match axis {
            Axis::Width => {
                let inv = T::of(1.0 / w as f64);
                let mut d = Vec::with_capacity(n * c * h);
                for row in x.data().chunks_exact(w) {
                    d.push(row.iter().copied().sum::<T>() * inv);
                }
                Tensor::from_vec([n, c, h, 1], d)?
            }
            Axis::Height => {
                let inv = T::of(1.0 / h as f64);
                let mut d = vec![T::zero(); n * c * w];
                for (p, plane) in x.data().chunks_exact(h * w).enumerate() {
                    let dst = &mut d[p * w..(p + 1) * w];
                    for row in plane.chunks_exact(w) {
                        for (o, &v) in dst.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    dst.iter_mut().for_each(|o| *o = *o * inv);
                }
                Tensor::from_vec([n, c, 1, w], d)?
            }
            Axis::Spatial => {
                let inv = T::of(1.0 / (h * w) as f64);
                let d = x
                    .data()
                    .chunks_exact(h * w)
                    .map(|p| p.iter().copied().sum::<T>() * inv)
                    .collect();
                Tensor::from_vec([n, c, 1, 1], d)?
            }
        };
        self.push(out, Op::AxisMean { input, axis }, "axis_mean")
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` scalar.
    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::SumAll { input }, "sum_all")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        let ([n, ca, h, w], [nb, cb, hb, wb]) = (xa.dims(), xb.dims());
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", xa.shape(), xb.shape()),
            ));
        }
        let p = h * w;
        let mut d = Vec::with_capacity((ca + cb) * n * p);
        for s in 0..n {
            d.extend_from_slice(&xa.data()[s * ca * p..(s + 1) * ca * p]);
            d.extend_from_slice(&xb.data()[s * cb * p..(s + 1) * cb * p]);
        }
        self.push(Tensor::from_vec([n, ca + cb, h, w], d)?, Op::Concat { a, b }, "concat_channels")
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims();
        if start + len > c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let p = h * w;
        let mut d = Vec::with_capacity(n * len * p);
        for s in 0..n {
            d.extend_from_slice(&x.data()[(s * c + start) * p..(s * c + start + len) * p]);
        }
        self.push(
            Tensor::from_vec([n, len, h, w], d)?,
            Op::SliceChannels { input, start },
            "slice_channels",
        )
    }

    /// Doubles height and width.
    pub fn upsample2(&mut self, input: Var, mode: Upsample) -> Result<Var> {
        let x = self.value(input);
        let out = match mode {
            Upsample::Bilinear => kernels::upsample_bilinear2(x),
            Upsample::Nearest => kernels::upsample_nearest2(x),
        };
        self.push(out, Op::Upsample { input, mode }, "upsample2")
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(input))?;
        self.push(out, Op::MaxPool2 { input, argmax }, "maxpool2")
    }

    fn fft_common(&mut self, re: Var, im: Option<Var>, inverse: bool) -> Result<(Var, Var)> {
        let op = if inverse { "ifft2" } else { "fft2" };
        let xr = self.value(re);
        let shape = xr.shape();
        fft::check_pow2(op, shape.h(), shape.w())?;
        let mut r = xr.data().to_vec();
        let mut i = match im {
            Some(v) => {
                if self.shape(v) != shape {
                    return Err(Error::shape(op, format!("re {shape:?} vs im {:?}", self.shape(v))));
                }
                self.value(v).data().to_vec()
            }
            None => vec![T::zero(); r.len()],
        };
        fft::fft2_planes(&mut r, &mut i, shape.h(), shape.w(), inverse);
        if inverse {
            let s = T::of(1.0 / shape.plane() as f64);
            r.iter_mut().for_each(|v| *v = *v * s);
            i.iter_mut().for_each(|v| *v = *v * s);
        }
        let vr = self.push(
            Tensor::from_vec(shape, r)?,
            Op::Fft2 {
                re,
                im,
                inverse,
                part: Part::Re,
            },
            op,
        )?;
        let vi = self.push(
            Tensor::from_vec(shape, i)?,
            Op::Fft2 {
                re,
                im,
                inverse,
                part: Part::Im,
            },
            op,
        )?;
        Ok((vr, vi))
    }

    /// Unnormalized 2-D DFT of every plane; `im = None` means a real input.
    /// Returns the (real, imaginary) parts.
    pub fn fft2(&mut self, re: Var, im: Option<Var>) -> Result<(Var, Var)> {
        self.fft_common(re, im, false)
    }

    /// Inverse 2-D DFT including the `1/(H*W)` factor.
    pub fn ifft2(&mut self, re: Var, im: Var) -> Result<(Var, Var)> {
        self.fft_common(re, Some(im), true)
    }

    /// Smoothed magnitude `sqrt(re^2 + im^2 + delta^2)`.
    pub fn magnitude(&mut self, re: Var, im: Var, delta: f64) -> Result<Var> {
        let (xr, xi) = (self.value(re), self.value(im));
        if xr.shape() != xi.shape() {
            return Err(Error::shape("magnitude", format!("{:?} vs {:?}", xr.shape(), xi.shape())));
        }
        let d2 = T::of(delta * delta);
        let data = xr
            .data()
            .iter()
            .zip(xi.data())
            .map(|(&a, &b)| (a * a + b * b + d2).sqrt())
            .collect();
        self.push(Tensor::from_vec(xr.shape(), data)?, Op::Magnitude { re, im }, "magnitude")
    }

    /// `atan2(im, re)` in `(-pi, pi]`; a zero imaginary part of either sign
    /// is read as `+0`.
    pub fn phase(&mut self, re: Var, im: Var) -> Result<Var> {
        let (xr, xi) = (self.value(re), self.value(im));
        if xr.shape() != xi.shape() {
            return Err(Error::shape("phase", format!("{:?} vs {:?}", xr.shape(), xi.shape())));
        }
        let data = xr
            .data()
            .iter()
            .zip(xi.data())
            .map(|(&a, &b)| wrapped_atan2(b, a))
            .collect();
        self.push(Tensor::from_vec(xr.shape(), data)?, Op::Phase { re, im }, "phase")
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, value: Tensor<T>) -> Result<Var> {
        let name = op.name();
        self.push(value, Op::Custom(op), name)
    }

    /// Accumulates d(loss)/d(node) into every reachable node that requires
    /// gradients. Repeated calls add onto the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != Shape::SCALAR {
            return Err(Error::NotScalar(shape.0));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let need = [self.needs(*input), self.needs(*weight), bias.is_some_and(|b| self.needs(b))];
                let cg = kernels::conv2d_backward(self.value(*input), self.value(*weight), g, *stride, *padding, need)?;
                if let Some(dx) = cg.input {
                    accumulate(grads, *input, dx);
                }
                if let Some(dw) = cg.weight {
                    accumulate(grads, *weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    let db = db.reshape(self.shape(*b))?;
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (dx, dg, db) =
                    kernels::batch_norm_backward(g, xhat, inv_std, self.value(*gamma).data(), *batch_stats);
                if self.needs(*input) {
                    accumulate(grads, *input, Tensor::from_vec(g.shape(), dx)?);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(self.shape(*gamma), dg)?);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(self.shape(*beta), db)?);
                }
            }
            Op::Unary { input, kind } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let d: Vec<T> = match kind {
                    UnaryKind::LeakyRelu(s) => {
                        let s = T::of(*s);
                        g.data()
                            .iter()
                            .zip(x)
                            .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * s })
                            .collect()
                    }
                    UnaryKind::Tanh => g.data().iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect(),
                    UnaryKind::Sigmoid => g.data().iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect(),
                    UnaryKind::Sin => g.data().iter().zip(x).map(|(&gv, &xv)| gv * xv.cos()).collect(),
                    UnaryKind::Cos => g.data().iter().zip(x).map(|(&gv, &xv)| -gv * xv.sin()).collect(),
                };
                accumulate(grads, *input, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Binary { a, b, kind } => {
                let out = node.value.shape();
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (xa, xb) = (self.value(*a), self.value(*b));
                let (st_a, st_b) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
                let gd = g.data();
                let read = |x: &Tensor<T>, st: &[usize; 4], idx| x.data()[offset(st, idx)];
                if self.needs(*a) {
                    let full: Vec<T> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                        BinaryKind::Mul | BinaryKind::Div => {
                            let mut f = Vec::with_capacity(gd.len());
                            for_each_index(out, |flat, idx| {
                                let bv = read(xb, &st_b, idx);
                                f.push(if *kind == BinaryKind::Mul { gd[flat] * bv } else { gd[flat] / bv });
                            });
                            f
                        }
                    };
                    accumulate(grads, *a, reduce_to(full, out, sa));
                }
                if self.needs(*b) {
                    let full: Vec<T> = match kind {
                        BinaryKind::Add => gd.to_vec(),
                        BinaryKind::Sub => gd.iter().map(|&v| -v).collect(),
                        BinaryKind::Mul | BinaryKind::Div => {
                            let mut f = Vec::with_capacity(gd.len());
                            for_each_index(out, |flat, idx| {
                                let av = read(xa, &st_a, idx);
                                let bv = read(xb, &st_b, idx);
                                f.push(if *kind == BinaryKind::Mul {
                                    gd[flat] * av
                                } else {
                                    -gd[flat] * av / (bv * bv)
                                });
                            });
                            f
                        }
                    };
                    accumulate(grads, *b, reduce_to(full, out, sb));
                }
            }
            Op::Affine { input, scale } => {
                accumulate(grads, *input, g.map(|v| v * *scale));
            }
            Op::AxisMean { input, axis } => {
                let shape = self.shape(*input);
                let [_, _, h, w] = shape.0;
                let d = match axis {
                    Axis::Width => {
                        let inv = T::of(1.0 / w as f64);
                        Tensor::from_fn(shape, |[n, c, y, _]| g.at(n, c, y, 0) * inv)
                    }
                    Axis::Height => {
                        let inv = T::of(1.0 / h as f64);
                        Tensor::from_fn(shape, |[n, c, _, x]| g.at(n, c, 0, x) * inv)
                    }
                    Axis::Spatial => {
                        let inv = T::of(1.0 / (h * w) as f64);
                        Tensor::from_fn(shape, |[n, c, _, _]| g.at(n, c, 0, 0) * inv)
                    }
                };
                accumulate(grads, *input, d);
            }
            Op::SumAll { input } => {
                let gv = g.data()[0];
                accumulate(grads, *input, Tensor::full(self.shape(*input), gv));
            }
            Op::Concat { a, b } => {
                let (ca, cb) = (self.shape(*a).c(), self.shape(*b).c());
                let [n, _, h, w] = g.dims();
                let p = h * w;
                if self.needs(*a) {
                    let mut d = Vec::with_capacity(n * ca * p);
                    for s in 0..n {
                        let base = s * (ca + cb) * p;
                        d.extend_from_slice(&g.data()[base..base + ca * p]);
                    }
                    accumulate(grads, *a, Tensor::from_vec(self.shape(*a), d)?);
                }
                if self.needs(*b) {
                    let mut d = Vec::with_capacity(n * cb * p);
                    for s in 0..n {
                        let base = s * (ca + cb) * p + ca * p;
                        d.extend_from_slice(&g.data()[base..base + cb * p]);
                    }
                    accumulate(grads, *b, Tensor::from_vec(self.shape(*b), d)?);
                }
            }
            Op::SliceChannels { input, start } => {
                let shape = self.shape(*input);
                let len = g.shape().c();
                let p = shape.plane();
                let mut d = vec![T::zero(); shape.numel()];
                for s in 0..shape.n() {
                    let dst = (s * shape.c() + start) * p;
                    d[dst..dst + len * p].copy_from_slice(&g.data()[s * len * p..(s + 1) * len * p]);
                }
                accumulate(grads, *input, Tensor::from_vec(shape, d)?);
            }
            Op::Upsample { input, mode } => {
                let shape = self.shape(*input);
                let d = match mode {
                    Upsample::Bilinear => kernels::upsample_bilinear2_backward(g, shape),
                    Upsample::Nearest => kernels::upsample_nearest2_backward(g, shape),
                };
                accumulate(grads, *input, d);
            }
            Op::MaxPool2 { input, argmax } => {
                let shape = self.shape(*input);
                let mut d = vec![T::zero(); shape.numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src as usize] = d[src as usize] + gv;
                }
                accumulate(grads, *input, Tensor::from_vec(shape, d)?);
            }
            Op::Fft2 {
                re,
                im,
                inverse,
                part,
            } => {
                // Adjoint of F is conj(F); adjoint of conj(F)/HW is F/HW.
                let shape = g.shape();
                let (mut r, mut i) = match part {
                    Part::Re => (g.data().to_vec(), vec![T::zero(); g.len()]),
                    Part::Im => (vec![T::zero(); g.len()], g.data().to_vec()),
                };
                fft::fft2_planes(&mut r, &mut i, shape.h(), shape.w(), !inverse);
                if *inverse {
                    let s = T::of(1.0 / shape.plane() as f64);
                    r.iter_mut().for_each(|v| *v = *v * s);
                    i.iter_mut().for_each(|v| *v = *v * s);
                }
                if self.needs(*re) {
                    accumulate(grads, *re, Tensor::from_vec(shape, r)?);
                }
                if let Some(im) = im {
                    if self.needs(*im) {
                        accumulate(grads, *im, Tensor::from_vec(shape, i)?);
                    }
                }
            }
            Op::Magnitude { re, im } => {
                let a = node.value.data();
                let (xr, xi) = (self.value(*re).data(), self.value(*im).data());
                if self.needs(*re) {
                    let d = g.data().iter().zip(xr).zip(a).map(|((&gv, &x), &m)| gv * x / m).collect();
                    accumulate(grads, *re, Tensor::from_vec(g.shape(), d)?);
                }
                if self.needs(*im) {
                    let d = g.data().iter().zip(xi).zip(a).map(|((&gv, &x), &m)| gv * x / m).collect();
                    accumulate(grads, *im, Tensor::from_vec(g.shape(), d)?);
                }
            }
            Op::Phase { re, im } => {
                let (xr, xi) = (self.value(*re).data(), self.value(*im).data());
                let tiny = T::of(1e-16);
                let r2: Vec<T> = xr.iter().zip(xi).map(|(&a, &b)| a * a + b * b + tiny).collect();
                if self.needs(*re) {
                    let d = g.data().iter().zip(xi).zip(&r2).map(|((&gv, &b), &q)| -gv * b / q).collect();
                    accumulate(grads, *re, Tensor::from_vec(g.shape(), d)?);
                }
                if self.needs(*im) {
                    let d = g.data().iter().zip(xr).zip(&r2).map(|((&gv, &a), &q)| gv * a / q).collect();
                    accumulate(grads, *im, Tensor::from_vec(g.shape(), d)?);
                }
            }
            Op::Custom(c) => {
                let inputs = c.inputs();
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = c.backward(g, &values)?;
                for (v, d) in inputs.into_iter().zip(gs) {
                    if let Some(d) = d {
                        if self.needs(v) {
                            accumulate(grads, v, d);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// `atan2` with `-0.0` imaginary parts folded onto `+0.0`, so the result is
/// always in `(-pi, pi]`.
#[inline]
pub fn wrapped_atan2<T: Scalar>(im: T, re: T) -> T {
    let im = if im == T::zero() { T::zero() } else { im };
    im.atan2(re)
}
