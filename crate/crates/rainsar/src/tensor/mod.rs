//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape of operations over row-major tensors;
//! node indices are handed out as [`Var`]s. Because every op only consumes
//! already-existing nodes, walking the tape backwards is a valid reverse
//! topological order for backpropagation. The op set is exactly what the
//! rain-retrieval model and its losses need — nothing more.
//!
//! Determinism: all reductions run in one fixed order, convolution kernels
//! included (see [`kernels`]), so a given seed reproduces training
//! bit for bit at any worker count.

pub mod kernels;
pub mod optim;

use thiserror::Error;

use kernels::{Conv2dDims, Pool2dDims, TConv2dDims};

/// Scalar types the engine runs on: f32 for training, f64 for gradient
/// verification.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn cast(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite f64 converts")
    }
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward seed must be a single value, got {numel} elements")]
    NonScalarLoss { numel: usize },
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// A dense row-major tensor. Rank 0 (empty shape) is a scalar; maps use
/// NCHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f64_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Tensor::from_vec(shape, data.into_iter().map(T::cast).collect())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The single element of a scalar (or single-element) tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of {} elements", self.numel());
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// Greatest |x| over the tensor, 0 for empty.
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Log,
    Exp,
    Expm1,
    Sqrt,
    Square,
    Abs,
    Relu,
    Sigmoid,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    AddScalar {
        a: usize,
    },
    MulScalar {
        a: usize,
        s: T,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        dims: Conv2dDims,
    },
    TConv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        dims: TConv2dDims,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    ConcatChannels {
        inputs: Vec<usize>,
        /// Channel count of each input, in order.
        widths: Vec<usize>,
    },
    BroadcastScalarToMap {
        s: usize,
    },
    MaskedMean {
        x: usize,
        mask: usize,
        /// Ocean-pixel count per sample (0 where the mask is empty).
        counts: Vec<T>,
    },
    MaskedMax {
        x: usize,
        /// Flat index of the per-sample maximum, None for empty masks.
        argmax: Vec<Option<usize>>,
    },
    MeanAll {
        a: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    workers: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            workers: worker_count(),
        }
    }

    /// Override the worker count used by convolution forwards (handy for
    /// determinism tests; normally taken from `RAINSAR_WORKERS`).
    pub fn set_workers(&mut self, workers: usize) {
        self.workers = workers.max(1);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf tensor. Gradients flow back to it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v`
    /// required one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise ----

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|x| unary_forward(kind, *x))
            .collect();
        let value = Tensor {
            shape: self.nodes[a.0].value.shape.clone(),
            data,
        };
        let req = self.req(a);
        self.push(value, Op::Unary { kind, a: a.0 }, req)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }
    /// Natural logarithm.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }
    /// e^x − 1, accurate near zero.
    pub fn expm1(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Expm1, a)
    }
    /// Square root; the derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }
    /// |x|; the derivative at exactly 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }
    /// ln(1 + e^x), evaluated stably for large |x|.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(shape_err(
                "binary op",
                format!("{:?} vs {:?}", va.shape, vb.shape),
            ));
        }
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(x, y)| match kind {
                BinaryKind::Add => *x + *y,
                BinaryKind::Sub => *x - *y,
                BinaryKind::Mul => *x * *y,
                BinaryKind::Div => *x / *y,
            })
            .collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let req = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Binary { kind, a: a.0, b: b.0 }, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let va = &self.nodes[a.0].value;
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| *x + s).collect(),
        };
        let req = self.req(a);
        self.push(value, Op::AddScalar { a: a.0 }, req)
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let va = &self.nodes[a.0].value;
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| *x * s).collect(),
        };
        let req = self.req(a);
        self.push(value, Op::MulScalar { a: a.0, s }, req)
    }

    // ---- structured ops ----

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4], TensorError> {
        let s = &self.nodes[v.0].value.shape;
        if s.len() != 4 {
            return Err(shape_err(op, format!("expected a 4-D NCHW tensor, got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Strided, zero-padded convolution. `x`: [N, Cin, H, W], `w`:
    /// [Cout, Cin, kh, kw], optional `b`: [Cout].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let [n, cin, h, wdt] = self.dims4(x, "conv2d")?;
        let ws = &self.nodes[w.0].value.shape;
        if ws.len() != 4 || ws[1] != cin {
            return Err(shape_err(
                "conv2d",
                format!("weights {ws:?} incompatible with {cin} input channels"),
            ));
        }
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(b) = b {
            let bs = &self.nodes[b.0].value.shape;
            if bs != &[cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {bs:?} does not match {cout} output channels"),
                ));
            }
        }
        let dims = Conv2dDims::compute(n, cin, h, wdt, cout, kh, kw, stride, pad).ok_or_else(
            || {
                shape_err(
                    "conv2d",
                    format!("kernel {kh}×{kw} stride {stride} pad {pad} does not fit {h}×{wdt}"),
                )
            },
        )?;
        let mut out = Tensor::zeros(&[n, cout, dims.oh, dims.ow]);
        kernels::conv2d_forward(
            &self.nodes[x.0].value.data,
            &self.nodes[w.0].value.data,
            b.map(|b| self.nodes[b.0].value.data.as_slice()),
            &dims,
            &mut out.data,
            self.workers,
        );
        let req = self.req(x) || self.req(w) || b.is_some_and(|b| self.req(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                dims,
            },
            req,
        ))
    }

    /// Transposed (stride-upsampling) convolution, zero padding. `x`:
    /// [N, Cin, H, W], `w`: [Cin, Cout, kh, kw]; output spatial size is
    /// (H−1)·stride + kh.
    pub fn conv2d_transposed(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let [n, cin, h, wdt] = self.dims4(x, "conv2d_transposed")?;
        let ws = &self.nodes[w.0].value.shape;
        if ws.len() != 4 || ws[0] != cin {
            return Err(shape_err(
                "conv2d_transposed",
                format!("weights {ws:?} incompatible with {cin} input channels"),
            ));
        }
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        if let Some(b) = b {
            let bs = &self.nodes[b.0].value.shape;
            if bs != &[cout] {
                return Err(shape_err(
                    "conv2d_transposed",
                    format!("bias {bs:?} does not match {cout} output channels"),
                ));
            }
        }
        let dims = TConv2dDims::compute(n, cin, h, wdt, cout, kh, kw, stride).ok_or_else(|| {
            shape_err(
                "conv2d_transposed",
                format!("kernel {kh}×{kw} stride {stride} invalid for {h}×{wdt}"),
            )
        })?;
        let mut out = Tensor::zeros(&[n, cout, dims.oh, dims.ow]);
        kernels::tconv2d_forward(
            &self.nodes[x.0].value.data,
            &self.nodes[w.0].value.data,
            b.map(|b| self.nodes[b.0].value.data.as_slice()),
            &dims,
            &mut out.data,
            self.workers,
        );
        let req = self.req(x) || self.req(w) || b.is_some_and(|b| self.req(b));
        Ok(self.push(
            out,
            Op::TConv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                dims,
            },
            req,
        ))
    }

    /// Max pooling over k×k windows; ties pick the first maximum in scan
    /// order.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.dims4(x, "max_pool2d")?;
        let dims = Pool2dDims::compute(n, c, h, w, k, stride).ok_or_else(|| {
            shape_err(
                "max_pool2d",
                format!("window {k} stride {stride} does not fit {h}×{w}"),
            )
        })?;
        let mut out = Tensor::zeros(&[n, c, dims.oh, dims.ow]);
        let mut argmax = vec![0usize; out.numel()];
        kernels::maxpool2d_forward(&self.nodes[x.0].value.data, &dims, &mut out.data, &mut argmax);
        let req = self.req(x);
        Ok(self.push(
            out,
            Op::MaxPool { x: x.0, argmax },
            req,
        ))
    }

    /// Concatenate NCHW maps along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(shape_err("concat_channels", "no inputs".into()));
        }
        let [n, _, h, w] = self.dims4(inputs[0], "concat_channels")?;
        let mut widths = Vec::with_capacity(inputs.len());
        for v in inputs {
            let [vn, vc, vh, vw] = self.dims4(*v, "concat_channels")?;
            if vn != n || vh != h || vw != w {
                return Err(shape_err(
                    "concat_channels",
                    format!("inputs disagree: [{n}, _, {h}, {w}] vs [{vn}, _, {vh}, {vw}]"),
                ));
            }
            widths.push(vc);
        }
        let ctot: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, ctot, h, w]);
        let plane = h * w;
        for ni in 0..n {
            let mut cbase = 0usize;
            for (v, cw) in inputs.iter().zip(&widths) {
                let src = &self.nodes[v.0].value.data;
                let src_off = ni * cw * plane;
                let dst_off = (ni * ctot + cbase) * plane;
                out.data[dst_off..dst_off + cw * plane]
                    .copy_from_slice(&src[src_off..src_off + cw * plane]);
                cbase += cw;
            }
        }
        let req = inputs.iter().any(|v| self.req(*v));
        Ok(self.push(
            out,
            Op::ConcatChannels {
                inputs: inputs.iter().map(|v| v.0).collect(),
                widths,
            },
            req,
        ))
    }

    /// Broadcast per-sample scalars [N, C] to constant maps [N, C, H, W].
    pub fn broadcast_scalar_to_map(
        &mut self,
        s: Var,
        h: usize,
        w: usize,
    ) -> Result<Var, TensorError> {
        let ss = &self.nodes[s.0].value.shape;
        if ss.len() != 2 {
            return Err(shape_err(
                "broadcast_scalar_to_map",
                format!("expected [N, C], got {ss:?}"),
            ));
        }
        let (n, c) = (ss[0], ss[1]);
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for i in 0..n * c {
            let v = self.nodes[s.0].value.data[i];
            out.data[i * h * w..(i + 1) * h * w].fill(v);
        }
        let req = self.req(s);
        Ok(self.push(out, Op::BroadcastScalarToMap { s: s.0 }, req))
    }

    fn masked_dims(&self, x: Var, mask: Var, op: &'static str) -> Result<[usize; 4], TensorError> {
        let d = self.dims4(x, op)?;
        if d[1] != 1 {
            return Err(shape_err(op, format!("expected a single channel, got {}", d[1])));
        }
        let md = self.dims4(mask, op)?;
        if md != d {
            return Err(shape_err(op, format!("mask shape {md:?} != input {d:?}")));
        }
        Ok(d)
    }

    /// Per-sample mean of `x` over pixels where `mask` > 0.5; samples whose
    /// mask is empty yield exactly 0. `x`, `mask`: [N, 1, H, W] → [N].
    /// The mask is treated as a constant: no gradient flows to it.
    pub fn masked_mean_per_sample(&mut self, x: Var, mask: Var) -> Result<Var, TensorError> {
        let [n, _, h, w] = self.masked_dims(x, mask, "masked_mean_per_sample")?;
        let plane = h * w;
        let half = T::cast(0.5);
        let mut out = Tensor::zeros(&[n]);
        let mut counts = vec![T::zero(); n];
        for ni in 0..n {
            let xs = &self.nodes[x.0].value.data[ni * plane..(ni + 1) * plane];
            let ms = &self.nodes[mask.0].value.data[ni * plane..(ni + 1) * plane];
            let mut sum = T::zero();
            let mut cnt = T::zero();
            for (xv, mv) in xs.iter().zip(ms) {
                if *mv > half {
                    sum += *xv;
                    cnt += T::one();
                }
            }
            counts[ni] = cnt;
            out.data[ni] = if cnt > T::zero() { sum / cnt } else { T::zero() };
        }
        let req = self.req(x);
        Ok(self.push(
            out,
            Op::MaskedMean {
                x: x.0,
                mask: mask.0,
                counts,
            },
            req,
        ))
    }

    /// Per-sample max of `x` over pixels where `mask` > 0.5; samples whose
    /// mask is empty yield exactly 0. Ties pick the first maximum in scan
    /// order. The mask is a constant: no gradient flows to it.
    pub fn masked_max_per_sample(&mut self, x: Var, mask: Var) -> Result<Var, TensorError> {
        let [n, _, h, w] = self.masked_dims(x, mask, "masked_max_per_sample")?;
        let plane = h * w;
        let half = T::cast(0.5);
        let mut out = Tensor::zeros(&[n]);
        let mut argmax = vec![None; n];
        for ni in 0..n {
            let base = ni * plane;
            let xs = &self.nodes[x.0].value.data[base..base + plane];
            let ms = &self.nodes[mask.0].value.data[base..base + plane];
            let mut best: Option<(T, usize)> = None;
            for (i, (xv, mv)) in xs.iter().zip(ms).enumerate() {
                if *mv > half && best.map_or(true, |(b, _)| *xv > b) {
                    best = Some((*xv, base + i));
                }
            }
            match best {
                Some((v, idx)) => {
                    out.data[ni] = v;
                    argmax[ni] = Some(idx);
                }
                None => out.data[ni] = T::zero(),
            }
        }
        let req = self.req(x);
        Ok(self.push(
            out,
            Op::MaskedMax { x: x.0, argmax },
            req,
        ))
    }

    /// Mean over every element, any shape → scalar.
    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let va = &self.nodes[a.0].value;
        if va.numel() == 0 {
            return Err(shape_err("mean_all", "empty tensor".into()));
        }
        let mut sum = T::zero();
        for v in &va.data {
            sum += *v;
        }
        let value = Tensor::scalar(sum / T::cast(va.numel() as f64));
        let req = self.req(a);
        Ok(self.push(value, Op::MeanAll { a: a.0 }, req))
    }

    // ---- backward ----

    /// Reverse-mode pass seeding d(loss)/d(loss) = 1 at `loss` (which must
    /// hold a single element). Gradients of earlier `backward` calls on the
    /// same graph are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(TensorError::NonScalarLoss { numel });
        }
        for g in &mut self.grads {
            *g = None;
        }
        let seed_shape = self.nodes[loss.0].value.shape.clone();
        self.grads[loss.0] = Some(Tensor::filled(&seed_shape, T::one()));

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let go = self.grads[i].take().expect("checked above");
            self.propagate(i, &go);
            self.grads[i] = Some(go);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, idx: usize) {
        if self.grads[idx].is_none() {
            let shape = self.nodes[idx].value.shape.clone();
            self.grads[idx] = Some(Tensor::zeros(&shape));
        }
    }

    fn propagate(&mut self, i: usize, go: &Tensor<T>) {
        // Decompose to appease the borrow checker: values are read-only,
        // grads are written.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Unary { kind, a } => {
                let (kind, a) = (*kind, *a);
                if !self.nodes[a].requires_grad {
                    return;
                }
                self.ensure_grad(a);
                let (nodes, grads) = (&self.nodes, &mut self.grads);
                let da = grads[a].as_mut().expect("just ensured");
                let xv = &nodes[a].value.data;
                let yv = &nodes[i].value.data;
                for j in 0..go.data.len() {
                    da.data[j] += go.data[j] * unary_backward(kind, xv[j], yv[j]);
                }
            }
            Op::Binary { kind, a, b } => {
                let (kind, a, b) = (*kind, *a, *b);
                if self.nodes[a].requires_grad {
                    self.ensure_grad(a);
                    let (nodes, grads) = (&self.nodes, &mut self.grads);
                    let da = grads[a].as_mut().expect("just ensured");
                    let bv = &nodes[b].value.data;
                    for j in 0..go.data.len() {
                        da.data[j] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => go.data[j],
                            BinaryKind::Mul => go.data[j] * bv[j],
                            BinaryKind::Div => go.data[j] / bv[j],
                        };
                    }
                }
                if self.nodes[b].requires_grad {
                    self.ensure_grad(b);
                    let (nodes, grads) = (&self.nodes, &mut self.grads);
                    let db = grads[b].as_mut().expect("just ensured");
                    let av = &nodes[a].value.data;
                    let bv = &nodes[b].value.data;
                    for j in 0..go.data.len() {
                        db.data[j] += match kind {
                            BinaryKind::Add => go.data[j],
                            BinaryKind::Sub => -go.data[j],
                            BinaryKind::Mul => go.data[j] * av[j],
                            BinaryKind::Div => -go.data[j] * av[j] / (bv[j] * bv[j]),
                        };
                    }
                }
            }
            Op::AddScalar { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    self.ensure_grad(a);
                    let da = self.grads[a].as_mut().expect("just ensured");
                    for j in 0..go.data.len() {
                        da.data[j] += go.data[j];
                    }
                }
            }
            Op::MulScalar { a, s } => {
                let (a, s) = (*a, *s);
                if self.nodes[a].requires_grad {
                    self.ensure_grad(a);
                    let da = self.grads[a].as_mut().expect("just ensured");
                    for j in 0..go.data.len() {
                        da.data[j] += go.data[j] * s;
                    }
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let (x, w, b, dims) = (*x, *w, *b, *dims);
                let want_dx = self.nodes[x].requires_grad;
                let want_dw = self.nodes[w].requires_grad;
                let want_db = b.is_some_and(|b| self.nodes[b].requires_grad);
                if want_dx {
                    self.ensure_grad(x);
                }
                if want_dw {
                    self.ensure_grad(w);
                }
                if let (true, Some(b)) = (want_db, b) {
                    self.ensure_grad(b);
                }
                // Split grads out by index so we can borrow several at once.
                let (xv, wv) = (&self.nodes[x].value.data, &self.nodes[w].value.data);
                let mut taken_dx = if want_dx { self.grads[x].take() } else { None };
                let mut taken_dw = if want_dw { self.grads[w].take() } else { None };
                let mut taken_db = match (want_db, b) {
                    (true, Some(b)) => self.grads[b].take(),
                    _ => None,
                };
                kernels::conv2d_backward(
                    xv,
                    wv,
                    &go.data,
                    &dims,
                    taken_dx.as_mut().map(|t| t.data.as_mut_slice()),
                    taken_dw.as_mut().map(|t| t.data.as_mut_slice()),
                    taken_db.as_mut().map(|t| t.data.as_mut_slice()),
                );
                if let Some(t) = taken_dx {
                    self.grads[x] = Some(t);
                }
                if let Some(t) = taken_dw {
                    self.grads[w] = Some(t);
                }
                if let (Some(t), Some(b)) = (taken_db, b) {
                    self.grads[b] = Some(t);
                }
            }
            Op::TConv2d { x, w, b, dims } => {
                let (x, w, b, dims) = (*x, *w, *b, *dims);
                let want_dx = self.nodes[x].requires_grad;
                let want_dw = self.nodes[w].requires_grad;
                let want_db = b.is_some_and(|b| self.nodes[b].requires_grad);
                if want_dx {
                    self.ensure_grad(x);
                }
                if want_dw {
                    self.ensure_grad(w);
                }
                if let (true, Some(b)) = (want_db, b) {
                    self.ensure_grad(b);
                }
                let (xv, wv) = (&self.nodes[x].value.data, &self.nodes[w].value.data);
                let mut taken_dx = if want_dx { self.grads[x].take() } else { None };
                let mut taken_dw = if want_dw { self.grads[w].take() } else { None };
                let mut taken_db = match (want_db, b) {
                    (true, Some(b)) => self.grads[b].take(),
                    _ => None,
                };
                kernels::tconv2d_backward(
                    xv,
                    wv,
                    &go.data,
                    &dims,
                    taken_dx.as_mut().map(|t| t.data.as_mut_slice()),
                    taken_dw.as_mut().map(|t| t.data.as_mut_slice()),
                    taken_db.as_mut().map(|t| t.data.as_mut_slice()),
                );
                if let Some(t) = taken_dx {
                    self.grads[x] = Some(t);
                }
                if let Some(t) = taken_dw {
                    self.grads[w] = Some(t);
                }
                if let (Some(t), Some(b)) = (taken_db, b) {
                    self.grads[b] = Some(t);
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    // Clone the index list to release the borrow on the op.
                    let argmax = argmax.clone();
                    self.ensure_grad(x);
                    let dx = self.grads[x].as_mut().expect("just ensured");
                    kernels::maxpool2d_backward(&go.data, &argmax, &mut dx.data);
                }
            }
            Op::ConcatChannels { inputs, widths } => {
                let inputs = inputs.clone();
                let widths = widths.clone();
                let shape = self.nodes[i].value.shape.clone();
                let (n, ctot) = (shape[0], shape[1]);
                let plane = shape[2] * shape[3];
                for (pos, (inp, cw)) in inputs.iter().zip(&widths).enumerate() {
                    if !self.nodes[*inp].requires_grad {
                        continue;
                    }
                    let cbase: usize = widths[..pos].iter().sum();
                    self.ensure_grad(*inp);
                    let di = self.grads[*inp].as_mut().expect("just ensured");
                    for ni in 0..n {
                        let src_off = (ni * ctot + cbase) * plane;
                        let dst_off = ni * cw * plane;
                        for j in 0..cw * plane {
                            di.data[dst_off + j] += go.data[src_off + j];
                        }
                    }
                }
            }
            Op::BroadcastScalarToMap { s } => {
                let s = *s;
                if self.nodes[s].requires_grad {
                    let shape = self.nodes[i].value.shape.clone();
                    let plane = shape[2] * shape[3];
                    self.ensure_grad(s);
                    let ds = self.grads[s].as_mut().expect("just ensured");
                    for (slot, chunk) in ds.data.iter_mut().zip(go.data.chunks(plane)) {
                        for g in chunk {
                            *slot += *g;
                        }
                    }
                }
            }
            Op::MaskedMean { x, mask, counts } => {
                let (x, mask) = (*x, *mask);
                if self.nodes[x].requires_grad {
                    let counts = counts.clone();
                    let plane = {
                        let s = &self.nodes[x].value.shape;
                        s[2] * s[3]
                    };
                    self.ensure_grad(x);
                    let half = T::cast(0.5);
                    let (nodes, grads) = (&self.nodes, &mut self.grads);
                    let dx = grads[x].as_mut().expect("just ensured");
                    let mv = &nodes[mask].value.data;
                    for (ni, cnt) in counts.iter().enumerate() {
                        if *cnt <= T::zero() {
                            continue;
                        }
                        let g = go.data[ni] / *cnt;
                        for j in ni * plane..(ni + 1) * plane {
                            if mv[j] > half {
                                dx.data[j] += g;
                            }
                        }
                    }
                }
            }
            Op::MaskedMax { x, argmax, .. } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let argmax = argmax.clone();
                    self.ensure_grad(x);
                    let dx = self.grads[x].as_mut().expect("just ensured");
                    for (ni, slot) in argmax.iter().enumerate() {
                        if let Some(idx) = slot {
                            dx.data[*idx] += go.data[ni];
                        }
                    }
                }
            }
            Op::MeanAll { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    self.ensure_grad(a);
                    let da = self.grads[a].as_mut().expect("just ensured");
                    let g = go.data[0] / T::cast(da.data.len() as f64);
                    for slot in &mut da.data {
                        *slot += g;
                    }
                }
            }
        }
    }
}

fn unary_forward<T: Real>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Log => x.ln(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Expm1 => x.exp_m1(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
        UnaryKind::Abs => x.abs(),
        UnaryKind::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        UnaryKind::Sigmoid => {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        }
        UnaryKind::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
    }
}

/// d(op)/dx given input x and forward value y.
fn unary_backward<T: Real>(kind: UnaryKind, x: T, y: T) -> T {
    let two = T::cast(2.0);
    match kind {
        UnaryKind::Neg => -T::one(),
        UnaryKind::Log => T::one() / x,
        UnaryKind::Exp => y,
        UnaryKind::Expm1 => y + T::one(),
        UnaryKind::Sqrt => {
            if y > T::zero() {
                T::one() / (two * y)
            } else {
                T::zero() // subgradient at 0: keeps masked-out samples inert
            }
        }
        UnaryKind::Square => two * x,
        UnaryKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Sigmoid => y * (T::one() - y),
        UnaryKind::Softplus => unary_forward(UnaryKind::Sigmoid, x),
    }
}

/// Worker count for convolution forwards, from `RAINSAR_WORKERS` (≥ 1,
/// default 1). This is the only environment variable the engine reads.
pub fn worker_count() -> usize {
    static WORKERS: std::sync::OnceLock<usize> = std::sync::OnceLock::new();
    *WORKERS.get_or_init(|| {
        std::env::var("RAINSAR_WORKERS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|w| *w >= 1)
            .unwrap_or(1)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(&shape, (0..n).map(f).collect())
    }

    #[test]
    fn relu_backward_gates_upstream_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![-1.0, 2.0]), true);
        let y = g.relu(x);
        let loss = g.mean_all(y).unwrap();
        g.backward(loss).unwrap();
        // d(mean)/dx_i = relu'(x_i) / 2.
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn division_backward_hand_case() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::from_vec(&[1], vec![6.0]), true);
        let b = g.leaf(Tensor::from_vec(&[1], vec![3.0]), true);
        let y = g.div(a, b).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0 / 3.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[-6.0 / 9.0]);
    }

    #[test]
    fn sqrt_and_abs_subgradients_at_zero_are_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![0.0, 4.0]), true);
        let y = g.sqrt(x);
        let loss = g.mean_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data()[0], 0.0);
        assert_eq!(g.grad(x).unwrap().data()[1], 0.5 / (2.0 * 2.0));

        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![-2.0, 0.0, 2.0]), true);
        let y = g.abs(x);
        let loss = g.mean_all(y).unwrap();
        g.backward(loss).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(g.grad(x).unwrap().data(), &[-third, 0.0, third]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![-800.0, 0.0, 800.0]), false);
        let y = g.softplus(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(v[2], 800.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[3, 2]), false);
        assert!(matches!(
            g.add(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_requires_scalar_seed() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(
            g.backward(a),
            Err(TensorError::NonScalarLoss { numel: 2 })
        ));
    }

    #[test]
    fn conv_identity_kernel_in_graph() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t4([1, 1, 3, 4], |i| i as f64 - 5.0), true);
        let w = g.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]), false);
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let loss = g.mean_all(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|v| *v == 1.0 / 12.0));
    }

    #[test]
    fn conv_translation_equivariance_interior() {
        // Shift the input one pixel right; the valid-region output shifts
        // identically (zero padding, interior crop).
        let mut g: Graph<f64> = Graph::new();
        let h = 6;
        let w = 7;
        let base = t4([1, 1, h, w], |i| ((i * 37) % 11) as f64 - 5.0);
        let mut shifted = Tensor::zeros(&[1, 1, h, w]);
        for r in 0..h {
            for c in 1..w {
                shifted.data_mut()[r * w + c] = base.data()[r * w + c - 1];
            }
        }
        let x0 = g.leaf(base, false);
        let x1 = g.leaf(shifted, false);
        let wt = g.leaf(t4([1, 1, 3, 3], |i| i as f64 * 0.1 - 0.4), false);
        let y0 = g.conv2d(x0, wt, None, 1, 1).unwrap();
        let y1 = g.conv2d(x1, wt, None, 1, 1).unwrap();
        let v0 = g.value(y0).data();
        let v1 = g.value(y1).data();
        // Interior: rows 1..h-1, cols 2..w-1 of the shifted output equal
        // cols 1..w-2 of the original.
        for r in 1..h - 1 {
            for c in 2..w - 1 {
                assert_eq!(v1[r * w + c], v0[r * w + c - 1], "row {r} col {c}");
            }
        }
    }

    #[test]
    fn concat_and_broadcast_roundtrip_gradients() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(t4([2, 1, 2, 2], |i| i as f64), true);
        let s = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let m = g.broadcast_scalar_to_map(s, 2, 2).unwrap();
        assert_eq!(g.value(m).shape(), &[2, 2, 2, 2]);
        let cat = g.concat_channels(&[a, m]).unwrap();
        assert_eq!(g.value(cat).shape(), &[2, 3, 2, 2]);
        let loss = g.mean_all(cat).unwrap();
        g.backward(loss).unwrap();
        let n = 24.0;
        assert!(g.grad(a).unwrap().data().iter().all(|v| *v == 1.0 / n));
        // Each scalar fans out to 4 pixels.
        assert!(g.grad(s).unwrap().data().iter().all(|v| *v == 4.0 / n));
    }

    #[test]
    fn masked_mean_ignores_masked_pixels_and_empty_masks() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(
            Tensor::from_vec(&[2, 1, 1, 3], vec![1.0, 2.0, 30.0, 5.0, 6.0, 7.0]),
            true,
        );
        let m = g.leaf(
            Tensor::from_vec(&[2, 1, 1, 3], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
            false,
        );
        let y = g.masked_mean_per_sample(x, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 0.0]);
        let loss = g.mean_all(y).unwrap();
        g.backward(loss).unwrap();
        // Sample 0: 1/(2 px · 2 samples); masked-out and empty-mask pixels
        // get exactly zero.
        assert_eq!(g.grad(x).unwrap().data(), &[0.25, 0.25, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_max_routes_gradient_to_argmax_only() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(
            Tensor::from_vec(&[1, 1, 2, 2], vec![9.0, 3.0, 4.0, 8.0]),
            true,
        );
        // The 9 is masked out; the max over the mask is 8.
        let m = g.leaf(
            Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 1.0, 1.0]),
            false,
        );
        let y = g.masked_max_per_sample(x, m).unwrap();
        assert_eq!(g.value(y).data(), &[8.0]);
        let loss = g.mean_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn graph_worker_override_is_bit_identical() {
        let x = t4([2, 3, 8, 8], |i| ((i * 29) % 17) as f64 * 0.3 - 2.0);
        let w = t4([4, 3, 3, 3], |i| ((i * 13) % 7) as f64 * 0.2 - 0.6);
        let run = |workers| {
            let mut g: Graph<f64> = Graph::new();
            g.set_workers(workers);
            let xv = g.leaf(x.clone(), false);
            let wv = g.leaf(w.clone(), false);
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn gradients_accumulate_across_shared_subexpressions() {
        // y = x·x + x → dy/dx = 2x + 1, exercising grad accumulation when a
        // node is consumed twice.
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1], vec![3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let loss = g.mean_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
    }
}
