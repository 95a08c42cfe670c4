//! Reverse-mode automatic differentiation over 4-D tensors.
//!
//! Operations record onto a linear tape; `backward` replays the records in
//! reverse, visiting every node exactly once and accumulating gradients
//! additively into each value's grad slot. Values are immutable once pushed.
//!
//! Every op validates its output for NaN/infinity and fails instead of
//! propagating, so training bugs surface at the op that caused them.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{check_finite_slice, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Val(pub(crate) usize);

/// A differentiable operation opaque to the tape: the implementor supplies
/// both the forward map and the vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    /// Accumulate `d loss / d x` into `dx` given the upstream gradient `dy`.
    fn backward(&self, x: &Tensor, y: &Tensor, dy: &[f64], dx: &mut [f64]) -> Result<()>;
}

enum Op {
    Leaf,
    Conv2d { x: Val, w: Val, bias: Option<Val>, stride: usize, pad: usize },
    Relu { x: Val },
    Sigmoid { x: Val },
    Tanh { x: Val },
    Add { a: Val, b: Val },
    Mul { a: Val, b: Val },
    Affine { x: Val, mul: f64 },
    SpatialSoftmax { x: Val },
    MaxPool2 { x: Val, argmax: Vec<usize> },
    ConcatChannels { xs: Vec<Val> },
    RepeatBatch { x: Val },
    GaussianMap { params: Val },
    Sum { x: Val },
    Custom { x: Val, op: Box<dyn CustomOp> },
}

/// Ordered record of operations plus their forward values and gradients.
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn grad(&self, v: Val) -> Option<&[f64]> {
        self.vals[v.0].grad()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Val {
        self.ops.push(op);
        self.vals.push(value);
        Val(self.vals.len() - 1)
    }

    /// Record an input value. The caller guarantees the data is finite; any
    /// pre-existing gradient on the tensor is cleared.
    pub fn leaf(&mut self, mut value: Tensor) -> Val {
        value.zero_grad();
        self.push(Op::Leaf, value)
    }

    /// 2-D convolution. `w` is (out_channels, in_channels, kh, kw) with odd
    /// kh/kw; `bias`, when given, is (1, out_channels, 1, 1) and is added per
    /// output channel.
    pub fn conv2d(
        &mut self,
        x: Val,
        w: Val,
        bias: Option<Val>,
        stride: usize,
        pad: usize,
    ) -> Result<Val> {
        let xs = self.vals[x.0].shape();
        let ws = self.vals[w.0].shape();
        let (oc, ic, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
        if xs.c != ic {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {ic}",
                xs.c
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Input("conv2d stride must be >= 1".into()));
        }
        if let Some(b) = bias {
            let bs = self.vals[b.0].shape();
            if bs != Shape::new(1, oc, 1, 1)? {
                return Err(Error::Shape(format!(
                    "conv2d bias must be (1,{oc},1,1), got {bs}"
                )));
            }
        }
        let oh = kernels::conv_out_extent(xs.h, kh, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {kh} exceeds padded height")))?;
        let ow = kernels::conv_out_extent(xs.w, kw, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {kw} exceeds padded width")))?;
        let os = Shape::new(xs.n, oc, oh, ow)?;
        let mut out = Tensor::zeros(os);
        kernels::conv2d_forward(
            self.vals[x.0].data(),
            xs,
            self.vals[w.0].data(),
            oc,
            ic,
            kh,
            kw,
            bias.map(|b| self.vals[b.0].data()),
            stride,
            pad,
            out.data_mut(),
            os,
        );
        out.check_finite("conv2d")?;
        Ok(self.push(Op::Conv2d { x, w, bias, stride, pad }, out))
    }

    pub fn relu(&mut self, x: Val) -> Result<Val> {
        let xt = &self.vals[x.0];
        let data = xt.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(xt.shape(), data)?;
        Ok(self.push(Op::Relu { x }, out))
    }

    /// Elementwise logistic function; output lies in (0, 1).
    pub fn sigmoid(&mut self, x: Val) -> Result<Val> {
        let xt = &self.vals[x.0];
        let data = xt.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let out = Tensor::new(xt.shape(), data)?;
        Ok(self.push(Op::Sigmoid { x }, out))
    }

    /// Elementwise hyperbolic tangent; output lies in (-1, 1).
    pub fn tanh(&mut self, x: Val) -> Result<Val> {
        let xt = &self.vals[x.0];
        let data = xt.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(xt.shape(), data)?;
        Ok(self.push(Op::Tanh { x }, out))
    }

    /// Elementwise sum. `b` may broadcast: each of its dimensions must equal
    /// the matching dimension of `a` or be 1 (single-channel maps, per-channel
    /// biases).
    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary(a, b, false)
    }

    /// Hadamard (elementwise) product with the same broadcast rule as `add`.
    pub fn hadamard(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary(a, b, true)
    }

    fn binary(&mut self, a: Val, b: Val, mul: bool) -> Result<Val> {
        let ashape = self.vals[a.0].shape();
        let bshape = self.vals[b.0].shape();
        if !kernels::broadcastable(ashape, bshape) {
            return Err(Error::Shape(format!(
                "incompatible shapes {ashape} and {bshape} for elementwise op"
            )));
        }
        let mut out = Tensor::zeros(ashape);
        kernels::ew_broadcast(
            self.vals[a.0].data(),
            ashape,
            self.vals[b.0].data(),
            bshape,
            mul,
            out.data_mut(),
        );
        out.check_finite(if mul { "hadamard" } else { "add" })?;
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        Ok(self.push(op, out))
    }

    /// out = mul * x + add, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: Val, mul: f64, add: f64) -> Result<Val> {
        let xt = &self.vals[x.0];
        let data = xt.data().iter().map(|v| mul * v + add).collect();
        let out = Tensor::new(xt.shape(), data)?;
        out.check_finite("affine")?;
        Ok(self.push(Op::Affine { x, mul }, out))
    }

    /// Softmax over all h*w positions of a single-channel map, per batch item.
    pub fn spatial_softmax(&mut self, x: Val) -> Result<Val> {
        let xs = self.vals[x.0].shape();
        if xs.c != 1 {
            return Err(Error::Shape(format!(
                "spatial_softmax expects a single channel, got {}",
                xs.c
            )));
        }
        let mut out = Tensor::zeros(xs);
        kernels::spatial_softmax_forward(
            self.vals[x.0].data(),
            xs.n,
            xs.spatial(),
            out.data_mut(),
        );
        Ok(self.push(Op::SpatialSoftmax { x }, out))
    }

    /// 2x2 max pooling with stride 2; spatial extents must be even.
    pub fn maxpool2(&mut self, x: Val) -> Result<Val> {
        let xs = self.vals[x.0].shape();
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2 requires even spatial extents, got {}x{}",
                xs.h, xs.w
            )));
        }
        let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2)?;
        let mut out = Tensor::zeros(os);
        let mut argmax = vec![0usize; os.count()];
        kernels::maxpool2_forward(self.vals[x.0].data(), xs, out.data_mut(), &mut argmax);
        Ok(self.push(Op::MaxPool2 { x, argmax }, out))
    }

    /// Concatenate along the channel axis; batch and spatial extents must agree.
    pub fn concat_channels(&mut self, xs: &[Val]) -> Result<Val> {
        let first = self.vals[xs.first().ok_or_else(|| {
            Error::Input("concat_channels needs at least one input".into())
        })?
        .0]
            .shape();
        let mut total_c = 0;
        for v in xs {
            let s = self.vals[v.0].shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::Shape(format!(
                    "concat_channels mismatch: {s} vs {first}"
                )));
            }
            total_c += s.c;
        }
        let os = Shape::new(first.n, total_c, first.h, first.w)?;
        let mut out = vec![0.0; os.count()];
        let plane = first.h * first.w;
        for n in 0..first.n {
            let mut c_off = 0;
            for v in xs {
                let s = self.vals[v.0].shape();
                let src = self.vals[v.0].data();
                let from = s.offset(n, 0, 0, 0);
                let to = os.offset(n, c_off, 0, 0);
                out[to..to + s.c * plane].copy_from_slice(&src[from..from + s.c * plane]);
                c_off += s.c;
            }
        }
        let out = Tensor::new(os, out)?;
        Ok(self.push(Op::ConcatChannels { xs: xs.to_vec() }, out))
    }

    /// Tile a batch-1 tensor to `n` batch items.
    pub fn repeat_batch(&mut self, x: Val, n: usize) -> Result<Val> {
        let xs = self.vals[x.0].shape();
        if xs.n != 1 {
            return Err(Error::Shape(format!("repeat_batch expects batch 1, got {}", xs.n)));
        }
        let os = Shape::new(n, xs.c, xs.h, xs.w)?;
        let src = self.vals[x.0].data();
        let mut out = Vec::with_capacity(os.count());
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let out = Tensor::new(os, out)?;
        Ok(self.push(Op::RepeatBatch { x }, out))
    }

    /// Render a peak-normalized 2-D Gaussian from a (1,4,1,1) parameter value
    /// holding [mu_x, mu_y, sigma_x, sigma_y]; output is (1,1,h,w) and is
    /// differentiable w.r.t. all four parameters.
    pub fn gaussian_map(&mut self, params: Val, h: usize, w: usize, sigma_min: f64) -> Result<Val> {
        let ps = self.vals[params.0].shape();
        if ps != Shape::new(1, 4, 1, 1)? {
            return Err(Error::Shape(format!(
                "gaussian_map parameters must be (1,4,1,1), got {ps}"
            )));
        }
        let p = self.vals[params.0].data();
        let (mx, my, sx, sy) = (p[0], p[1], p[2], p[3]);
        if sx < sigma_min || sy < sigma_min {
            return Err(Error::Param(format!(
                "gaussian sigma ({sx}, {sy}) below minimum {sigma_min}"
            )));
        }
        let os = Shape::new(1, 1, h, w)?;
        let mut out = Tensor::zeros(os);
        kernels::gaussian_map_forward(mx, my, sx, sy, h, w, out.data_mut());
        Ok(self.push(Op::GaussianMap { params }, out))
    }

    /// Sum of all elements, as a (1,1,1,1) scalar.
    pub fn sum(&mut self, x: Val) -> Result<Val> {
        let total: f64 = self.vals[x.0].data().iter().sum();
        let out = Tensor::scalar(total);
        out.check_finite("sum")?;
        Ok(self.push(Op::Sum { x }, out))
    }

    /// Record a custom differentiable operation.
    pub fn custom(&mut self, x: Val, op: Box<dyn CustomOp>) -> Result<Val> {
        let out = op.forward(&self.vals[x.0])?;
        out.check_finite(op.name())?;
        Ok(self.push(Op::Custom { x, op }, out))
    }

    /// Reverse pass from a scalar output, seeding its gradient with 1.
    /// Gradients accumulate additively into every reachable value's grad slot;
    /// calling backward again adds another pass on top.
    pub fn backward(&mut self, out: Val) -> Result<()> {
        if !self.vals[out.0].is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar output or an explicit seed, got {}",
                self.vals[out.0].shape()
            )));
        }
        self.backward_seeded(out, vec![1.0])
    }

    /// Reverse pass with an explicit seed gradient for `out`.
    pub fn backward_seeded(&mut self, out: Val, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.vals[out.0].data().len() {
            return Err(Error::Shape(format!(
                "seed length {} does not match output element count {}",
                seed.len(),
                self.vals[out.0].data().len()
            )));
        }
        // Per-pass buffers keep repeated backward calls independent; results
        // are added into the persistent grad slots at the end of each node.
        let mut g: Vec<Option<Vec<f64>>> = (0..self.vals.len()).map(|_| None).collect();
        g[out.0] = Some(seed);
        for i in (0..self.ops.len()).rev() {
            let dy = match g[i].take() {
                Some(d) => d,
                None => continue,
            };
            self.backprop_node(i, &dy, &mut g)?;
            self.vals[i].accumulate_grad(&dy);
        }
        for (i, v) in self.vals.iter().enumerate() {
            if let Some(grad) = v.grad() {
                check_finite_slice(grad, &format!("backward gradient of node {i}"))?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, dy: &[f64], g: &mut [Option<Vec<f64>>]) -> Result<()> {
        fn buf<'a>(
            g: &'a mut [Option<Vec<f64>>],
            vals: &[Tensor],
            id: usize,
        ) -> &'a mut Vec<f64> {
            g[id].get_or_insert_with(|| vec![0.0; vals[id].data().len()])
        }
        let vals = &self.vals;
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv2d { x, w, bias, stride, pad } => {
                let ws = vals[w.0].shape();
                let (oc, ic, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
                let xs = vals[x.0].shape();
                let os = vals[i].shape();
                let mut dx = vec![0.0; vals[x.0].data().len()];
                let mut dw = vec![0.0; vals[w.0].data().len()];
                let mut db_own: Option<Vec<f64>> = bias.map(|_| vec![0.0; oc]);
                kernels::conv2d_backward(
                    vals[x.0].data(),
                    xs,
                    vals[w.0].data(),
                    oc,
                    ic,
                    kh,
                    kw,
                    dy,
                    os,
                    *stride,
                    *pad,
                    Some(dx.as_mut_slice()),
                    dw.as_mut_slice(),
                    db_own.as_deref_mut(),
                );
                let acc = buf(g, vals, x.0);
                for (a, d) in acc.iter_mut().zip(&dx) {
                    *a += d;
                }
                let acc = buf(g, vals, w.0);
                for (a, d) in acc.iter_mut().zip(&dw) {
                    *a += d;
                }
                if let (Some(b), Some(db)) = (bias, db_own) {
                    let acc = buf(g, vals, b.0);
                    for (a, d) in acc.iter_mut().zip(&db) {
                        *a += d;
                    }
                }
            }
            Op::Relu { x } => {
                let xd = vals[x.0].data();
                let acc = buf(g, vals, x.0);
                for ((a, d), xv) in acc.iter_mut().zip(dy).zip(xd) {
                    if *xv > 0.0 {
                        *a += d;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let yd = vals[i].data();
                let acc = buf(g, vals, x.0);
                for ((a, d), y) in acc.iter_mut().zip(dy).zip(yd) {
                    *a += d * y * (1.0 - y);
                }
            }
            Op::Tanh { x } => {
                let yd = vals[i].data();
                let acc = buf(g, vals, x.0);
                for ((a, d), y) in acc.iter_mut().zip(dy).zip(yd) {
                    *a += d * (1.0 - y * y);
                }
            }
            Op::Add { a, b } => {
                let full = vals[a.0].shape();
                let bshape = vals[b.0].shape();
                {
                    let acc = buf(g, vals, a.0);
                    for (av, d) in acc.iter_mut().zip(dy) {
                        *av += d;
                    }
                }
                let acc = buf(g, vals, b.0);
                kernels::reduce_broadcast(dy, full, None, bshape, acc);
            }
            Op::Mul { a, b } => {
                let full = vals[a.0].shape();
                let bshape = vals[b.0].shape();
                {
                    let bd = vals[b.0].data();
                    let acc = buf(g, vals, a.0);
                    kernels::mul_broadcast_acc(dy, full, bd, bshape, acc);
                }
                let ad = vals[a.0].data();
                let acc = buf(g, vals, b.0);
                kernels::reduce_broadcast(dy, full, Some(ad), bshape, acc);
            }
            Op::Affine { x, mul } => {
                let acc = buf(g, vals, x.0);
                for (a, d) in acc.iter_mut().zip(dy) {
                    *a += mul * d;
                }
            }
            Op::SpatialSoftmax { x } => {
                let xs = vals[x.0].shape();
                let yd = vals[i].data();
                let acc = buf(g, vals, x.0);
                kernels::spatial_softmax_backward(yd, dy, xs.n, xs.spatial(), acc);
            }
            Op::MaxPool2 { x, argmax } => {
                let acc = buf(g, vals, x.0);
                for (oi, &src) in argmax.iter().enumerate() {
                    acc[src] += dy[oi];
                }
            }
            Op::ConcatChannels { xs } => {
                let os = vals[i].shape();
                let plane = os.h * os.w;
                for v in xs {
                    // Buffers allocated one input at a time keeps borrows simple.
                    buf(g, vals, v.0);
                }
                for n in 0..os.n {
                    let mut c_off = 0;
                    for v in xs {
                        let s = vals[v.0].shape();
                        let from = os.offset(n, c_off, 0, 0);
                        let to = s.offset(n, 0, 0, 0);
                        let acc = g[v.0].as_mut().unwrap();
                        for (a, d) in acc[to..to + s.c * plane]
                            .iter_mut()
                            .zip(&dy[from..from + s.c * plane])
                        {
                            *a += d;
                        }
                        c_off += s.c;
                    }
                }
            }
            Op::RepeatBatch { x } => {
                let per = vals[x.0].data().len();
                let acc = buf(g, vals, x.0);
                for chunk in dy.chunks_exact(per) {
                    for (a, d) in acc.iter_mut().zip(chunk) {
                        *a += d;
                    }
                }
            }
            Op::GaussianMap { params } => {
                let p = vals[params.0].data();
                let os = vals[i].shape();
                let yd = vals[i].data();
                let acc = buf(g, vals, params.0);
                kernels::gaussian_map_backward(
                    p[0], p[1], p[2], p[3], os.h, os.w, yd, dy, acc,
                );
            }
            Op::Sum { x } => {
                let acc = buf(g, vals, x.0);
                for a in acc.iter_mut() {
                    *a += dy[0];
                }
            }
            Op::Custom { x, op } => {
                let acc = buf(g, vals, x.0);
                op.backward(&vals[x.0], &vals[i], dy, acc)?;
            }
        }
        Ok(())
    }
}
