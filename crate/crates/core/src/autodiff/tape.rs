//! Tape-recorded reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value. Nodes whose
//! inputs require gradients also keep whatever the backward rule needs.
//! `backward` walks the nodes in exact reverse order of execution.

use super::kernels::{col2im, gemm, im2col, ConvGeom, View};
use super::spike::SpikeFn;
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the spike primitive evaluates its forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpikeMode {
    /// Integer spike counts.
    #[default]
    Quantized,
    /// The continuous relaxation whose derivative equals the surrogate.
    Relaxed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Tanh,
    Relu,
    Sqrt,
    Abs,
    Square,
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug)]
struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    b_shared: bool,
}

impl MatMulPlan {
    fn a_view(&self, i: usize) -> View {
        let off = i * self.m * self.k;
        if self.ta {
            View::row_major(off, self.k, self.m).t()
        } else {
            View::row_major(off, self.m, self.k)
        }
    }

    fn b_view(&self, i: usize) -> View {
        let off = if self.b_shared { 0 } else { i * self.k * self.n };
        if self.tb {
            View::row_major(off, self.n, self.k).t()
        } else {
            View::row_major(off, self.k, self.n)
        }
    }

    fn c_view(&self, i: usize) -> View {
        View::row_major(i * self.m * self.n, self.m, self.n)
    }

    /// A shared, untransposed rhs lets the batch fold into the row count.
    fn folded(&self) -> Option<MatMulPlan> {
        (self.b_shared && !self.ta && self.batch > 1)
            .then(|| MatMulPlan { batch: 1, m: self.batch * self.m, ..*self })
    }
}

/// `[outer, channels, inner]` view used by batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BnLayout {
    outer: usize,
    channels: usize,
    inner: usize,
}

/// Normalization statistics for [`Tape::batchnorm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalize with externally tracked running statistics.
    Eval { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

enum Op {
    Leaf,
    Unary { x: Var, kind: Unary },
    Binary { a: Var, b: Var, kind: Binary },
    Sum { x: Var },
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, outer: usize, blocks: Vec<usize> },
    Narrow { x: Var, outer: usize, src_block: usize, start: usize, block: usize },
    IndexSelect { x: Var, outer: usize, len: usize, inner: usize, indices: Vec<usize> },
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, batch: usize, c_out: usize, cols: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, layout: BnLayout, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Spike { x: Var, f: SpikeFn },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed primitives.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    spike_mode: SpikeMode,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), spike_mode: SpikeMode::Quantized, backward_done: false }
    }

    pub fn with_spike_mode(mode: SpikeMode) -> Self {
        Self { spike_mode: mode, ..Self::new() }
    }

    pub fn spike_mode(&self) -> SpikeMode {
        self.spike_mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Appends a computed node, dropping the backward record when no input
    /// requires a gradient.
    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op, name: &'static str) -> Var {
        if cfg!(debug_assertions) && inputs.iter().all(|&v| self.nodes[v.0].value.is_finite()) {
            assert!(value.is_finite(), "{name}: non-finite output from finite inputs");
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(value, requires_grad, op)
    }

    // ---- elementwise -------------------------------------------------------

    fn unary(&mut self, x: Var, kind: Unary, name: &'static str) -> Var {
        let out = self.value(x).map(|v| unary_forward(kind, v));
        self.push(out, &[x], Op::Unary { x, kind }, name)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg, "neg")
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c), "scale")
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::AddScalar(c), "add_scalar")
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp, "exp")
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log, "log")
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus, "softplus")
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid, "sigmoid")
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh, "tanh")
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu, "relu")
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt, "sqrt")
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs, "abs")
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square, "square")
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi), "clamp")
    }
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, f64::INFINITY), "clamp_min")
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let plan = Broadcast::new(sa, sb).ok_or_else(|| {
            Error::shape(name, format!("cannot broadcast {:?} with {:?}", sa, sb))
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = plan.out_shape.iter().product();
        let mut out = Vec::with_capacity(n);
        match &plan.offsets {
            None => out.extend(va.iter().zip(vb).map(|(&x, &y)| binary_forward(kind, x, y))),
            Some((ia, ib)) => {
                out.extend(ia.iter().zip(ib).map(|(&i, &j)| binary_forward(kind, va[i], vb[j])))
            }
        }
        let value = Tensor::from_parts(plan.out_shape, out);
        Ok(self.push(value, &[a, b], Op::Binary { a, b, kind }, name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Min, "minimum")
    }
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Max, "maximum")
    }

    // ---- reductions and shape ---------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(value, &[x], Op::SumAxis { x, outer, len, inner }, "sum_axis"))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .value(x)
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len.max(1) as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshape(shape.to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {:?}", self.value(x).shape(), shape)))?;
        Ok(self.push(value, &[x], Op::Reshape { x }, "reshape"))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("bad permutation {perm:?} for {shape:?}")));
        }
        let value = permute_tensor(self.value(x), perm);
        Ok(self.push(value, &[x], Op::Permute { x, perm: perm.to_vec() }, "permute"))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut blocks = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{:?} vs {:?} along axis {axis}", base, s)));
            }
            blocks.push(s[axis] * inner);
            total += s[axis];
        }
        let width: usize = blocks.iter().sum();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            for (&v, &blk) in xs.iter().zip(&blocks) {
                out.extend_from_slice(&self.value(v).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, xs, Op::Concat { xs: xs.to_vec(), outer, blocks }, "concat"))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_block = shape[axis] * inner;
        let block = len * inner;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * block);
        for o in 0..outer {
            let s = o * src_block + start * inner;
            out.extend_from_slice(&data[s..s + block]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, out);
        let op = Op::Narrow { x, outer, src_block, start: start * inner, block };
        Ok(self.push(value, &[x], op, "narrow"))
    }

    /// Gathers entries along `axis`; indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::shape("index_select", format!("indices out of range for axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * len + i) * inner;
                out.extend_from_slice(&data[s..s + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let value = Tensor::from_parts(out_shape, out);
        let op = Op::IndexSelect { x, outer, len, inner, indices: indices.to_vec() };
        Ok(self.push(value, &[x], op, "index_select"))
    }

    // ---- contractions ------------------------------------------------------

    /// `op(a) · op(b)` over the last two axes, where `op` optionally
    /// transposes. `b` is either rank 2 (shared across the batch) or has the
    /// same leading axes as `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let err = || Error::shape("matmul", format!("{sa:?}{} x {sb:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" }));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let b_shared = sb.len() == 2;
        if !b_shared && &sb[..sb.len() - 2] != lead {
            return Err(err());
        }
        let batch: usize = lead.iter().product();
        let plan = MatMulPlan { batch, m, k, n, ta, tb, b_shared };
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let p = plan.folded().unwrap_or(plan);
            for i in 0..p.batch {
                gemm(1.0, va, p.a_view(i), vb, p.b_view(i), 0.0, &mut out, p.c_view(i));
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, &[a, b], Op::MatMul { a, b, plan }, "matmul"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D convolution. `x`: `[B, C_in, H, W]`, `w`: `[C_out, C_in, k, k]`,
    /// optional `bias`: `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let err = |d: &str| Error::shape("conv2d", format!("input {sx:?}, weight {sw:?}: {d}"));
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sw[1] != sx[1] {
            return Err(err("expected NCHW input and [C_out, C_in, k, k] weight"));
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(err("kernel larger than padded input"));
        }
        let c_out = sw[0];
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(err("bias must be [C_out]"));
            }
        }
        let geom = ConvGeom { c_in: sx[1], h: sx[2], w: sx[3], k: sw[2], stride, pad };
        let batch = sx[0];
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let keep_cols = self.requires_grad(w);
        let mut cols = vec![0.0; if keep_cols { batch * rows * p } else { rows * p }];
        let mut out = vec![0.0; batch * c_out * p];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let img = geom.c_in * geom.h * geom.w;
            for b in 0..batch {
                let coff = if keep_cols { b * rows * p } else { 0 };
                im2col(&xd[b * img..(b + 1) * img], &geom, &mut cols[coff..coff + rows * p]);
                gemm(
                    1.0,
                    wd,
                    View::row_major(0, c_out, rows),
                    &cols,
                    View::row_major(coff, rows, p),
                    0.0,
                    &mut out,
                    View::row_major(b * c_out * p, c_out, p),
                );
            }
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for b in 0..batch {
                    for (c, &bc) in bd.iter().enumerate() {
                        let s = (b * c_out + c) * p;
                        out[s..s + p].iter_mut().for_each(|v| *v += bc);
                    }
                }
            }
        }
        if !keep_cols {
            cols = Vec::new();
        }
        let value = Tensor::from_parts(vec![batch, c_out, geom.out_h(), geom.out_w()], out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(value, &inputs, Op::Conv2d { x, w, bias, geom, batch, c_out, cols }, "conv2d"))
    }

    // ---- normalization and spiking ----------------------------------------

    /// Batch normalization with per-channel affine `gamma`, `beta` along
    /// `channel_axis`. Train mode also reports the batch statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channel_axis: usize,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BnStats>)> {
        let shape = self.value(x).shape().to_vec();
        if channel_axis >= shape.len() {
            return Err(Error::shape("batchnorm", format!("channel axis {channel_axis} for {shape:?}")));
        }
        let layout = BnLayout {
            outer: shape[..channel_axis].iter().product(),
            channels: shape[channel_axis],
            inner: shape[channel_axis + 1..].iter().product(),
        };
        let c = layout.channels;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("batchnorm", format!("affine params must be [{c}] for input {shape:?}")));
        }
        let count = layout.outer * layout.inner;
        let xd = self.value(x).data();
        let for_channel = |ch: usize, f: &mut dyn FnMut(usize)| {
            for o in 0..layout.outer {
                let s = (o * c + ch) * layout.inner;
                (s..s + layout.inner).for_each(&mut *f);
            }
        };
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                if count < 2 {
                    return Err(Error::shape("batchnorm", "train mode needs at least 2 values per channel"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for_channel(ch, &mut |i| s += xd[i]);
                    let mu = s / count as f64;
                    let mut v = 0.0;
                    for_channel(ch, &mut |i| v += (xd[i] - mu) * (xd[i] - mu));
                    mean[ch] = mu;
                    var[ch] = v / count as f64;
                }
                (mean, var, eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm", "running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            for_channel(ch, &mut |i| {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g[ch] * h + bt[ch];
            });
        }
        let value = Tensor::from_parts(shape, out);
        let stats = train.then(|| BnStats { mean, var, count });
        let op = Op::BatchNorm { x, gamma, beta, layout, xhat, inv_std, train };
        Ok((self.push(value, &[x, gamma, beta], op, "batchnorm"), stats))
    }

    /// Multi-spike activation; backward uses the surrogate derivative.
    pub fn spike(&mut self, x: Var, f: SpikeFn) -> Var {
        let out = match self.spike_mode {
            SpikeMode::Quantized => self.value(x).map(|m| f.count(m)),
            SpikeMode::Relaxed => self.value(x).map(|m| f.relaxed(m)),
        };
        self.push(out, &[x], Op::Spike { x, f }, "spike")
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a scalar `loss` to every reachable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran on this tape; call zero_grad first".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty tape".into()));
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", loss_shape)));
        }
        self.backward_done = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(loss_shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            backward_node(&self.nodes, i, g.data(), &mut self.grads);
        }
        Ok(())
    }
}

// ---- scalar rules --------------------------------------------------------

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Neg => -x,
        Unary::Scale(c) => c * x,
        Unary::AddScalar(c) => x + c,
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Softplus => softplus(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Relu => x.max(0.0),
        Unary::Sqrt => x.sqrt(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Clamp(lo, hi) => x.max(lo).min(hi),
    }
}

fn unary_grad(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Scale(c) => c,
        Unary::AddScalar(_) => 1.0,
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Softplus => sigmoid(x),
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Relu => (x > 0.0) as u8 as f64,
        Unary::Sqrt => 0.5 / y,
        Unary::Abs => x.signum() * (x != 0.0) as u8 as f64,
        Unary::Square => 2.0 * x,
        Unary::Clamp(lo, hi) => (x > lo && x < hi) as u8 as f64,
    }
}

fn binary_forward(kind: Binary, a: f64, b: f64) -> f64 {
    match kind {
        Binary::Add => a + b,
        Binary::Sub => a - b,
        Binary::Mul => a * b,
        Binary::Div => a / b,
        Binary::Min => a.min(b),
        Binary::Max => a.max(b),
    }
}

/// Partial derivatives `(∂/∂a, ∂/∂b)`.
fn binary_grad(kind: Binary, a: f64, b: f64) -> (f64, f64) {
    match kind {
        Binary::Add => (1.0, 1.0),
        Binary::Sub => (1.0, -1.0),
        Binary::Mul => (b, a),
        Binary::Div => (1.0 / b, -a / (b * b)),
        Binary::Min => {
            if a <= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
        Binary::Max => {
            if a >= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
struct Broadcast {
    out_shape: Vec<usize>,
    /// Per-output-element source offsets, absent when the shapes are equal.
    offsets: Option<(Vec<usize>, Vec<usize>)>,
}

impl Broadcast {
    fn new(sa: &[usize], sb: &[usize]) -> Option<Self> {
        if sa == sb {
            return Some(Self { out_shape: sa.to_vec(), offsets: None });
        }
        let r = sa.len().max(sb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; r - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(sa), pad(sb));
        let mut out = Vec::with_capacity(r);
        for (&x, &y) in pa.iter().zip(&pb) {
            out.push(match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return None,
            });
        }
        let eff = |p: &[usize]| -> Vec<usize> {
            let st = strides(p);
            p.iter().zip(st).map(|(&d, s)| if d == 1 { 0 } else { s }).collect()
        };
        let (ea, eb) = (eff(&pa), eff(&pb));
        let n: usize = out.iter().product();
        let mut ia = Vec::with_capacity(n);
        let mut ib = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        let (mut oa, mut ob) = (0usize, 0usize);
        for _ in 0..n {
            ia.push(oa);
            ib.push(ob);
            for d in (0..r).rev() {
                idx[d] += 1;
                oa += ea[d];
                ob += eb[d];
                if idx[d] < out[d] {
                    break;
                }
                oa -= ea[d] * idx[d];
                ob -= eb[d] * idx[d];
                idx[d] = 0;
            }
        }
        Some(Self { out_shape: out, offsets: Some((ia, ib)) })
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let st = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_st: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let n = t.numel();
    let data = t.data();
    let r = out_shape.len();
    let mut out = Vec::with_capacity(n);
    if r == 0 {
        return t.clone();
    }
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += src_st[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_st[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn accum<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'g mut [f64] {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[v.0].value.shape().to_vec()));
    }
    slot.as_mut().expect("just filled").data_mut()
}

fn backward_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Tensor>]) {
    let node = &nodes[i];
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Unary { x, kind } => {
            if needs(*x) {
                let xv = nodes[x.0].value.data();
                let yv = node.value.data();
                let gx = accum(grads, nodes, *x);
                for j in 0..g.len() {
                    gx[j] += g[j] * unary_grad(*kind, xv[j], yv[j]);
                }
            }
        }
        Op::Binary { a, b, kind } => {
            let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let plan = Broadcast::new(nodes[a.0].value.shape(), nodes[b.0].value.shape()).expect("validated in forward");
            let n = g.len();
            let (da, db): (Vec<f64>, Vec<f64>) = match &plan.offsets {
                None => (0..n).map(|j| binary_grad(*kind, va[j], vb[j])).unzip(),
                Some((ia, ib)) => (0..n).map(|j| binary_grad(*kind, va[ia[j]], vb[ib[j]])).unzip(),
            };
            if needs(*a) {
                let ga = accum(grads, nodes, *a);
                match &plan.offsets {
                    None => (0..n).for_each(|j| ga[j] += g[j] * da[j]),
                    Some((ia, _)) => (0..n).for_each(|j| ga[ia[j]] += g[j] * da[j]),
                }
            }
            if needs(*b) {
                let gb = accum(grads, nodes, *b);
                match &plan.offsets {
                    None => (0..n).for_each(|j| gb[j] += g[j] * db[j]),
                    Some((_, ib)) => (0..n).for_each(|j| gb[ib[j]] += g[j] * db[j]),
                }
            }
        }
        Op::Sum { x } => {
            if needs(*x) {
                accum(grads, nodes, *x).iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::SumAxis { x, outer, len, inner } => {
            if needs(*x) {
                let gx = accum(grads, nodes, *x);
                for o in 0..*outer {
                    for l in 0..*len {
                        let d = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (dv, gv) in d.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *dv += gv;
                        }
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if needs(*x) {
                accum(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Permute { x, perm } => {
            if needs(*x) {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let back = permute_tensor(&gt, &inv);
                accum(grads, nodes, *x).iter_mut().zip(back.data()).for_each(|(d, s)| *d += s);
            }
        }
        Op::Concat { xs, outer, blocks } => {
            let width: usize = blocks.iter().sum();
            let mut start = 0;
            for (&v, &blk) in xs.iter().zip(blocks) {
                if needs(v) {
                    let gv = accum(grads, nodes, v);
                    for o in 0..*outer {
                        let src = &g[o * width + start..o * width + start + blk];
                        gv[o * blk..(o + 1) * blk].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                start += blk;
            }
        }
        Op::Narrow { x, outer, src_block, start, block } => {
            if needs(*x) {
                let gx = accum(grads, nodes, *x);
                for o in 0..*outer {
                    let d = &mut gx[o * src_block + start..o * src_block + start + block];
                    d.iter_mut().zip(&g[o * block..(o + 1) * block]).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::IndexSelect { x, outer, len, inner, indices } => {
            if needs(*x) {
                let gx = accum(grads, nodes, *x);
                let k = indices.len();
                for o in 0..*outer {
                    for (j, &src) in indices.iter().enumerate() {
                        let d = &mut gx[(o * len + src) * inner..(o * len + src + 1) * inner];
                        let s = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                        d.iter_mut().zip(s).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
        Op::MatMul { a, b, plan } => {
            let p = plan.folded().unwrap_or(*plan);
            if needs(*a) {
                let vb = nodes[b.0].value.data();
                let ga = accum(grads, nodes, *a);
                for i in 0..p.batch {
                    gemm(1.0, g, p.c_view(i), vb, p.b_view(i).t(), 1.0, ga, p.a_view(i));
                }
            }
            if needs(*b) {
                let va = nodes[a.0].value.data();
                let gb = accum(grads, nodes, *b);
                for i in 0..p.batch {
                    gemm(1.0, va, p.a_view(i).t(), g, p.c_view(i), 1.0, gb, p.b_view(i));
                }
            }
        }
        Op::Conv2d { x, w, bias, geom, batch, c_out, cols } => {
            let (rows, p) = (geom.col_rows(), geom.col_cols());
            let c_out = *c_out;
            if needs(*w) {
                let gw = accum(grads, nodes, *w);
                for b in 0..*batch {
                    gemm(
                        1.0,
                        g,
                        View::row_major(b * c_out * p, c_out, p),
                        cols,
                        View::row_major(b * rows * p, rows, p).t(),
                        1.0,
                        gw,
                        View::row_major(0, c_out, rows),
                    );
                }
            }
            if let Some(bv) = bias {
                if needs(*bv) {
                    let gb = accum(grads, nodes, *bv);
                    for b in 0..*batch {
                        for (c, gbc) in gb.iter_mut().enumerate() {
                            let s = (b * c_out + c) * p;
                            *gbc += g[s..s + p].iter().sum::<f64>();
                        }
                    }
                }
            }
            if needs(*x) {
                let wd = nodes[w.0].value.data();
                let img = geom.c_in * geom.h * geom.w;
                let mut dcols = vec![0.0; rows * p];
                let gx = accum(grads, nodes, *x);
                for b in 0..*batch {
                    gemm(
                        1.0,
                        wd,
                        View::row_major(0, c_out, rows).t(),
                        g,
                        View::row_major(b * c_out * p, c_out, p),
                        0.0,
                        &mut dcols,
                        View::row_major(0, rows, p),
                    );
                    col2im(&dcols, geom, &mut gx[b * img..(b + 1) * img]);
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, layout, xhat, inv_std, train } => {
            let c = layout.channels;
            let for_channel = |ch: usize, f: &mut dyn FnMut(usize)| {
                for o in 0..layout.outer {
                    let s = (o * c + ch) * layout.inner;
                    (s..s + layout.inner).for_each(&mut *f);
                }
            };
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for ch in 0..c {
                for_channel(ch, &mut |i| {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * xhat[i];
                });
            }
            if needs(*gamma) {
                accum(grads, nodes, *gamma).iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
            }
            if needs(*beta) {
                accum(grads, nodes, *beta).iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
            }
            if needs(*x) {
                let gm = nodes[gamma.0].value.data().to_vec();
                let n = (layout.outer * layout.inner) as f64;
                let gx = accum(grads, nodes, *x);
                for ch in 0..c {
                    let k = gm[ch] * inv_std[ch];
                    if *train {
                        let (mg, mgx) = (sum_g[ch] / n, sum_gx[ch] / n);
                        for_channel(ch, &mut |i| gx[i] += k * (g[i] - mg - xhat[i] * mgx));
                    } else {
                        for_channel(ch, &mut |i| gx[i] += k * g[i]);
                    }
                }
            }
        }
        Op::Spike { x, f } => {
            if needs(*x) {
                let xv = nodes[x.0].value.data();
                let gx = accum(grads, nodes, *x);
                for j in 0..g.len() {
                    gx[j] += g[j] * f.surrogate_grad(xv[j]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let sp = t.softplus(z);
        assert!((t.value(sp).item() - 0.6931471805599453).abs() < 1e-15);
        let th = t.tanh(z);
        assert_eq!(t.value(th).item(), 0.0);
        let c = t.constant(Tensor::scalar(-0.2808));
        let cl = t.clamp_min(c, 0.0);
        assert_eq!(t.value(cl).item(), 0.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![3.0, -1.0, 2.0]), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let sq = t.square(x);
        let l = t.mean(sq);
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap().data();
        for (got, want) in g.iter().zip([2.0 / 3.0, 4.0 / 3.0, 2.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_of_product_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::scalar(0.5), true);
        let x = t.constant(Tensor::scalar(2.0));
        let wx = t.mul(w, x).unwrap();
        let l = t.softplus(wx);
        t.backward(l).unwrap();
        assert!((t.grad(w).unwrap().item() - 1.4621171572600098).abs() < 1e-10);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = t.scale(x, 2.0);
        assert!(matches!(t.backward(y), Err(Error::Backward(_))));
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::Backward(_))));
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([4, 5]));
        let e = t.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("matmul") && e.contains("[2, 3]"), "{e}");
        let e = t.add(a, b).unwrap_err().to_string();
        assert!(e.contains("add"), "{e}");
    }

    #[test]
    fn broadcasting_reduces_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_fn([2, 3], |i| i as f64), true);
        let b = t.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let c = t.mul(a, b).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(b).unwrap().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(t.grad(a).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([1, 2, 4, 4], |i| (i as f64 * 0.3).sin()));
        let w = t.constant(Tensor::from_fn([3, 2, 3, 3], |i| (i as f64 * 0.17).cos()));
        let y = t.conv2d(x, w, None, 1, 1).unwrap();
        let (xv, wv, yv) = (t.value(x).clone(), t.value(w).clone(), t.value(y).clone());
        assert_eq!(yv.shape(), &[1, 3, 4, 4]);
        for co in 0..3 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    s += xv.at(&[0, ci, iy as usize, ix as usize]) * wv.at(&[co, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    assert!((yv.at(&[0, co, oy, ox]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_graph_has_no_gradient_path() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones([2, 2]));
        let y = t.exp(x);
        assert!(!t.requires_grad(y));
        assert!(t.backward(t.len().checked_sub(1).map(Var).unwrap()).is_err());
    }
}
