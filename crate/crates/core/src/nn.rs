//! Parameterized layers and the forward-pass context they share.

use rand::Rng;

use crate::autodiff::{
    gradcheck_with, BnMode, BnStats, GradcheckOpts, GradcheckReport, ParamId, ParamStore, Session, SpikeMode, Tape, Tensor,
    Var,
};
use crate::error::Result;

/// Mean spike activity of one spiking layer during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FiringRecord {
    pub layer: String,
    /// `mean(counts) / t_max`, in `[0, 1]`.
    pub rate: f64,
    pub elements: usize,
}

pub(crate) struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BnStats,
    momentum: f64,
}

/// Tape, parameter bindings, and per-pass bookkeeping.
pub struct Ctx<'p> {
    pub sess: Session<'p>,
    pub train: bool,
    bn_updates: Vec<BnUpdate>,
    firing: Vec<FiringRecord>,
}

impl<'p> Ctx<'p> {
    /// Training pass: gradients for trainable parameters, batch statistics.
    pub fn train(store: &'p ParamStore) -> Self {
        Self::build(store, true, true, SpikeMode::Quantized)
    }

    /// Inference pass: running statistics, nothing differentiated.
    pub fn eval(store: &'p ParamStore) -> Self {
        Self::build(store, false, false, SpikeMode::Quantized)
    }

    pub fn build(store: &'p ParamStore, differentiate: bool, train: bool, mode: SpikeMode) -> Self {
        Self {
            sess: Session::with_spike_mode(store, differentiate, mode),
            train,
            bn_updates: Vec::new(),
            firing: Vec::new(),
        }
    }

    /// Wraps an existing tape; parameters bind as constants unless
    /// overridden.
    pub fn from_tape(store: &'p ParamStore, tape: Tape, train: bool) -> Self {
        Self { sess: Session::from_tape(store, tape, false), train, bn_updates: Vec::new(), firing: Vec::new() }
    }

    pub fn into_tape(self) -> Tape {
        self.sess.into_tape()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.sess.param(id)
    }

    pub fn tape(&mut self) -> &mut crate::autodiff::Tape {
        &mut self.sess.tape
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.sess.tape.value(v)
    }

    pub(crate) fn record_firing(&mut self, layer: &str, rate: f64, elements: usize) {
        self.firing.push(FiringRecord { layer: layer.to_string(), rate, elements });
    }

    pub fn firing(&self) -> &[FiringRecord] {
        &self.firing
    }

    pub fn take_firing(&mut self) -> Vec<FiringRecord> {
        std::mem::take(&mut self.firing)
    }

    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.sess.param_grads()
    }

    /// Moves batch statistics into running buffers after a training step.
    pub fn take_bn_updates(&mut self) -> BnUpdates {
        BnUpdates(std::mem::take(&mut self.bn_updates))
    }
}

/// Pending running-statistics updates from one training pass.
pub struct BnUpdates(Vec<BnUpdate>);

impl BnUpdates {
    pub fn apply(self, store: &mut ParamStore) {
        for u in self.0 {
            let n = u.stats.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = u.momentum;
            for (r, b) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - m) * *r + m * b * unbias;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Finite-difference check of a scalar function of the parameters `ids`
/// (all other parameters held fixed).
pub fn gradcheck_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    train: bool,
    opts: GradcheckOpts,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    let mut flat = Vec::new();
    for &id in ids {
        flat.extend_from_slice(store.get(id).data());
    }
    let n = flat.len();
    let point = Tensor::new([n], flat)?;
    let g = |tape: &mut Tape, p: Var| -> Result<Var> {
        let mut ctx = Ctx::from_tape(store, std::mem::take(tape), train);
        let mut off = 0;
        for &id in ids {
            let shape = store.get(id).shape().to_vec();
            let len = store.get(id).numel();
            let slice = ctx.tape().narrow(p, 0, off, len)?;
            let v = ctx.tape().reshape(slice, &shape)?;
            ctx.sess.override_param(id, v);
            off += len;
        }
        let y = f(&mut ctx)?;
        *tape = ctx.into_tape();
        Ok(y)
    };
    gradcheck_with(g, &point, opts)
}

/// Uniform fan-in initialization with variance `gain² / fan_in`.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let a = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-a..a))
}

/// `y = x · W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add(&format!("{name}.weight"), init_uniform(rng, &[in_dim, out_dim], in_dim, 1.0));
        let b = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros([out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        let y = ctx.tape().matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape().add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Dense multiply-accumulates for `rows` input rows.
    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.in_dim * self.out_dim) as u64
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = store.add(&format!("{name}.weight"), init_uniform(rng, &[c_out, c_in, k, k], fan_in, 1.0));
        let b = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros([c_out])));
        Self { w, b, c_in, c_out, k, stride, pad }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        let b = self.b.map(|b| ctx.param(b));
        ctx.tape().conv2d(x, w, b, self.stride, self.pad)
    }

    /// Dense multiply-accumulates per image for an `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        (oh * ow * self.c_out * self.c_in * self.k * self.k) as u64
    }
}

/// Batch normalization with running statistics (momentum 0.1).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channel_axis: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, channel_axis: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones([channels])),
            channel_axis,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Same as [`BatchNorm::new`] with a custom initial scale and shift.
    pub fn with_affine(store: &mut ParamStore, name: &str, channels: usize, channel_axis: usize, gamma: f64, beta: f64) -> Self {
        let bn = Self::new(store, name, channels, channel_axis);
        store.get_mut(bn.gamma).data_mut().iter_mut().for_each(|v| *v = gamma);
        store.get_mut(bn.beta).data_mut().iter_mut().for_each(|v| *v = beta);
        bn
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        if ctx.train {
            let (y, stats) = ctx.sess.tape.batchnorm(x, g, b, self.channel_axis, BnMode::Train { eps: self.eps })?;
            ctx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats: stats.expect("train mode reports statistics"),
                momentum: self.momentum,
            });
            Ok(y)
        } else {
            let store = ctx.sess.store();
            let mode = BnMode::Eval {
                mean: store.get(self.running_mean).data(),
                var: store.get(self.running_var).data(),
                eps: self.eps,
            };
            let (y, _) = ctx.sess.tape.batchnorm(x, g, b, self.channel_axis, mode)?;
            Ok(y)
        }
    }
}
