//! Spiking center head: three branches of four spiking convolutions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor, Var};
use crate::energy::{LayerDesc, LayerShape};
use crate::error::{Error, Result};
use crate::head::boxes::ScoreMaps;
use crate::nn::{BatchNorm, Conv2d, Ctx};
use crate::snn::neuron::{fire, MultiSpikeNeuron, SpikeVar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Channels of the hidden convolutions.
    pub width: usize,
    /// Initial bias of the classification output (a low prior keeps early
    /// focal-loss gradients stable).
    pub cls_bias: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { width: 32, cls_bias: -2.19 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Cls,
    Size,
    Offset,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Cls, Branch::Size, Branch::Offset];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Cls => "cls",
            Branch::Size => "size",
            Branch::Offset => "offset",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Branch::Cls => 1,
            Branch::Size | Branch::Offset => 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadBranch {
    pub branch: Branch,
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm>,
    out: Conv2d,
}

impl HeadBranch {
    fn new(store: &mut ParamStore, in_ch: usize, cfg: &HeadConfig, branch: Branch, rng: &mut impl Rng) -> Self {
        let n = format!("head.{}", branch.name());
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..3 {
            let c_in = if i == 0 { in_ch } else { cfg.width };
            convs.push(Conv2d::new(store, &format!("{n}.conv{i}"), c_in, cfg.width, 3, 1, 1, false, rng));
            norms.push(BatchNorm::new(store, &format!("{n}.bn{i}"), cfg.width, 1));
        }
        let out = Conv2d::new(store, &format!("{n}.out"), cfg.width, branch.channels(), 1, 1, 0, true, rng);
        if branch == Branch::Cls {
            store.get_mut(out.b.expect("output conv has a bias")).data_mut().fill(cfg.cls_bias);
        }
        Self { branch, convs, norms, out }
    }

    /// `[B, C, M, M]` spikes in, sigmoid maps `[B, channels, M, M]` out.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: SpikeVar, neuron: &MultiSpikeNeuron) -> Result<Var> {
        let n = format!("head.{}", self.branch.name());
        let mut s = x;
        for (i, (conv, bn)) in self.convs.iter().zip(&self.norms).enumerate() {
            let m = conv.forward(ctx, s.var())?;
            let m = bn.forward(ctx, m)?;
            s = fire(ctx, &format!("{n}.s{i}"), m, neuron);
        }
        let logits = self.out.forward(ctx, s.var())?;
        Ok(ctx.tape().sigmoid(logits))
    }

    pub fn out_bias(&self) -> crate::autodiff::ParamId {
        self.out.b.expect("output conv has a bias")
    }
}

/// Batched head outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[B, 1, M, M]`
    pub p: Var,
    /// `[B, 2, M, M]`
    pub s: Var,
    /// `[B, 2, M, M]`
    pub o: Var,
}

impl HeadOutput {
    pub fn maps(&self, ctx: &Ctx<'_>, b: usize) -> Result<ScoreMaps> {
        ScoreMaps::from_batch(ctx.value(self.p), ctx.value(self.s), ctx.value(self.o), b)
    }
}

#[derive(Clone, Debug)]
pub struct CenterHead {
    pub cfg: HeadConfig,
    pub in_channels: usize,
    pub branches: Vec<HeadBranch>,
}

impl CenterHead {
    pub fn new(store: &mut ParamStore, in_channels: usize, cfg: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.width == 0 {
            return Err(Error::Config { key: "model.head.width".into(), detail: "must be positive".into() });
        }
        let branches = Branch::ALL.iter().map(|&b| HeadBranch::new(store, in_channels, cfg, b, rng)).collect();
        Ok(Self { cfg: cfg.clone(), in_channels, branches })
    }

    pub fn branch(&self, b: Branch) -> &HeadBranch {
        &self.branches[b as usize]
    }

    /// Reshapes `[B, M·M, D]` search-token spikes into `[B, D, M, M]` maps.
    pub fn to_map(ctx: &mut Ctx<'_>, tokens: SpikeVar) -> Result<SpikeVar> {
        let shape = ctx.tape().shape(tokens.var()).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("head_forward", format!("expected [B, N, D] tokens, got {shape:?}")));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let m = (n as f64).sqrt().round() as usize;
        if m * m != n {
            return Err(Error::shape("head_forward", format!("{n} search tokens do not form a square map")));
        }
        let v = ctx.tape().reshape(tokens.var(), &[b, m, m, d])?;
        let v = ctx.tape().permute(v, &[0, 3, 1, 2])?;
        Ok(SpikeVar::rearranged(v))
    }

    /// Score maps from `[B, M·M, D]` search-token spikes.
    pub fn forward(&self, ctx: &mut Ctx<'_>, search_tokens: SpikeVar, neuron: &MultiSpikeNeuron) -> Result<HeadOutput> {
        let x = Self::to_map(ctx, search_tokens)?;
        let p = self.branches[0].forward(ctx, x, neuron)?;
        let s = self.branches[1].forward(ctx, x, neuron)?;
        let o = self.branches[2].forward(ctx, x, neuron)?;
        Ok(HeadOutput { p, s, o })
    }

    pub fn describe(&self, side: usize, input_neuron: &str) -> Vec<LayerDesc> {
        let mut out = Vec::new();
        for br in &self.branches {
            let n = format!("head.{}", br.branch.name());
            for (i, c) in br.convs.iter().chain(std::iter::once(&br.out)).enumerate() {
                let input = if i == 0 { input_neuron.to_string() } else { format!("{n}.s{}", i - 1) };
                out.push(LayerDesc {
                    name: format!("{n}.conv{i}"),
                    shape: LayerShape::Conv2d {
                        c_in: c.c_in,
                        c_out: c.c_out,
                        k: c.k,
                        stride: c.stride,
                        pad: c.pad,
                        h: side,
                        w: side,
                    },
                    spiking: true,
                    input: Some(input),
                });
            }
        }
        out
    }
}

/// Zero spike map, handy for checks.
pub fn zero_tokens(b: usize, side: usize, d: usize) -> Tensor {
    Tensor::zeros([b, side * side, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GradcheckOpts, SpikeMode};
    use crate::nn::gradcheck_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(width: usize, d: usize) -> (ParamStore, CenterHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = CenterHead::new(&mut store, d, &HeadConfig { width, cls_bias: 0.0 }, &mut rng).unwrap();
        (store, head)
    }

    #[test]
    fn zero_features_give_one_half() {
        let (store, head) = setup(4, 3);
        let mut ctx = Ctx::eval(&store);
        let t = ctx.tape().constant(zero_tokens(2, 4, 3));
        let t = SpikeVar::rearranged(t);
        let out = head.forward(&mut ctx, t, &MultiSpikeNeuron::default()).unwrap();
        for v in [out.p, out.s, out.o] {
            assert!(ctx.value(v).data().iter().all(|&x| x == 0.5));
        }
        assert_eq!(ctx.value(out.s).shape(), &[2, 2, 4, 4]);
    }

    #[test]
    fn outputs_in_unit_interval() {
        let (store, head) = setup(4, 3);
        let mut ctx = Ctx::train(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = ctx.tape().constant(Tensor::from_fn([2, 16, 3], |_| rng.gen_range(0..5) as f64));
        let out = head.forward(&mut ctx, SpikeVar::rearranged(t), &MultiSpikeNeuron::default()).unwrap();
        for v in [out.p, out.s, out.o] {
            assert!(ctx.value(v).data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn non_square_tokens_rejected() {
        let (store, head) = setup(4, 3);
        let mut ctx = Ctx::eval(&store);
        let t = ctx.tape().constant(Tensor::zeros([1, 15, 3]));
        assert!(head.forward(&mut ctx, SpikeVar::rearranged(t), &MultiSpikeNeuron::default()).is_err());
    }

    #[test]
    fn branch_gradcheck_through_relaxed_spikes() {
        let (store, head) = setup(3, 2);
        let neuron = MultiSpikeNeuron::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = Tensor::from_fn([2, 9, 2], |_| rng.gen_range(0..5) as f64);
        let br = head.branch(Branch::Size);
        let ids: Vec<_> = store.iter().filter(|(_, e)| e.name.starts_with("head.size.") && e.kind == crate::autodiff::ParamKind::Trainable).map(|(i, _)| i).collect();
        let r = gradcheck_params(&store, &ids, true, GradcheckOpts { spike_mode: SpikeMode::Relaxed, ..Default::default() }, |ctx| {
            let t = ctx.tape().constant(input.clone());
            let x = CenterHead::to_map(ctx, SpikeVar::rearranged(t))?;
            let y = br.forward(ctx, x, &neuron)?;
            let w = ctx.tape().constant(Tensor::from_fn([2, 2, 3, 3], |i| ((i * 7 % 5) as f64 - 2.0) * 0.3));
            let y = ctx.tape().mul(y, w)?;
            Ok(ctx.tape().sum(y))
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
