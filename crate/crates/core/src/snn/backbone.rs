//! Tiny spike-driven transformer over the fused template/search frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Surrogate, Tensor, Var};
use crate::energy::{LayerDesc, LayerShape};
use crate::error::{Error, Result};
use crate::nn::{init_uniform, BatchNorm, Ctx, Linear};
use crate::snn::embed::add_embeddings;
use crate::snn::neuron::{fire, MultiSpikeNeuron, SpikeVar};
use crate::snn::rpm::{JointInput, Layout, TokenType};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub num_blocks: usize,
    /// Patch side `s`; score maps are `search_size / s` cells wide.
    pub patch_stride: usize,
    pub t_max: u32,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Each patch is average-pooled by this factor before the stem.
    pub pixel_pool: usize,
    pub threshold: f64,
    pub surrogate: Surrogate,
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_blocks: 2,
            patch_stride: 16,
            t_max: 4,
            heads: 2,
            mlp_ratio: 4,
            pixel_pool: 4,
            threshold: 1.0,
            surrogate: Surrogate::StraightThrough,
            template_size: 128,
            search_size: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| Err(Error::Config { key: format!("model.backbone.{key}"), detail });
        if self.search_size != 2 * self.template_size {
            return bad("search_size", format!("must be twice template_size ({})", self.template_size));
        }
        if self.patch_stride == 0 || self.template_size % self.patch_stride != 0 {
            return bad("patch_stride", format!("{} must divide template_size {}", self.patch_stride, self.template_size));
        }
        if self.pixel_pool == 0 || self.patch_stride % self.pixel_pool != 0 {
            return bad("pixel_pool", format!("{} must divide patch_stride {}", self.pixel_pool, self.patch_stride));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("heads", format!("{} heads must divide embed_dim {}", self.heads, self.embed_dim));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive".into());
        }
        if self.t_max == 0 || self.t_max > 255 {
            return bad("t_max", format!("{} outside 1..=255", self.t_max));
        }
        self.neuron().validate().map_err(|e| Error::Config { key: "model.backbone.threshold".into(), detail: e.to_string() })
    }

    pub fn neuron(&self) -> MultiSpikeNeuron {
        MultiSpikeNeuron { threshold: self.threshold, t_max: self.t_max, surrogate: self.surrogate }
    }

    /// Score-map side `H_x / s`.
    pub fn map_side(&self) -> usize {
        self.search_size / self.patch_stride
    }

    pub fn template_side(&self) -> usize {
        self.template_size / self.patch_stride
    }

    pub fn num_tokens(&self) -> usize {
        let t = self.template_side();
        let m = self.map_side();
        2 * t * t + m * m
    }

    /// Features per token after pooling.
    pub fn token_features(&self) -> usize {
        let p = self.patch_stride / self.pixel_pool;
        3 * p * p
    }
}

/// Patch tokens `[B, N, F]` of fused frames sharing one layout; pixels are
/// centred on 0.5.
pub fn tokenize(inputs: &[JointInput], cfg: &BackboneConfig) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (s, p) = (cfg.patch_stride, cfg.pixel_pool);
    let q = s / p;
    let f = cfg.token_features();
    let n = cfg.num_tokens();
    let mut out = Vec::with_capacity(inputs.len() * n * f);
    for j in inputs {
        if j.layout != first.layout || j.template_size != cfg.template_size {
            return Err(Error::invalid("batch mixes layouts or sizes"));
        }
        let img = j.image.avg_pool(p);
        let (gh, gw) = (img.height() / q, img.width() / q);
        debug_assert_eq!(gh * gw, n);
        for gy in 0..gh {
            for gx in 0..gw {
                for y in 0..q {
                    for x in 0..q {
                        let px = img.pixel(gy * q + y, gx * q + x);
                        out.extend(px.iter().map(|v| v - 0.5));
                    }
                }
            }
        }
    }
    Tensor::new([inputs.len(), n, f], out)
}

#[derive(Clone, Debug)]
struct Block {
    name: String,
    q: Linear,
    k: Linear,
    v: Linear,
    q_bn: BatchNorm,
    k_bn: BatchNorm,
    v_bn: BatchNorm,
    attn_bn: BatchNorm,
    proj: Linear,
    proj_bn: BatchNorm,
    fc1: Linear,
    fc1_bn: BatchNorm,
    fc2: Linear,
    fc2_bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: Linear,
    stem_bn: BatchNorm,
    pub pos_embed: ParamId,
    pub type_embed: ParamId,
    blocks: Vec<Block>,
}

fn synapse(ctx: &mut Ctx<'_>, layer: &Linear, s: SpikeVar) -> Result<Var> {
    layer.forward(ctx, s.var())
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let h = d * cfg.mlp_ratio;
        let stem = Linear::new(store, "backbone.stem", cfg.token_features(), d, false, rng);
        let stem_bn = BatchNorm::new(store, "backbone.stem_bn", d, 2);
        let pos_embed = store.add("backbone.pos_embed", init_uniform(rng, &[cfg.num_tokens(), d], 1, 0.02));
        let type_embed = store.add("backbone.type_embed", init_uniform(rng, &[3, d], 1, 0.02));
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for b in 0..cfg.num_blocks {
            let n = format!("backbone.block{b}");
            let lin = |store: &mut ParamStore, rng: &mut _, part: &str, i, o| Linear::new(store, &format!("{n}.{part}"), i, o, false, rng);
            let bn = |store: &mut ParamStore, part: &str, c| BatchNorm::new(store, &format!("{n}.{part}"), c, 2);
            blocks.push(Block {
                q: lin(store, rng, "q", d, d),
                k: lin(store, rng, "k", d, d),
                v: lin(store, rng, "v", d, d),
                q_bn: bn(store, "q_bn", d),
                k_bn: bn(store, "k_bn", d),
                v_bn: bn(store, "v_bn", d),
                attn_bn: bn(store, "attn_bn", d),
                proj: lin(store, rng, "proj", d, d),
                proj_bn: bn(store, "proj_bn", d),
                fc1: lin(store, rng, "fc1", d, h),
                fc1_bn: bn(store, "fc1_bn", h),
                fc2: lin(store, rng, "fc2", h, d),
                fc2_bn: bn(store, "fc2_bn", d),
                name: n,
            });
        }
        Ok(Self { cfg: cfg.clone(), stem, stem_bn, pos_embed, type_embed, blocks })
    }

    /// Runs the transformer on `[B, N, F]` tokens whose rows carry the
    /// given position indices and types. Returns the output spikes `[B, N, D]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, tokens: Var, positions: &[usize], types: &[TokenType]) -> Result<SpikeVar> {
        let neuron = self.cfg.neuron();
        let x = self.stem.forward(ctx, tokens)?;
        let x = self.stem_bn.forward(ctx, x)?;
        let pos = ctx.param(self.pos_embed);
        let ty = ctx.param(self.type_embed);
        let mut x = add_embeddings(ctx.tape(), x, pos, ty, positions, types)?;
        for b in &self.blocks {
            x = self.block(ctx, b, x, &neuron)?;
        }
        Ok(fire(ctx, "backbone.out", x, &neuron))
    }

    fn block(&self, ctx: &mut Ctx<'_>, b: &Block, x: Var, neuron: &MultiSpikeNeuron) -> Result<Var> {
        let shape = ctx.tape().shape(x).to_vec();
        let (bsz, n, d) = (shape[0], shape[1], shape[2]);
        let heads = self.cfg.heads;
        let dh = d / heads;
        let t = self.cfg.t_max as f64;

        let s = fire(ctx, &format!("{}.in", b.name), x, neuron);
        let mut qkv = Vec::with_capacity(3);
        for (part, lin, bn) in [("q", &b.q, &b.q_bn), ("k", &b.k, &b.k_bn), ("v", &b.v, &b.v_bn)] {
            let m = synapse(ctx, lin, s)?;
            let m = bn.forward(ctx, m)?;
            let sp = fire(ctx, &format!("{}.{part}", b.name), m, neuron);
            let sp = ctx.tape().reshape(sp.var(), &[bsz, n, heads, dh])?;
            let sp = ctx.tape().permute(sp, &[0, 2, 1, 3])?;
            qkv.push(ctx.tape().reshape(sp, &[bsz * heads, n, dh])?);
        }
        let (q, k, v) = (qkv[0], qkv[1], qkv[2]);
        let kv = ctx.tape().matmul_t(k, v, true, false)?;
        let a = ctx.tape().matmul(q, kv)?;
        let a = ctx.tape().scale(a, 1.0 / (n as f64 * t * t));
        let a = ctx.tape().reshape(a, &[bsz, heads, n, dh])?;
        let a = ctx.tape().permute(a, &[0, 2, 1, 3])?;
        let a = ctx.tape().reshape(a, &[bsz, n, d])?;
        let a = b.attn_bn.forward(ctx, a)?;
        let sa = fire(ctx, &format!("{}.attn", b.name), a, neuron);
        let y = synapse(ctx, &b.proj, sa)?;
        let y = b.proj_bn.forward(ctx, y)?;
        let x = ctx.tape().add(x, y)?;

        let s = fire(ctx, &format!("{}.mlp_in", b.name), x, neuron);
        let h = synapse(ctx, &b.fc1, s)?;
        let h = b.fc1_bn.forward(ctx, h)?;
        let sh = fire(ctx, &format!("{}.mlp_hidden", b.name), h, neuron);
        let y = synapse(ctx, &b.fc2, sh)?;
        let y = b.fc2_bn.forward(ctx, y)?;
        ctx.tape().add(x, y)
    }

    /// Forward pass on fused frames that share one layout.
    pub fn forward_joint(&self, ctx: &mut Ctx<'_>, inputs: &[JointInput]) -> Result<(SpikeVar, Layout)> {
        let tokens = tokenize(inputs, &self.cfg)?;
        let layout = inputs[0].layout;
        let types = crate::snn::rpm::token_types(layout, self.cfg.template_size, self.cfg.patch_stride);
        let positions: Vec<usize> = (0..types.len()).collect();
        let t = ctx.tape().constant(tokens);
        Ok((self.forward(ctx, t, &positions, &types)?, layout))
    }

    /// Synaptic layers of one image's forward pass, for energy accounting.
    pub fn describe(&self) -> Vec<LayerDesc> {
        let n = self.cfg.num_tokens();
        let d = self.cfg.embed_dim;
        let h = d * self.cfg.mlp_ratio;
        let dh = d / self.cfg.heads;
        let mut out = vec![LayerDesc {
            name: "backbone.stem".into(),
            shape: LayerShape::Linear { rows: n, in_dim: self.cfg.token_features(), out_dim: d },
            spiking: false,
            input: None,
        }];
        let lin = |name: String, i, o, input: String| LayerDesc {
            name,
            shape: LayerShape::Linear { rows: n, in_dim: i, out_dim: o },
            spiking: true,
            input: Some(input),
        };
        for b in &self.blocks {
            let bn = &b.name;
            for part in ["q", "k", "v"] {
                out.push(lin(format!("{bn}.{part}"), d, d, format!("{bn}.in")));
            }
            let heads = self.cfg.heads;
            out.push(LayerDesc {
                name: format!("{bn}.kv"),
                shape: LayerShape::Matmul { batch: heads, m: dh, n: dh, k: n },
                spiking: true,
                input: Some(format!("{bn}.k")),
            });
            out.push(LayerDesc {
                name: format!("{bn}.qkv"),
                shape: LayerShape::Matmul { batch: heads, m: n, n: dh, k: dh },
                spiking: true,
                input: Some(format!("{bn}.q")),
            });
            out.push(lin(format!("{bn}.proj"), d, d, format!("{bn}.attn")));
            out.push(lin(format!("{bn}.fc1"), d, h, format!("{bn}.mlp_in")));
            out.push(lin(format!("{bn}.fc2"), h, d, format!("{bn}.mlp_hidden")));
        }
        out
    }
}
