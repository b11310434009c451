//! The full tracker network: backbone, center head and statistics network
//! sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amim::{StatisticsNetwork, StatsNetConfig, TemplatePooling};
use crate::autodiff::{ParamStore, Tensor};
use crate::energy::{count_ops, estimate_energy, mean_rates, rates_for, EnergyProfile, LayerDesc};
use crate::error::{Error, Result};
use crate::head::{CenterHead, HeadConfig, HeadOutput, ScoreMaps};
use crate::imaging::Image;
use crate::nn::Ctx;
use crate::snn::rpm::{fuse_with_layout, token_indices, token_types, Layout, TokenType};
use crate::snn::{Backbone, BackboneConfig, JointInput, SpikeVar};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub stats_net: StatsNetConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head.width == 0 {
            return Err(Error::Config { key: "model.head.width".into(), detail: "must be positive".into() });
        }
        let side = self.backbone.template_size / self.backbone.pixel_pool;
        let k = self.stats_net.conv_kernel;
        if k == 0 || side % k != 0 {
            return Err(Error::Config {
                key: "model.stats_net.conv_kernel".into(),
                detail: format!("{k} must divide the pooled template side {side}"),
            });
        }
        if self.stats_net.hidden == 0 || self.stats_net.conv_channels == 0 {
            return Err(Error::Config { key: "model.stats_net.hidden".into(), detail: "must be positive".into() });
        }
        Ok(())
    }

    /// Channels of the statistics network's image input.
    pub fn z_channels(&self) -> usize {
        match self.stats_net.pooling {
            TemplatePooling::Both => 6,
            TemplatePooling::First => 3,
        }
    }

    pub fn z_side(&self) -> usize {
        self.backbone.template_size / self.backbone.pixel_pool
    }
}

#[derive(Clone, Debug)]
pub struct TrackerModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub head: CenterHead,
    pub stats: StatisticsNetwork,
}

/// Outputs of one forward pass over a batch sharing a layout.
pub struct ForwardOut {
    pub head: HeadOutput,
    /// Backbone output spikes `[B, N, D]`.
    pub features: SpikeVar,
    pub token_types: Vec<TokenType>,
    pub layout: Layout,
}

impl TrackerModel {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore, Self)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&mut store, &cfg.backbone, &mut rng)?;
        let head = CenterHead::new(&mut store, cfg.backbone.embed_dim, &cfg.head, &mut rng)?;
        let stats = StatisticsNetwork::for_images(&mut store, cfg.z_channels(), cfg.z_side(), cfg.backbone.embed_dim, &cfg.stats_net, &mut rng)?;
        Ok((store, Self { cfg: cfg.clone(), backbone, head, stats }))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, inputs: &[JointInput]) -> Result<ForwardOut> {
        let (features, layout) = self.backbone.forward_joint(ctx, inputs)?;
        let b = &self.cfg.backbone;
        let idx = token_indices(layout, b.template_size, b.patch_stride, TokenType::Search);
        let search = ctx.tape().index_select(features.var(), 1, &idx)?;
        let head = self.head.forward(ctx, SpikeVar::rearranged(search), &b.neuron())?;
        Ok(ForwardOut { head, features, token_types: token_types(layout, b.template_size, b.patch_stride), layout })
    }

    /// Score maps for one `(t1, t2, search)` triple in inference mode.
    pub fn predict(&self, store: &ParamStore, t1: &Image, t2: &Image, search: &Image) -> Result<ScoreMaps> {
        let j = fuse_with_layout(t1, t2, search, Layout::Horizontal)?;
        let mut ctx = Ctx::eval(store);
        let out = self.forward(&mut ctx, &[j])?;
        out.head.maps(&ctx, 0)
    }

    /// Statistics-network input: pooled templates, channel-stacked and
    /// centred, `[B, C, side, side]`.
    pub fn template_batch(&self, pairs: &[(&Image, &Image)]) -> Result<Tensor> {
        let p = self.cfg.backbone.pixel_pool;
        let side = self.cfg.z_side();
        let c = self.cfg.z_channels();
        let mut data = Vec::with_capacity(pairs.len() * c * side * side);
        for (t1, t2) in pairs {
            data.extend(t1.avg_pool(p).to_chw().data().iter().map(|v| v - 0.5));
            if c == 6 {
                data.extend(t2.avg_pool(p).to_chw().data().iter().map(|v| v - 0.5));
            }
        }
        Tensor::new([pairs.len(), c, side, side], data)
    }

    /// Synaptic layers used at inference, per image.
    pub fn describe(&self) -> Vec<LayerDesc> {
        let mut d = self.backbone.describe();
        d.extend(self.head.describe(self.cfg.backbone.map_side(), "backbone.out"));
        d
    }

    /// Per-image energy with input rates measured on `inputs` in
    /// inference mode.
    pub fn profile_energy(&self, store: &ParamStore, inputs: &[JointInput], e_mac: f64, e_ac: f64) -> Result<EnergyProfile> {
        let mut ctx = Ctx::eval(store);
        self.forward(&mut ctx, inputs)?;
        let rates = mean_rates(ctx.firing());
        let specs = count_ops(&self.describe())?;
        let r = rates_for(&specs, &rates)?;
        estimate_energy(&specs, &r, self.cfg.backbone.t_max, e_mac, e_ac)
    }
}

/// Horizontal joint inputs cut from `n` fresh synthetic clips.
pub fn synthetic_batch(cfg: &ModelConfig, scene: &crate::bench::SceneConfig, n: usize, seed: u64) -> Result<Vec<JointInput>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampling = crate::train::SamplingConfig::default();
    (0..n)
        .map(|_| {
            let s = crate::train::draw_sample(&mut rng, cfg, scene, &sampling)?;
            fuse_with_layout(&s.t1, &s.t2, &s.search, Layout::Horizontal)
        })
        .collect()
}
