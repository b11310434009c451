//! Mutual information between template images and their deep features,
//! estimated with a Jensen-Shannon discriminator.
//!
//! `Î = mean_i[−sp(−T(Z_i, t_i))] − mean_i[sp(T(Z'_i, t_i))]`, where `Z'` is
//! `Z` under a derangement, so every marginal pair mismatches its feature.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, SpikeMode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Linear};
use crate::optim::{AdamW, AdamWConfig};
use crate::snn::rpm::TokenType;

/// Input samples `Z`: images `[B, C, H, W]` or vectors `[B, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    z: Tensor,
}

impl SampleBatch {
    pub fn new(z: Tensor) -> Result<Self> {
        if z.rank() < 2 || z.shape()[0] < 2 {
            return Err(Error::invalid(format!("sample batch needs B >= 2 rows, got shape {:?}", z.shape())));
        }
        Ok(Self { z })
    }

    pub fn len(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tensor(&self) -> &Tensor {
        &self.z
    }

    fn row_len(&self) -> usize {
        self.z.numel() / self.len()
    }
}

/// `Z'` with `Z'[i] == Z[permutation[i]]` and no fixed points.
#[derive(Clone, Debug, PartialEq)]
pub struct ShuffledBatch {
    pub z_prime: Tensor,
    pub permutation: Vec<usize>,
}

/// Draws permutations from `rng_seed` until one has no fixed point, then
/// copies the rows.
pub fn shuffle_batch(z: &SampleBatch, rng_seed: u64) -> Result<ShuffledBatch> {
    let b = z.len();
    if b < 2 {
        return Err(Error::invalid("shuffle needs at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut perm: Vec<usize> = (0..b).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
    }
    let row = z.row_len();
    let mut data = Vec::with_capacity(z.z.numel());
    for &p in &perm {
        data.extend_from_slice(&z.z.data()[p * row..(p + 1) * row]);
    }
    Ok(ShuffledBatch { z_prime: Tensor::new(z.z.shape().to_vec(), data)?, permutation: perm })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplatePooling {
    /// Mean over the tokens of both templates.
    #[default]
    Both,
    /// Mean over the first template's tokens only.
    First,
}

/// Per-sample mean of `[B, N, D]` features over the template tokens.
pub fn pool_template_features(tape: &mut Tape, features: Var, token_types: &[TokenType], pooling: TemplatePooling) -> Result<Var> {
    let idx: Vec<usize> = token_types
        .iter()
        .enumerate()
        .filter(|(_, t)| match pooling {
            TemplatePooling::Both => t.is_template(),
            TemplatePooling::First => **t == TokenType::Template1,
        })
        .map(|(i, _)| i)
        .collect();
    pool_tokens(tape, features, &idx)
}

/// Per-sample mean of `[B, N, D]` features over the token positions `idx`.
pub fn pool_tokens(tape: &mut Tape, features: Var, idx: &[usize]) -> Result<Var> {
    if idx.is_empty() {
        return Err(Error::invalid("no template tokens to pool"));
    }
    let sel = tape.index_select(features, 1, idx)?;
    tape.mean_axis(sel, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsNetConfig {
    pub hidden: usize,
    pub conv_channels: usize,
    /// Kernel side and stride of the image encoder's convolution.
    pub conv_kernel: usize,
    pub pooling: TemplatePooling,
}

impl Default for StatsNetConfig {
    fn default() -> Self {
        Self { hidden: 32, conv_channels: 8, conv_kernel: 4, pooling: TemplatePooling::Both }
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Conv { conv: Conv2d, fc: Linear },
    Dense { fc1: Linear, fc2: Linear },
}

/// Discriminator `T_θ(Z, t)`; one set of weights scores both joint and
/// marginal pairs.
#[derive(Clone, Debug)]
pub struct StatisticsNetwork {
    z_enc: Encoder,
    t_fc1: Linear,
    t_fc2: Linear,
    head1: Linear,
    head2: Linear,
}

impl StatisticsNetwork {
    /// For `[B, channels, side, side]` images and `feat_dim` features.
    pub fn for_images(store: &mut ParamStore, channels: usize, side: usize, feat_dim: usize, cfg: &StatsNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let k = cfg.conv_kernel;
        if k == 0 || side % k != 0 {
            return Err(Error::Config { key: "train.stats_net.conv_kernel".into(), detail: format!("{k} must divide {side}") });
        }
        let conv = Conv2d::new(store, "stats.z_conv", channels, cfg.conv_channels, k, k, 0, true, rng);
        let flat = cfg.conv_channels * (side / k) * (side / k);
        let fc = Linear::new(store, "stats.z_fc", flat, cfg.hidden, true, rng);
        Ok(Self::finish(store, Encoder::Conv { conv, fc }, feat_dim, cfg, rng))
    }

    /// For `[B, z_dim]` vectors and `feat_dim` features.
    pub fn for_vectors(store: &mut ParamStore, z_dim: usize, feat_dim: usize, cfg: &StatsNetConfig, rng: &mut impl Rng) -> Self {
        let fc1 = Linear::new(store, "stats.z_fc1", z_dim, cfg.hidden, true, rng);
        let fc2 = Linear::new(store, "stats.z_fc2", cfg.hidden, cfg.hidden, true, rng);
        Self::finish(store, Encoder::Dense { fc1, fc2 }, feat_dim, cfg, rng)
    }

    fn finish(store: &mut ParamStore, z_enc: Encoder, feat_dim: usize, cfg: &StatsNetConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.hidden;
        Self {
            z_enc,
            t_fc1: Linear::new(store, "stats.t_fc1", feat_dim, h, true, rng),
            t_fc2: Linear::new(store, "stats.t_fc2", h, h, true, rng),
            head1: Linear::new(store, "stats.head1", 2 * h, h, true, rng),
            head2: Linear::new(store, "stats.head2", h, 1, true, rng),
        }
    }

    fn encode_z(&self, ctx: &mut Ctx<'_>, z: Var) -> Result<Var> {
        match &self.z_enc {
            Encoder::Conv { conv, fc } => {
                let b = ctx.tape().shape(z)[0];
                let y = conv.forward(ctx, z)?;
                let y = ctx.tape().relu(y);
                let n = ctx.tape().value(y).numel() / b;
                let y = ctx.tape().reshape(y, &[b, n])?;
                let y = fc.forward(ctx, y)?;
                Ok(ctx.tape().relu(y))
            }
            Encoder::Dense { fc1, fc2 } => {
                let y = fc1.forward(ctx, z)?;
                let y = ctx.tape().relu(y);
                let y = fc2.forward(ctx, y)?;
                Ok(ctx.tape().relu(y))
            }
        }
    }

    fn encode_t(&self, ctx: &mut Ctx<'_>, t: Var) -> Result<Var> {
        let y = self.t_fc1.forward(ctx, t)?;
        let y = ctx.tape().relu(y);
        let y = self.t_fc2.forward(ctx, y)?;
        Ok(ctx.tape().relu(y))
    }

    fn head(&self, ctx: &mut Ctx<'_>, ez: Var, et: Var) -> Result<Var> {
        let x = ctx.tape().concat(&[ez, et], 1)?;
        let y = self.head1.forward(ctx, x)?;
        let y = ctx.tape().relu(y);
        let y = self.head2.forward(ctx, y)?;
        let b = ctx.tape().shape(y)[0];
        ctx.tape().reshape(y, &[b])
    }

    /// Scores `[B]` for the pairs `(z_i, t_i)`.
    pub fn score(&self, ctx: &mut Ctx<'_>, z: Var, t: Var) -> Result<Var> {
        let ez = self.encode_z(ctx, z)?;
        let et = self.encode_t(ctx, t)?;
        self.head(ctx, ez, et)
    }
}

/// `mean(−sp(−joint)) − mean(sp(marginal))`.
pub fn jsd_from_scores(tape: &mut Tape, joint: Var, marginal: Var) -> Result<Var> {
    if tape.shape(joint) != tape.shape(marginal) {
        return Err(Error::shape("jsd_mi_estimate", format!("joint {:?} vs marginal {:?}", tape.shape(joint), tape.shape(marginal))));
    }
    let nj = tape.neg(joint);
    let spj = tape.softplus(nj);
    let a = tape.mean(spj);
    let spm = tape.softplus(marginal);
    let b = tape.mean(spm);
    let s = tape.add(a, b)?;
    Ok(tape.neg(s))
}

/// Jensen-Shannon MI estimate between `Z` and the features `t_z [B, D]`.
pub fn jsd_mi_estimate(ctx: &mut Ctx<'_>, z: &SampleBatch, z_prime: &ShuffledBatch, t_z: Var, net: &StatisticsNetwork) -> Result<Var> {
    let b = z.len();
    let tb = ctx.tape().shape(t_z).first().copied().unwrap_or(0);
    if z_prime.z_prime.shape() != z.z.shape() || tb != b || z_prime.permutation.len() != b {
        return Err(Error::shape(
            "jsd_mi_estimate",
            format!("Z {:?}, Z' {:?}, t_Z batch {tb}", z.z.shape(), z_prime.z_prime.shape()),
        ));
    }
    let zv = ctx.tape().constant(z.z.clone());
    let zpv = ctx.tape().constant(z_prime.z_prime.clone());
    let joint = net.score(ctx, zv, t_z)?;
    let marginal = net.score(ctx, zpv, t_z)?;
    jsd_from_scores(ctx.tape(), joint, marginal)
}

/// `L_MI = −λ_MI · Î`.
pub fn mi_loss(tape: &mut Tape, estimate: Var, lambda_mi: f64) -> Result<Var> {
    if !(lambda_mi >= 0.0 && lambda_mi.is_finite()) {
        return Err(Error::invalid(format!("lambda_mi must be finite and >= 0, got {lambda_mi}")));
    }
    Ok(tape.scale(estimate, -lambda_mi))
}

/// Pairs `(z, t)` of standard normals with correlation `rho`.
pub fn correlated_gaussians(rng: &mut impl Rng, n: usize, rho: f64) -> (Tensor, Tensor) {
    let mut z = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        z.push(a);
        t.push(rho * a + (1.0 - rho * rho).sqrt() * e);
    }
    (Tensor::new([n, 1], z).expect("shape"), Tensor::new([n, 1], t).expect("shape"))
}

/// Fitting a lone statistics network on paired Gaussians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyMiConfig {
    pub batch: usize,
    pub steps: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Held-out pairs scored after training.
    pub eval_batch: usize,
}

impl Default for ToyMiConfig {
    fn default() -> Self {
        Self { batch: 256, steps: 400, hidden: 16, lr: 5e-3, eval_batch: 4096 }
    }
}

/// Trains only a fresh statistics network by gradient ascent on the
/// estimate for pairs with correlation `rho`; returns the estimate on a
/// held-out batch.
pub fn fit_toy_estimator(rho: f64, seed: u64, cfg: &ToyMiConfig) -> Result<f64> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("correlation {rho} outside [-1, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let sc = StatsNetConfig { hidden: cfg.hidden, ..Default::default() };
    let net = StatisticsNetwork::for_vectors(&mut store, 1, 1, &sc, &mut rng);
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() });
    let estimate = |store: &ParamStore, rng: &mut ChaCha8Rng, n: usize, differentiate: bool| -> Result<(f64, Vec<_>)> {
        let (z, t) = correlated_gaussians(rng, n, rho);
        let z = SampleBatch::new(z)?;
        let zp = shuffle_batch(&z, rng.gen())?;
        let mut ctx = Ctx::build(store, differentiate, true, SpikeMode::Quantized);
        let tv = ctx.tape().constant(t);
        let e = jsd_mi_estimate(&mut ctx, &z, &zp, tv, &net)?;
        let value = ctx.value(e).item();
        if !differentiate {
            return Ok((value, Vec::new()));
        }
        let loss = ctx.tape().neg(e);
        ctx.tape().backward(loss)?;
        Ok((value, ctx.param_grads()))
    };
    for _ in 0..cfg.steps {
        let (_, grads) = estimate(&store, &mut rng, cfg.batch, true)?;
        opt.step(&mut store, &grads);
    }
    Ok(estimate(&store, &mut rng, cfg.eval_batch, false)?.0)
}
