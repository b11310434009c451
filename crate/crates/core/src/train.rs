//! Training loop on synthetic sequences.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amim::{jsd_mi_estimate, mi_loss, pool_template_features, pool_tokens, shuffle_batch, SampleBatch};
use crate::autodiff::{ParamStore, Tensor, Var};
use crate::bench::synth::{generate_sequence, SceneConfig, SyntheticScene};
use crate::error::{Error, Result};
use crate::head::boxes::{encode_box, BBox};
use crate::head::loss::{boxes_tensor, focal_loss, gaussian_target, giou_loss, l1_loss, similarity_loss, total_loss, LossTerms, LossWeights};
use crate::imaging::Image;
use crate::model::{ModelConfig, TrackerModel};
use crate::nn::Ctx;
use crate::optim::{AdamW, AdamWConfig};
use crate::sched::{AdaptiveWeightConfig, AdaptiveWeighter};
use crate::snn::rpm::{draw_layout, fuse_with_layout, Layout, TokenType};
use crate::track::crop_around;

/// How training pairs are cut from synthetic sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Frames per sampled clip; templates and search come from one clip.
    pub clip_length: usize,
    /// Uniform shift of the search centre, in units of `sqrt(w·h)`.
    pub center_jitter: f64,
    /// Log-uniform scale jitter of the search crop.
    pub scale_jitter: f64,
    pub search_factor: f64,
    pub template_factor: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { clip_length: 6, center_jitter: 0.5, scale_jitter: 0.2, search_factor: 4.0, template_factor: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
    /// Adds the mutual-information term.
    pub mim: bool,
    pub amim: AdaptiveWeightConfig,
    pub sampling: SamplingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
            mim: true,
            amim: AdaptiveWeightConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, d: String| Err(Error::Config { key: format!("train.{k}"), detail: d });
        if self.batch_size < 2 {
            return bad("batch_size", format!("must be >= 2, got {}", self.batch_size));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad("optimizer.lr", format!("must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad("optimizer", "betas in [0, 1), eps > 0, weight_decay >= 0".into());
        }
        self.loss.validate()?;
        self.amim.validate()?;
        let s = &self.sampling;
        if s.clip_length < 2 {
            return bad("sampling.clip_length", format!("must be >= 2, got {}", s.clip_length));
        }
        if !(s.center_jitter >= 0.0 && s.scale_jitter >= 0.0) {
            return bad("sampling.center_jitter", "jitter must be >= 0".into());
        }
        if !(s.search_factor > 0.0 && s.template_factor > 0.0) {
            return bad("sampling.search_factor", "crop factors must be positive".into());
        }
        Ok(())
    }
}

/// One row of the training log. Absent terms are left blank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
    pub sim: Option<f64>,
    pub mi: Option<f64>,
    pub estimate: Option<f64>,
    pub ema: f64,
    pub delta: f64,
    pub lambda_mi: f64,
    pub total: f64,
}

/// A training sample: the two templates, the search crop, and the ground
/// truth in search-crop pixels.
pub struct Sample {
    pub t1: Image,
    pub t2: Image,
    pub search: Image,
    pub gt: BBox,
}

/// Cuts one sample from a fresh synthetic clip.
pub fn draw_sample(rng: &mut ChaCha8Rng, model: &ModelConfig, scene: &SceneConfig, s: &SamplingConfig) -> Result<Sample> {
    let clip = SyntheticScene { seed: rng.gen(), config: scene.clone() };
    let (frames, boxes) = generate_sequence(&clip, s.clip_length)?;
    let last = s.clip_length - 1;
    let k = rng.gen_range(0..last);
    let b = &model.backbone;
    let (t1, _) = crop_around(&frames[0], (boxes[0].cx, boxes[0].cy), &boxes[0], s.template_factor, b.template_size)?;
    let (t2, _) = crop_around(&frames[k], (boxes[k].cx, boxes[k].cy), &boxes[k], s.template_factor, b.template_size)?;
    let gt = boxes[last];
    let side = (gt.w * gt.h).sqrt();
    let centre = (
        gt.cx + rng.gen_range(-1.0..=1.0) * s.center_jitter * side,
        gt.cy + rng.gen_range(-1.0..=1.0) * s.center_jitter * side,
    );
    let scale = (rng.gen_range(-1.0..=1.0) * s.scale_jitter).exp();
    let reference = BBox::new(centre.0, centre.1, gt.w * scale, gt.h * scale);
    let (search, tf) = crop_around(&frames[last], centre, &reference, s.search_factor, b.search_size)?;
    Ok(Sample { t1, t2, search, gt: tf.box_to_crop(&gt) })
}

/// Predicted `[B, 4]` boxes read at each sample's ground-truth cell.
fn boxes_at_cells(ctx: &mut Ctx<'_>, s: Var, o: Var, cells: &[(usize, usize)], stride: f64, size: f64) -> Result<Var> {
    let shape = ctx.tape().shape(s).to_vec();
    let (b, m) = (shape[0], shape[2]);
    let mm = m * m;
    let idx: Vec<usize> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, &(x, y))| (0..2).map(move |ch| i * 2 * mm + ch * mm + y * m + x))
        .collect();
    let pick = |ctx: &mut Ctx<'_>, v: Var| -> Result<Var> {
        let flat = ctx.tape().reshape(v, &[b * 2 * mm])?;
        let sel = ctx.tape().index_select(flat, 0, &idx)?;
        ctx.tape().reshape(sel, &[b, 2])
    };
    let off = pick(ctx, o)?;
    let sz = pick(ctx, s)?;
    let base = Tensor::new([b, 2], cells.iter().flat_map(|&(x, y)| [x as f64 * stride, y as f64 * stride]).collect())?;
    let base = ctx.tape().constant(base);
    let off = ctx.tape().scale(off, stride);
    let centre = ctx.tape().add(off, base)?;
    let wh = ctx.tape().scale(sz, size);
    ctx.tape().concat(&[centre, wh], 1)
}

fn any_zero_row(t: &Tensor) -> bool {
    let d = *t.shape().last().unwrap_or(&1);
    t.data().chunks(d.max(1)).any(|r| r.iter().all(|&v| v == 0.0))
}

pub struct Trainer {
    pub model: TrackerModel,
    pub store: ParamStore,
    pub cfg: TrainConfig,
    pub scene: SceneConfig,
    opt: AdamW,
    weighter: AdaptiveWeighter,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// Fresh model and optimizer state, all drawn from `cfg.seed`.
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, scene: &SceneConfig) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        scene.validate()?;
        let (store, model) = TrackerModel::new(model_cfg, cfg.seed)?;
        Ok(Self {
            model,
            store,
            cfg: cfg.clone(),
            scene: scene.clone(),
            opt: AdamW::new(cfg.optimizer),
            weighter: AdaptiveWeighter::new(cfg.amim),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimization step on a freshly drawn batch.
    pub fn step(&mut self) -> Result<LogRow> {
        let mut samples = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            samples.push(draw_sample(&mut self.rng, &self.model.cfg, &self.scene, &self.cfg.sampling)?);
        }
        let layout = draw_layout(self.rng.gen());
        let shuffle_seed: u64 = self.rng.gen();
        self.train_on(&samples, layout, shuffle_seed)
    }

    fn train_on(&mut self, samples: &[Sample], layout: Layout, shuffle_seed: u64) -> Result<LogRow> {
        let mut ctx = Ctx::train(&self.store);
        let weighter = &mut self.weighter;
        let mut ws = None;
        let g = loss_graph(&self.model, &mut ctx, samples, layout, shuffle_seed, &self.cfg, |giou| {
            let s = weighter.step(giou)?;
            ws = Some(s);
            Ok(s.lambda_mi)
        })?;
        let ws = ws.expect("weighter ran");
        let total_value = ctx.value(g.total).item();
        if !total_value.is_finite() {
            return Err(Error::invalid(format!("non-finite loss {total_value} at step {}", self.step)));
        }
        ctx.tape().backward(g.total)?;
        let t = g.terms;
        let row = LogRow {
            step: self.step,
            cls: ctx.value(t.cls).item(),
            giou: ws.giou,
            l1: ctx.value(t.l1).item(),
            sim: t.sim.map(|v| ctx.value(v).item()),
            mi: t.mi.map(|v| ctx.value(v).item()),
            estimate: g.estimate.map(|v| ctx.value(v).item()),
            ema: ws.ema_before,
            delta: ws.delta,
            lambda_mi: if self.cfg.mim { ws.lambda_mi } else { 0.0 },
            total: total_value,
        };
        let grads = ctx.param_grads();
        let bn = ctx.take_bn_updates();
        drop(ctx);
        self.opt.step(&mut self.store, &grads);
        bn.apply(&mut self.store);
        self.step += 1;
        Ok(row)
    }

    /// Runs the remaining steps, handing each row to `on_row`.
    pub fn run(&mut self, mut on_row: impl FnMut(&LogRow) -> Result<()>) -> Result<Vec<LogRow>> {
        let mut rows = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            let r = self.step()?;
            on_row(&r)?;
            rows.push(r);
        }
        Ok(rows)
    }
}

/// The loss terms of one batch.
pub struct LossGraph {
    pub terms: LossTerms,
    pub estimate: Option<Var>,
    pub total: Var,
}

/// Builds every loss term for `samples` on `ctx`'s tape. `mi_weight` maps
/// the batch's GIoU loss to `λ_MI`; it is called once per batch.
pub fn loss_graph(
    model: &TrackerModel,
    ctx: &mut Ctx<'_>,
    samples: &[Sample],
    layout: Layout,
    shuffle_seed: u64,
    cfg: &TrainConfig,
    mi_weight: impl FnOnce(f64) -> Result<f64>,
) -> Result<LossGraph> {
    let mcfg = &model.cfg;
    let bc = &mcfg.backbone;
    let stride = bc.patch_stride as f64;
    let size = bc.search_size as f64;
    let side = bc.map_side();
    let b = samples.len();

    let inputs = samples.iter().map(|s| fuse_with_layout(&s.t1, &s.t2, &s.search, layout)).collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(b);
    let mut target = Vec::with_capacity(b * side * side);
    for s in samples {
        let enc = encode_box(&s.gt, stride, side, size, size);
        cells.push((enc.x, enc.y));
        target.extend_from_slice(gaussian_target(side, enc.x, enc.y, s.gt.w / stride, s.gt.h / stride).data());
    }
    let target = Tensor::new([b, 1, side, side], target)?;
    let gt: Vec<BBox> = samples.iter().map(|s| s.gt).collect();
    let gt = boxes_tensor(&gt);

    let out = model.forward(ctx, &inputs)?;
    let cls = focal_loss(ctx.tape(), out.head.p, &target)?;
    let pred = boxes_at_cells(ctx, out.head.s, out.head.o, &cells, stride, size)?;
    let giou = giou_loss(ctx.tape(), pred, &gt)?;
    let l1 = l1_loss(ctx.tape(), pred, &gt, size, size)?;

    let feats = out.features.var();
    let t1 = pool_tokens(ctx.tape(), feats, &indices_of(&out.token_types, TokenType::Template1))?;
    let t2 = pool_tokens(ctx.tape(), feats, &indices_of(&out.token_types, TokenType::Template2))?;
    let sim = if any_zero_row(ctx.value(t1)) || any_zero_row(ctx.value(t2)) {
        None
    } else {
        Some(similarity_loss(ctx.tape(), t1, t2)?)
    };

    let lambda_mi = mi_weight(ctx.value(giou).item())?;
    let (mi, estimate) = if cfg.mim {
        let pairs: Vec<(&Image, &Image)> = samples.iter().map(|s| (&s.t1, &s.t2)).collect();
        let z = SampleBatch::new(model.template_batch(&pairs)?)?;
        let zp = shuffle_batch(&z, shuffle_seed)?;
        let t_z = pool_template_features(ctx.tape(), feats, &out.token_types, mcfg.stats_net.pooling)?;
        let est = jsd_mi_estimate(ctx, &z, &zp, t_z, &model.stats)?;
        (Some(mi_loss(ctx.tape(), est, lambda_mi)?), Some(est))
    } else {
        (None, None)
    };

    let terms = LossTerms { cls, giou, l1, sim, mi };
    let total = total_loss(ctx.tape(), &terms, &cfg.loss)?;
    Ok(LossGraph { terms, estimate, total })
}

fn indices_of(types: &[TokenType], t: TokenType) -> Vec<usize> {
    types.iter().enumerate().filter(|(_, &u)| u == t).map(|(i, _)| i).collect()
}

/// CSV training log with a fixed header.
pub struct LogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> LogWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        inner
            .write_record(["step", "cls", "giou", "l1", "sim", "mi", "estimate", "ema", "delta", "lambda_mi", "total"])
            .map_err(csv_err)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &LogRow) -> Result<()> {
        self.inner.serialize(r).map_err(csv_err)?;
        self.inner.flush().map_err(|e| Error::invalid(format!("training log: {e}")))
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner.into_inner().map_err(|e| Error::invalid(format!("training log: {e}")))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("training log: {e}"))
}

/// Mean GIoU loss over the first and last `window` rows.
pub fn giou_drop(rows: &[LogRow], window: usize) -> Option<(f64, f64)> {
    if window == 0 || rows.len() < window {
        return None;
    }
    let mean = |rs: &[LogRow]| rs.iter().map(|r| r.giou).sum::<f64>() / rs.len() as f64;
    Some((mean(&rows[..window]), mean(&rows[rows.len() - window..])))
}
