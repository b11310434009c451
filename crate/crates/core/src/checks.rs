//! Finite-difference gradient checks over every differentiable piece of
//! the tracker, runnable outside the test harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::amim::{jsd_mi_estimate, mi_loss, shuffle_batch, SampleBatch, StatisticsNetwork, StatsNetConfig};
use crate::autodiff::{gradcheck_with, BnMode, GradcheckOpts, GradcheckReport, ParamKind, ParamStore, SpikeFn, SpikeMode, Surrogate, Tape, Tensor, Var};
use crate::bench::synth::SceneConfig;
use crate::error::{Error, Result};
use crate::head::loss::{boxes_tensor, focal_loss, gaussian_target, giou_loss, l1_loss, similarity_loss, total_loss, LossTerms, LossWeights};
use crate::head::{BBox, Branch, CenterHead, HeadConfig};
use crate::model::{ModelConfig, TrackerModel};
use crate::nn::{gradcheck_params, Ctx};
use crate::snn::rpm::{token_types, Layout};
use crate::snn::{add_embeddings, Backbone, BackboneConfig, MultiSpikeNeuron, SpikeVar, TokenType};
use crate::train::{draw_sample, loss_graph, SamplingConfig, TrainConfig};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn outcome(name: &str, r: &GradcheckReport) -> CheckOutcome {
    CheckOutcome { name: name.into(), max_rel_err: r.max_rel_err, passed: r.passed() }
}

fn point(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Pulls values away from `kinks` so central differences stay on one
/// smooth piece.
fn avoid(t: Tensor, kinks: &[f64], gap: f64) -> Tensor {
    t.map(|v| match kinks.iter().find(|&&k| (v - k).abs() < gap) {
        Some(&k) => k + if v >= k { gap } else { -gap },
        None => v,
    })
}

fn opts() -> GradcheckOpts {
    GradcheckOpts { tol: TOLERANCE, ..Default::default() }
}

/// Weighted sum so every output element gets a distinct cotangent.
fn probe(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = t.constant(Tensor::from_fn(shape, |i| 0.5 + ((i * 37) % 11) as f64 / 10.0));
    let z = t.mul(y, w)?;
    Ok(t.sum(z))
}

type Op = fn(&mut Tape, Var) -> Result<Var>;

fn primitive_checks(out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let unary: Vec<(&str, Op, &[f64])> = vec![
        ("neg", |t, x| Ok(t.neg(x)), &[]),
        ("scale", |t, x| Ok(t.scale(x, -1.7)), &[]),
        ("add_scalar", |t, x| { let y = t.add_scalar(x, 0.3); Ok(t.square(y)) }, &[]),
        ("exp", |t, x| Ok(t.exp(x)), &[]),
        ("log", |t, x| { let a = t.square(x); let a = t.add_scalar(a, 0.2); Ok(t.log(a)) }, &[]),
        ("softplus", |t, x| Ok(t.softplus(x)), &[]),
        ("sigmoid", |t, x| Ok(t.sigmoid(x)), &[]),
        ("tanh", |t, x| Ok(t.tanh(x)), &[]),
        ("relu", |t, x| Ok(t.relu(x)), &[0.0]),
        ("sqrt", |t, x| { let a = t.square(x); let a = t.add_scalar(a, 0.1); Ok(t.sqrt(a)) }, &[]),
        ("abs", |t, x| Ok(t.abs(x)), &[0.0]),
        ("square", |t, x| Ok(t.square(x)), &[]),
        ("clamp", |t, x| Ok(t.clamp(x, -0.5, 0.7)), &[-0.5, 0.7]),
        ("clamp_min", |t, x| Ok(t.clamp_min(x, 0.2)), &[0.2]),
    ];
    for (name, op, kinks) in unary {
        let p = avoid(point(&mut rng, &[3, 4], -1.5, 1.5), kinks, 0.01);
        let r = gradcheck_with(|t, x| { let y = op(t, x)?; probe(t, y) }, &p, opts())?;
        out.push(outcome(name, &r));
    }

    let other = point(&mut rng, &[4], 0.5, 1.5);
    let binary: Vec<(&str, fn(&mut Tape, Var, Var) -> Result<Var>)> = vec![
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(b, a)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(b, a)),
        ("minimum", |t, a, b| t.minimum(a, b)),
        ("maximum", |t, a, b| t.maximum(b, a)),
    ];
    for (name, op) in binary {
        let p = point(&mut rng, &[3, 4], 2.0, 3.0);
        let r = gradcheck_with(
            |t, x| {
                let o = t.constant(other.clone());
                let y = op(t, x, o)?;
                probe(t, y)
            },
            &p,
            opts(),
        )?;
        out.push(outcome(&format!("{name} (broadcast)"), &r));
    }

    let p = point(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let reductions: Vec<(&str, Op)> = vec![
        ("sum", |t, x| { let s = t.square(x); Ok(t.sum(s)) }),
        ("mean", |t, x| { let s = t.square(x); Ok(t.mean(s)) }),
        ("sum_axis", |t, x| { let y = t.sum_axis(x, 1)?; probe(t, y) }),
        ("mean_axis", |t, x| { let y = t.mean_axis(x, 2)?; let y = t.square(y); probe(t, y) }),
        ("reshape", |t, x| { let y = t.reshape(x, &[6, 4])?; let y = t.square(y); probe(t, y) }),
        ("permute", |t, x| { let y = t.permute(x, &[2, 0, 1])?; let y = t.square(y); probe(t, y) }),
        ("transpose", |t, x| { let y = t.transpose(x)?; let y = t.square(y); probe(t, y) }),
        ("concat", |t, x| { let y = t.concat(&[x, x], 1)?; let y = t.square(y); probe(t, y) }),
        ("narrow", |t, x| { let y = t.narrow(x, 2, 1, 2)?; let y = t.square(y); probe(t, y) }),
        ("index_select", |t, x| { let y = t.index_select(x, 1, &[2, 0, 2])?; let y = t.square(y); probe(t, y) }),
    ];
    for (name, op) in reductions {
        let r = gradcheck_with(op, &p, opts())?;
        out.push(outcome(name, &r));
    }

    let w = point(&mut rng, &[4, 3], -1.0, 1.0);
    let r = gradcheck_with(
        |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv)?;
            let y = t.square(y);
            probe(t, y)
        },
        &p,
        opts(),
    )?;
    out.push(outcome("matmul", &r));
    for (ta, tb) in [(true, false), (false, true), (true, true)] {
        let r = gradcheck_with(
            |t, x| {
                let other = if ta && tb { t.transpose(x)? } else { x };
                let y = t.matmul_t(x, other, ta, tb)?;
                let y = t.square(y);
                probe(t, y)
            },
            &p,
            opts(),
        )?;
        out.push(outcome(&format!("matmul_t ta={ta} tb={tb}"), &r));
    }

    let x0 = point(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
    let w0 = point(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let b0 = point(&mut rng, &[3], -0.5, 0.5);
    let conv = |t: &mut Tape, x: Var, w: Var, b: Var| -> Result<Var> {
        let y = t.conv2d(x, w, Some(b), 2, 1)?;
        let y = t.tanh(y);
        probe(t, y)
    };
    let r = gradcheck_with(|t, x| { let w = t.constant(w0.clone()); let b = t.constant(b0.clone()); conv(t, x, w, b) }, &x0, opts())?;
    out.push(outcome("conv2d input", &r));
    let r = gradcheck_with(|t, w| { let x = t.constant(x0.clone()); let b = t.constant(b0.clone()); conv(t, x, w, b) }, &w0, opts())?;
    out.push(outcome("conv2d weight", &r));
    let r = gradcheck_with(|t, b| { let x = t.constant(x0.clone()); let w = t.constant(w0.clone()); conv(t, x, w, b) }, &b0, opts())?;
    out.push(outcome("conv2d bias", &r));

    let gamma = point(&mut rng, &[2], 0.5, 1.5);
    let beta = point(&mut rng, &[2], -0.5, 0.5);
    let bn = |t: &mut Tape, x: Var, g: Var, b: Var, train: bool| -> Result<Var> {
        let mode = if train { BnMode::Train { eps: 1e-5 } } else { BnMode::Eval { mean: &[0.1, -0.2], var: &[0.8, 1.3], eps: 1e-5 } };
        let (y, _) = t.batchnorm(x, g, b, 1, mode)?;
        let y = t.tanh(y);
        probe(t, y)
    };
    for train in [true, false] {
        let tag = if train { "train" } else { "eval" };
        let r = gradcheck_with(|t, x| { let g = t.constant(gamma.clone()); let b = t.constant(beta.clone()); bn(t, x, g, b, train) }, &x0, opts())?;
        out.push(outcome(&format!("batchnorm {tag} input"), &r));
        let r = gradcheck_with(|t, g| { let x = t.constant(x0.clone()); let b = t.constant(beta.clone()); bn(t, x, g, b, train) }, &gamma, opts())?;
        out.push(outcome(&format!("batchnorm {tag} gamma"), &r));
        let r = gradcheck_with(|t, b| { let x = t.constant(x0.clone()); let g = t.constant(gamma.clone()); bn(t, x, g, b, train) }, &beta, opts())?;
        out.push(outcome(&format!("batchnorm {tag} beta"), &r));
    }
    Ok(())
}

fn spike_checks(out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (name, surrogate) in [("straight-through", Surrogate::StraightThrough), ("arctan", Surrogate::Arctan { width: 0.5 })] {
        let f = SpikeFn { threshold: 0.8, t_max: 4, surrogate };
        // kinks at the clip ends and at the rounding boundaries
        let kinks: Vec<f64> = (0..=9).map(|k| 0.4 * k as f64).collect();
        let p = avoid(point(&mut rng, &[20], -0.5, 3.8), &kinks, 0.01);
        let r = gradcheck_with(|t, x| { let y = t.spike(x, f); probe(t, y) }, &p, opts())?;
        out.push(outcome(&format!("spike {name} (relaxed)"), &r));

        // quantized backward must equal the surrogate's closed form
        let mut tape = Tape::with_spike_mode(SpikeMode::Quantized);
        let x = tape.leaf(p.clone(), true);
        let y = tape.spike(x, f);
        let s = tape.sum(y);
        tape.backward(s)?;
        let g = tape.grad(x).cloned().unwrap_or_else(|| Tensor::zeros([20]));
        let err = g.data().iter().zip(p.data()).map(|(a, &m)| (a - f.surrogate_grad(m)).abs()).fold(0.0, f64::max);
        out.push(CheckOutcome { name: format!("spike {name} surrogate form"), max_rel_err: err, passed: err < 1e-10 });
    }
    Ok(())
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { embed_dim: 8, template_size: 32, search_size: 64, mlp_ratio: 2, ..Default::default() },
        head: HeadConfig { width: 4, ..Default::default() },
        stats_net: StatsNetConfig { hidden: 4, conv_channels: 2, conv_kernel: 4, ..Default::default() },
    }
}

fn trainable(store: &ParamStore, prefix: &str) -> Vec<crate::autodiff::ParamId> {
    store.iter().filter(|(_, e)| e.kind == ParamKind::Trainable && e.name.starts_with(prefix)).map(|(i, _)| i).collect()
}

fn module_checks(out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);

    // embeddings
    let types = [TokenType::Template1, TokenType::Search, TokenType::Template2];
    let pt = point(&mut rng, &[3 * 4 + 5 * 4 + 3 * 4], -1.0, 1.0);
    let r = gradcheck_with(
        |t, p| {
            let tok = t.narrow(p, 0, 0, 12)?;
            let tok = t.reshape(tok, &[3, 4])?;
            let pos = t.narrow(p, 0, 12, 20)?;
            let pos = t.reshape(pos, &[5, 4])?;
            let ty = t.narrow(p, 0, 32, 12)?;
            let ty = t.reshape(ty, &[3, 4])?;
            let y = add_embeddings(t, tok, pos, ty, &[4, 0, 2], &types)?;
            let y = t.square(y);
            probe(t, y)
        },
        &pt,
        opts(),
    )?;
    out.push(outcome("position/type embeddings", &r));

    // backbone, one block at a time
    let cfg = BackboneConfig { embed_dim: 4, template_size: 16, search_size: 32, patch_stride: 8, pixel_pool: 4, mlp_ratio: 2, num_blocks: 1, ..Default::default() };
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, &cfg, &mut rng)?;
    let n = cfg.num_tokens();
    let toks = point(&mut rng, &[2, n, cfg.token_features()], -0.5, 0.5);
    let tt = token_types(Layout::Horizontal, cfg.template_size, cfg.patch_stride);
    let pos: Vec<usize> = (0..n).collect();
    let relaxed = GradcheckOpts { spike_mode: SpikeMode::Relaxed, ..opts() };
    for prefix in ["backbone.stem", "backbone.block0."] {
        let ids = trainable(&store, prefix);
        let r = gradcheck_params(&store, &ids, true, relaxed, |ctx| {
            let t = ctx.tape().constant(toks.clone());
            let y = bb.forward(ctx, t, &pos, &tt)?;
            probe(ctx.tape(), y.var())
        })?;
        out.push(outcome(&format!("backbone {prefix}*"), &r));
    }

    // head branches
    let mut store = ParamStore::new();
    let head = CenterHead::new(&mut store, 3, &HeadConfig { width: 2, cls_bias: 0.0 }, &mut rng)?;
    let input = Tensor::from_fn([2, 9, 3], |_| rng.gen_range(0..5) as f64);
    let neuron = MultiSpikeNeuron::default();
    for br in [Branch::Cls, Branch::Size, Branch::Offset] {
        let ids = trainable(&store, &format!("head.{}.", br.name()));
        let branch = head.branch(br);
        let r = gradcheck_params(&store, &ids, true, relaxed, |ctx| {
            let t = ctx.tape().constant(input.clone());
            let x = CenterHead::to_map(ctx, SpikeVar::rearranged(t))?;
            let y = branch.forward(ctx, x, &neuron)?;
            probe(ctx.tape(), y)
        })?;
        out.push(outcome(&format!("head {} branch", br.name()), &r));
    }

    // losses
    let target = gaussian_target(5, 2, 1, 2.0, 1.5).reshape([1, 1, 5, 5])?;
    let p = point(&mut rng, &[1, 1, 5, 5], 0.05, 0.95);
    let r = gradcheck_with(|t, x| focal_loss(t, x, &target), &p, opts())?;
    out.push(outcome("focal loss", &r));
    let gt = boxes_tensor(&[BBox::new(10.0, 12.0, 6.0, 4.0), BBox::new(30.0, 20.0, 8.0, 9.0)]);
    let pred = Tensor::new([2, 4], vec![11.0, 11.7, 5.0, 5.0, 27.0, 23.0, 10.0, 7.0])?;
    let r = gradcheck_with(|t, x| giou_loss(t, x, &gt), &pred, opts())?;
    out.push(outcome("giou loss", &r));
    let r = gradcheck_with(|t, x| l1_loss(t, x, &gt, 64.0, 48.0), &pred, opts())?;
    out.push(outcome("l1 loss", &r));
    let ab = point(&mut rng, &[2, 2, 3], 0.1, 1.0);
    let r = gradcheck_with(
        |t, x| {
            let a = t.narrow(x, 0, 0, 1)?;
            let a = t.reshape(a, &[2, 3])?;
            let b = t.narrow(x, 0, 1, 1)?;
            let b = t.reshape(b, &[2, 3])?;
            similarity_loss(t, a, b)
        },
        &ab,
        opts(),
    )?;
    out.push(outcome("similarity loss", &r));
    let terms = point(&mut rng, &[5], 0.1, 1.0);
    let r = gradcheck_with(
        |t, x| {
            let pick = |t: &mut Tape, i| -> Result<Var> { let v = t.narrow(x, 0, i, 1)?; t.reshape(v, &[]) };
            let lt = LossTerms { cls: pick(t, 0)?, giou: pick(t, 1)?, l1: pick(t, 2)?, sim: Some(pick(t, 3)?), mi: Some(pick(t, 4)?) };
            total_loss(t, &lt, &LossWeights::default())
        },
        &terms,
        opts(),
    )?;
    out.push(outcome("total loss", &r));

    // statistics networks and the estimator
    let sc = StatsNetConfig { hidden: 4, conv_channels: 2, conv_kernel: 2, ..Default::default() };
    let mut store = ParamStore::new();
    let img_net = StatisticsNetwork::for_images(&mut store, 2, 4, 3, &sc, &mut rng)?;
    let z = SampleBatch::new(point(&mut rng, &[3, 2, 4, 4], -0.5, 0.5))?;
    let zp = shuffle_batch(&z, 5)?;
    let feats = point(&mut rng, &[3, 3], 0.0, 2.0);
    let ids = trainable(&store, "stats.");
    let r = gradcheck_params(&store, &ids, false, opts(), |ctx| {
        let t = ctx.tape().constant(feats.clone());
        let e = jsd_mi_estimate(ctx, &z, &zp, t, &img_net)?;
        mi_loss(ctx.tape(), e, 0.7)
    })?;
    out.push(outcome("mi estimator (image statistics network)", &r));
    let mut store = ParamStore::new();
    let vec_net = StatisticsNetwork::for_vectors(&mut store, 2, 3, &sc, &mut rng);
    // zero biases put a relu exactly on its kink whenever a whole hidden row is off
    for id in trainable(&store, "stats.") {
        if store.entry(id).name.ends_with(".bias") {
            let b = point(&mut rng, store.get(id).shape(), 0.05, 0.2);
            *store.get_mut(id) = b;
        }
    }
    let zv = SampleBatch::new(point(&mut rng, &[4, 2], -1.0, 1.0))?;
    let zvp = shuffle_batch(&zv, 6)?;
    let fv = point(&mut rng, &[4, 3], -1.0, 1.0);
    let ids = trainable(&store, "stats.");
    let r = gradcheck_params(&store, &ids, false, opts(), |ctx| {
        let t = ctx.tape().constant(fv.clone());
        jsd_mi_estimate(ctx, &zv, &zvp, t, &vec_net)
    })?;
    out.push(outcome("mi estimator (vector statistics network)", &r));
    let r = gradcheck_with(
        |t, f| {
            let mut ctx = Ctx::from_tape(&store, std::mem::take(t), false);
            let e = jsd_mi_estimate(&mut ctx, &zv, &zvp, f, &vec_net)?;
            *t = ctx.into_tape();
            Ok(e)
        },
        &fv,
        opts(),
    )?;
    out.push(outcome("mi estimator wrt features", &r));
    Ok(())
}

fn full_model_check(out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mcfg = tiny_model();
    let (store, model) = TrackerModel::new(&mcfg, 21)?;
    let scene = SceneConfig { frame_width: 96, frame_height: 96, min_size: 10.0, max_size: 16.0, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let sampling = SamplingConfig { clip_length: 2, ..Default::default() };
    let samples = (0..2).map(|_| draw_sample(&mut rng, &mcfg, &scene, &sampling)).collect::<Result<Vec<_>>>()?;
    let cfg = TrainConfig::default();
    // one small tensor from each part of the network
    let names = [
        "backbone.stem_bn.gamma",
        "backbone.type_embed",
        "backbone.block0.attn_bn.beta",
        "backbone.block1.fc2_bn.gamma",
        "head.cls.out.bias",
        "head.size.bn0.beta",
        "head.offset.out.bias",
        "stats.head2.weight",
        "stats.t_fc2.bias",
    ];
    let ids = names
        .iter()
        .map(|n| store.id(n).ok_or_else(|| Error::invalid(format!("no parameter `{n}`"))))
        .collect::<Result<Vec<_>>>()?;
    let relaxed = GradcheckOpts { spike_mode: SpikeMode::Relaxed, ..opts() };
    let r = gradcheck_params(&store, &ids, true, relaxed, |ctx| {
        let g = loss_graph(&model, ctx, &samples, Layout::Vertical, 3, &cfg, |_| Ok(0.4))?;
        Ok(g.total)
    })?;
    out.push(CheckOutcome { name: format!("full tiny model total loss ({} tensors)", ids.len()), ..outcome("", &r) });
    Ok(())
}

/// Runs every check. Each outcome carries its own pass flag.
pub fn gradcheck_suite() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    primitive_checks(&mut out)?;
    spike_checks(&mut out)?;
    module_checks(&mut out)?;
    full_model_check(&mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_suite_passes() {
        let out = gradcheck_suite().unwrap();
        assert!(out.len() > 30);
        let bad: Vec<_> = out.iter().filter(|o| !o.passed).collect();
        assert!(bad.is_empty(), "{bad:?}");
    }

    #[test]
    fn avoid_moves_points_off_kinks() {
        let t = avoid(Tensor::from_vec(vec![0.001, -0.002, 0.5]), &[0.0], 0.01);
        assert_eq!(t.data(), &[0.01, -0.01, 0.5]);
    }
}
