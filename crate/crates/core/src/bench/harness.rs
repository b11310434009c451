//! Held-out evaluation and multi-seed ablation runs.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::bench::metrics::{precision_score, success_auc, EvalResult};
use crate::bench::synth::{generate_sequence, SceneConfig, SyntheticScene};
use crate::config::{EvalConfig, RunConfig};
use crate::error::{Error, Result};
use crate::head::BBox;
use crate::imaging::Image;
use crate::model::TrackerModel;
use crate::track::Tracker;
use crate::train::{LogRow, Trainer};

/// The held-out sequences named by `cfg`.
pub fn eval_sequences(cfg: &EvalConfig, scene: &SceneConfig) -> Result<Vec<(Vec<Image>, Vec<BBox>)>> {
    (0..cfg.sequences as u64)
        .map(|i| generate_sequence(&SyntheticScene { seed: cfg.seed + i, config: scene.clone() }, cfg.length))
        .collect()
}

/// Tracks every held-out sequence from its first box and pools the frames
/// after the first.
pub fn evaluate(model: &TrackerModel, store: &ParamStore, cfg: &EvalConfig, scene: &SceneConfig) -> Result<EvalResult> {
    let tracker = Tracker::new(model, store, cfg.track.clone());
    let mut ious = Vec::new();
    let mut cles = Vec::new();
    for (frames, gt) in eval_sequences(cfg, scene)? {
        let pred = tracker.track_sequence(&frames, &gt[0])?;
        for (p, g) in pred.iter().zip(&gt).skip(1) {
            ious.push(p.iou(g).clamp(0.0, 1.0));
            cles.push(p.center_distance(g));
        }
    }
    Ok(EvalResult {
        precision_at_20: precision_score(&cles, cfg.precision_threshold)?,
        success_auc: success_auc(&ious)?,
        ious,
        cles,
    })
}

/// One arm of an ablation or sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub mim: bool,
    pub lambda_base: f64,
    pub beta: f64,
}

impl Variant {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.train.mim = self.mim;
        c.train.amim.lambda_base = self.lambda_base;
        c.train.amim.beta = self.beta;
        c
    }
}

/// Baseline, fixed-weight MI, and adaptive MI.
pub fn ablation_grid(lambda_base: f64, beta: f64) -> Vec<Variant> {
    vec![
        Variant { name: "baseline".into(), mim: false, lambda_base, beta: 0.0 },
        Variant { name: "mim".into(), mim: true, lambda_base, beta: 0.0 },
        Variant { name: "mim+adw".into(), mim: true, lambda_base, beta },
    ]
}

/// `λ_base ∈ {0.01, 0.1, 1}` at `β = 0`, then `β ∈ {0.1, …, 0.9}` at
/// `λ_base = 0.1`.
pub fn sensitivity_grid() -> Vec<Variant> {
    let mut g: Vec<Variant> = [0.01, 0.1, 1.0]
        .iter()
        .map(|&l| Variant { name: format!("lambda{l}_beta0"), mim: true, lambda_base: l, beta: 0.0 })
        .collect();
    g.extend(
        [0.1, 0.3, 0.5, 0.7, 0.9]
            .iter()
            .map(|&b| Variant { name: format!("lambda0.1_beta{b}"), mim: true, lambda_base: 0.1, beta: b }),
    );
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: String,
    pub mim: bool,
    pub lambda_base: f64,
    pub beta: f64,
    /// A seed, or `median` for a summary row.
    pub seed: String,
    pub succ: f64,
    pub prec: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<ReportRow>,
}

impl AblationReport {
    pub fn median_of(&self, config: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.config == config && r.seed == "median")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::invalid(format!("report: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("report: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Everything one training run produced.
pub struct RunOutcome {
    pub log: Vec<LogRow>,
    pub eval: EvalResult,
    pub store: ParamStore,
    pub model: TrackerModel,
}

/// Trains from `cfg.train.seed` and evaluates on the held-out set.
pub fn train_and_evaluate(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut t = Trainer::new(&cfg.model, &cfg.train, &cfg.data)?;
    let log = t.run(|_| Ok(()))?;
    let eval = evaluate(&t.model, &t.store, &cfg.eval, &cfg.data)?;
    Ok(RunOutcome { log, eval, store: t.store, model: t.model })
}

/// Trains every variant on every seed, identical apart from the variant's
/// own settings. Median rows follow each variant when there are several
/// seeds.
pub fn run_ablation(
    base: &RunConfig,
    grid: &[Variant],
    seeds: &[u64],
    mut on_run: impl FnMut(&ReportRow, &RunOutcome) -> Result<()>,
) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(Error::invalid("ablation grid is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let mut report = AblationReport::default();
    for v in grid {
        let mut succ = Vec::with_capacity(seeds.len());
        let mut prec = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = v.apply(base);
            cfg.train.seed = seed;
            let out = train_and_evaluate(&cfg)?;
            let row = ReportRow {
                config: v.name.clone(),
                mim: v.mim,
                lambda_base: v.lambda_base,
                beta: v.beta,
                seed: seed.to_string(),
                succ: out.eval.success_auc,
                prec: out.eval.precision_at_20,
            };
            on_run(&row, &out)?;
            succ.push(row.succ);
            prec.push(row.prec);
            report.rows.push(row);
        }
        if seeds.len() > 1 {
            report.rows.push(ReportRow {
                config: v.name.clone(),
                mim: v.mim,
                lambda_base: v.lambda_base,
                beta: v.beta,
                seed: "median".into(),
                succ: median(&succ),
                prec: median(&prec),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amim::StatsNetConfig;
    use crate::head::HeadConfig;
    use crate::model::ModelConfig;
    use crate::snn::BackboneConfig;

    pub(crate) fn tiny_run(steps: usize) -> RunConfig {
        let mut c = RunConfig {
            model: ModelConfig {
                backbone: BackboneConfig { embed_dim: 8, template_size: 32, search_size: 64, mlp_ratio: 2, ..Default::default() },
                head: HeadConfig { width: 4, ..Default::default() },
                stats_net: StatsNetConfig { hidden: 4, conv_channels: 2, conv_kernel: 4, ..Default::default() },
            },
            ..Default::default()
        };
        c.train.steps = steps;
        c.train.batch_size = 2;
        c.train.sampling.clip_length = 2;
        c.data = SceneConfig { frame_width: 96, frame_height: 96, min_size: 10.0, max_size: 16.0, ..Default::default() };
        c.eval.sequences = 2;
        c.eval.length = 4;
        c
    }

    #[test]
    fn grids_have_expected_shape() {
        let g = sensitivity_grid();
        assert_eq!(g.len(), 8);
        assert_eq!(g.iter().filter(|v| v.beta == 0.0).count(), 3);
        assert!(g[3..].iter().all(|v| v.lambda_base == 0.1));
        let a = ablation_grid(0.1, 0.5);
        assert_eq!(a.iter().map(|v| v.name.as_str()).collect::<Vec<_>>(), ["baseline", "mim", "mim+adw"]);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn one_config_one_seed_is_one_row() {
        let r = run_ablation(&tiny_run(1), &ablation_grid(0.1, 0.5)[..1], &[7], |_, _| Ok(())).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].seed, "7");
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("config,mim,lambda_base,beta,seed,succ,prec\n"), "{csv}");
    }

    #[test]
    fn three_by_three_adds_medians() {
        let mut runs = 0;
        let r = run_ablation(&tiny_run(1), &ablation_grid(0.1, 0.5), &[1, 2, 3], |_, out| {
            runs += 1;
            assert!(out.log.len() == 1);
            Ok(())
        })
        .unwrap();
        assert_eq!(runs, 9);
        assert_eq!(r.rows.len(), 12);
        assert_eq!(r.rows.iter().filter(|x| x.seed == "median").count(), 3);
        let m = r.median_of("mim").unwrap();
        let per: Vec<f64> = r.rows.iter().filter(|x| x.config == "mim" && x.seed != "median").map(|x| x.succ).collect();
        assert_eq!(m.succ, median(&per));
    }

    #[test]
    fn fixed_weight_rows_log_constant_lambda() {
        let mut c = tiny_run(3);
        c.train.amim.lambda_base = 0.3;
        run_ablation(&c, &ablation_grid(0.3, 0.5)[1..2], &[0], |_, out| {
            assert!(out.log.iter().all(|r| r.lambda_mi == 0.3));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn empty_grid_is_an_error() {
        assert!(run_ablation(&tiny_run(1), &[], &[0], |_, _| Ok(())).is_err());
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let c = tiny_run(0);
        for (_, gt) in eval_sequences(&c.eval, &c.data).unwrap() {
            let r = EvalResult::from_boxes(&gt, &gt).unwrap();
            assert_eq!(r.precision_at_20, 1.0);
            assert_eq!(r.success_auc, 20.0 / 21.0);
        }
    }
}
