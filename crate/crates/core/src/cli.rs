//! The `spiketrack` command line.
//!
//! Every command that writes anything writes under a run directory:
//!
//! ```text
//! <run>/config.toml        config snapshot
//! <run>/checkpoint.json    parameters and BN buffers
//! <run>/logs/              training logs (CSV)
//! <run>/results/           per-sequence box files
//! <run>/reports/           evaluation, ablation, energy and check reports
//! ```

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::autodiff::{Checkpoint, ParamStore};
use crate::bench::harness::{ablation_grid, evaluate, run_ablation, sensitivity_grid, Variant};
use crate::bench::metrics::EvalResult;
use crate::checks::gradcheck_suite;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{synthetic_batch, TrackerModel};
use crate::seqio::{read_sequence, write_boxes};
use crate::track::Tracker;
use crate::train::{LogRow, LogWriter, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CHECK: i32 = 2;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "logs/train_log.csv";

#[derive(Debug, Parser)]
#[command(name = "spiketrack", version, about = "Spiking-transformer single-object tracker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file; writes the snapshot, checkpoint and log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track one sequence directory with a trained run.
    Track {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// Results file; defaults to `<run>/results/<sequence name>.txt`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a trained run on held-out synthetic sequences, or on the
    /// given sequence directories.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        sequence: Vec<PathBuf>,
    },
    /// Baseline, fixed-weight MI and adaptive MI over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Sensitivity sweep over `lambda_base` and `beta`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck {
        /// Run directory for `reports/gradcheck.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer synaptic operation and energy report of a trained run.
    ProfileEnergy {
        #[arg(long)]
        run: PathBuf,
        /// Synthetic samples used to measure firing rates.
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

pub fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let (steps, every) = (cfg.train.steps, (cfg.train.steps / 20).max(1));
            cmd_train(&cfg, &out, |row| {
                if row.step % every == 0 || row.step + 1 == steps {
                    eprintln!("step {:>6}  giou {:.4}  total {:.4}  lambda_mi {:.4}", row.step, row.giou, row.total, row.lambda_mi);
                }
            })?;
            Ok(EXIT_OK)
        }
        Command::Track { run, sequence, output } => {
            let path = cmd_track(&run, &sequence, output.as_deref())?;
            println!("{}", path.display());
            Ok(EXIT_OK)
        }
        Command::Eval { run, sequence } => {
            let r = cmd_eval(&run, &sequence)?;
            println!("success_auc {:.4}  precision {:.4}  frames {}", r.success_auc, r.precision, r.frames);
            Ok(EXIT_OK)
        }
        Command::Ablate { config, out, seeds } => {
            let cfg = RunConfig::load(&config)?;
            let grid = ablation_grid(cfg.train.amim.lambda_base, cfg.train.amim.beta);
            print!("{}", cmd_grid(&cfg, &grid, &seeds, &out, "ablation.csv")?);
            Ok(EXIT_OK)
        }
        Command::Sweep { config, out, seeds } => {
            let cfg = RunConfig::load(&config)?;
            print!("{}", cmd_grid(&cfg, &sensitivity_grid(), &seeds, &out, "sweep.csv")?);
            Ok(EXIT_OK)
        }
        Command::Gradcheck { out } => Ok(if cmd_gradcheck(out.as_deref())? { EXIT_OK } else { EXIT_CHECK }),
        Command::ProfileEnergy { run, batch, seed } => {
            println!("{}", cmd_profile_energy(&run, batch, seed)?);
            Ok(EXIT_OK)
        }
    }
}

fn mkdirs(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, contents: &str) -> Result<()> {
    if let Some(d) = p.parent() {
        mkdirs(d)?;
    }
    fs::write(p, contents).map_err(|e| Error::io(p, e))
}

/// Trains `cfg` into `out`, handing each logged row to `progress`;
/// `steps = 0` leaves the initial parameters.
pub fn cmd_train(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&LogRow)) -> Result<()> {
    cfg.validate()?;
    mkdirs(&out.join("logs"))?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    let log_path = out.join(TRAIN_LOG);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = LogWriter::new(file)?;
    let mut t = Trainer::new(&cfg.model, &cfg.train, &cfg.data)?;
    t.run(|row| {
        log.write(row)?;
        progress(row);
        Ok(())
    })?;
    Checkpoint::from_store(&t.store).save(&out.join(CHECKPOINT_FILE))
}

/// The config snapshot and parameters of a run directory. Fails when the
/// checkpoint does not fit the configured architecture.
pub fn load_run(run: &Path) -> Result<(RunConfig, TrackerModel, ParamStore)> {
    let cfg = RunConfig::load(&run.join(CONFIG_FILE))?;
    let (mut store, model) = TrackerModel::new(&cfg.model, cfg.train.seed)?;
    let saved = Checkpoint::load(&run.join(CHECKPOINT_FILE))?.to_store()?;
    store.load_from(&saved)?;
    Ok((cfg, model, store))
}

/// One box line per frame.
pub fn cmd_track(run: &Path, sequence: &Path, output: Option<&Path>) -> Result<PathBuf> {
    let (cfg, model, store) = load_run(run)?;
    let seq = read_sequence(sequence)?;
    let boxes = Tracker::new(&model, &store, cfg.eval.track.clone()).track_sequence(&seq.frames, &seq.groundtruth[0])?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            let name = sequence.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "sequence".into());
            run.join("results").join(format!("{name}.txt"))
        }
    };
    if let Some(d) = path.parent() {
        mkdirs(d)?;
    }
    write_boxes(&path, &boxes)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub frames: usize,
    pub success_auc: f64,
    pub precision: f64,
    pub precision_threshold: f64,
}

/// Writes `reports/eval.json`. Sequence directories need ground truth for
/// every frame; frame 0 is the initialisation and is not scored.
pub fn cmd_eval(run: &Path, sequences: &[PathBuf]) -> Result<EvalReport> {
    let (cfg, model, store) = load_run(run)?;
    let (result, n) = if sequences.is_empty() {
        (evaluate(&model, &store, &cfg.eval, &cfg.data)?, cfg.eval.sequences)
    } else {
        let tracker = Tracker::new(&model, &store, cfg.eval.track.clone());
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for dir in sequences {
            let seq = read_sequence(dir)?;
            if seq.groundtruth.len() != seq.frames.len() {
                return Err(Error::invalid(format!(
                    "{}: {} frames but {} ground-truth boxes",
                    dir.display(),
                    seq.frames.len(),
                    seq.groundtruth.len()
                )));
            }
            let boxes = tracker.track_sequence(&seq.frames, &seq.groundtruth[0])?;
            pred.extend_from_slice(&boxes[1..]);
            gt.extend_from_slice(&seq.groundtruth[1..]);
        }
        (EvalResult::from_boxes_with(&pred, &gt, cfg.eval.precision_threshold)?, sequences.len())
    };
    let report = EvalReport {
        sequences: n,
        frames: result.ious.len(),
        success_auc: result.success_auc,
        precision: result.precision_at_20,
        precision_threshold: cfg.eval.precision_threshold,
    };
    write_file(&run.join("reports/eval.json"), &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    Ok(report)
}

/// Trains every variant on every seed; writes one log per run and the
/// report CSV, which is also returned.
pub fn cmd_grid(base: &RunConfig, grid: &[Variant], seeds: &[u64], out: &Path, report: &str) -> Result<String> {
    base.validate()?;
    mkdirs(&out.join("logs"))?;
    write_file(&out.join(CONFIG_FILE), &base.to_toml())?;
    let r = run_ablation(base, grid, seeds, |row, outcome| {
        let path = out.join("logs").join(format!("{}-seed{}.csv", row.config, row.seed));
        let mut log = LogWriter::new(Vec::new())?;
        for l in &outcome.log {
            log.write(l)?;
        }
        write_file(&path, &String::from_utf8(log.into_inner()?).expect("csv is utf-8"))?;
        eprintln!("{:<20} seed {:<4} succ {:.4}  prec {:.4}", row.config, row.seed, row.succ, row.prec);
        Ok(())
    })?;
    let csv = r.to_csv()?;
    write_file(&out.join("reports").join(report), &csv)?;
    Ok(csv)
}

/// Prints one line per check; `Ok(false)` when any check fails.
pub fn cmd_gradcheck(out: Option<&Path>) -> Result<bool> {
    let outcomes = gradcheck_suite()?;
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for o in &outcomes {
        let _ = writeln!(w, "{} {:>9.2e}  {}", if o.passed { "PASS" } else { "FAIL" }, o.max_rel_err, o.name);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let _ = writeln!(w, "{} checks, {failed} failed", outcomes.len());
    if let Some(dir) = out {
        write_file(&dir.join("reports/gradcheck.json"), &(serde_json::to_string_pretty(&outcomes).expect("report serializes") + "\n"))?;
    }
    Ok(failed == 0)
}

/// Energy JSON with rates measured on `batch` synthetic samples; also
/// written to `reports/energy.json`.
pub fn cmd_profile_energy(run: &Path, batch: usize, seed: u64) -> Result<String> {
    if batch == 0 {
        return Err(Error::invalid("--batch must be at least 1"));
    }
    let (cfg, model, store) = load_run(run)?;
    let inputs = synthetic_batch(&cfg.model, &cfg.data, batch, seed)?;
    let json = model.profile_energy(&store, &inputs, cfg.energy.e_mac, cfg.energy.e_ac)?.to_json();
    write_file(&run.join("reports/energy.json"), &(json.clone() + "\n"))?;
    Ok(json)
}
