//! Baseline, fixed-weight MI and adaptive MI on distractor-heavy scenes.
//!
//! cargo run --example ablation [steps] [seeds]

use std::path::Path;

use spiketrack::bench::harness::{ablation_grid, run_ablation};
use spiketrack::config::RunConfig;

fn main() -> Result<(), spiketrack::Error> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map(|s| s.parse().expect("steps is a number")).unwrap_or(200);
    let seeds: u64 = args.next().map(|s| s.parse().expect("seeds is a number")).unwrap_or(2);
    let mut base = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml"))?;
    base.data.distractors = 3;
    base.train.steps = steps;
    let grid = ablation_grid(base.train.amim.lambda_base, base.train.amim.beta);
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = run_ablation(&base, &grid, &seeds, |row, _| {
        eprintln!("{:<9} seed {}  succ {:.3}", row.config, row.seed, row.succ);
        Ok(())
    })?;
    print!("{}", report.to_csv()?);
    Ok(())
}
