//! Generates held-out synthetic sequences, writes one to disk, and scores
//! two reference trackers: ground truth and a box frozen at frame 0.
//!
//! cargo run --example synthetic_benchmark [out_dir]

use std::path::PathBuf;

use spiketrack::bench::harness::eval_sequences;
use spiketrack::bench::{EvalResult, SceneConfig};
use spiketrack::config::EvalConfig;
use spiketrack::seqio::write_sequence;

fn main() -> Result<(), spiketrack::Error> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("spiketrack-seq"));
    let eval = EvalConfig::default();
    for (name, scene) in [("easy", SceneConfig::easy()), ("distractors", SceneConfig::distractor_heavy())] {
        let seqs = eval_sequences(&eval, &scene)?;
        let mut truth = Vec::new();
        let mut frozen = Vec::new();
        for (_, gt) in &seqs {
            truth.push(EvalResult::from_boxes(&gt[1..], &gt[1..])?);
            frozen.push(EvalResult::from_boxes(&vec![gt[0]; gt.len() - 1], &gt[1..])?);
        }
        let (t, f) = (EvalResult::merge(&truth)?, EvalResult::merge(&frozen)?);
        println!("{name:<12} truth: succ {:.3} prec {:.3}   frozen box: succ {:.3} prec {:.3}", t.success_auc, t.precision_at_20, f.success_auc, f.precision_at_20);
        if name == "distractors" {
            let (frames, gt) = &seqs[0];
            write_sequence(&out, frames, gt)?;
            println!("wrote {} frames to {}", frames.len(), out.display());
        }
    }
    Ok(())
}
