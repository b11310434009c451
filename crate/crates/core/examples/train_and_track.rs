//! Trains the desk preset for a few hundred steps, scores it on held-out
//! sequences and prints the boxes of one tracked sequence.
//!
//! cargo run --example train_and_track [steps]

use std::path::Path;

use spiketrack::bench::harness::{eval_sequences, evaluate};
use spiketrack::config::RunConfig;
use spiketrack::track::Tracker;
use spiketrack::train::{giou_drop, Trainer};

fn main() -> Result<(), spiketrack::Error> {
    let steps = std::env::args().nth(1).map(|s| s.parse().expect("steps is a number")).unwrap_or(300);
    let mut cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml"))?;
    cfg.train.steps = steps;
    let mut t = Trainer::new(&cfg.model, &cfg.train, &cfg.data)?;
    let log = t.run(|r| {
        if r.step % 50 == 0 {
            println!("step {:>5}  giou {:.3}  lambda_mi {:.3}", r.step, r.giou, r.lambda_mi);
        }
        Ok(())
    })?;
    if let Some((a, b)) = giou_drop(&log, (steps / 5).max(1)) {
        println!("smoothed GIoU loss {a:.3} -> {b:.3}");
    }
    let r = evaluate(&t.model, &t.store, &cfg.eval, &cfg.data)?;
    println!("held-out success AUC {:.3}, precision {:.3}", r.success_auc, r.precision_at_20);

    let mut one = cfg.eval.clone();
    one.sequences = 1;
    one.length = 12;
    let (frames, gt) = eval_sequences(&one, &cfg.data)?.remove(0);
    let boxes = Tracker::new(&t.model, &t.store, cfg.eval.track.clone()).track_sequence(&frames, &gt[0])?;
    for (i, (p, g)) in boxes.iter().zip(&gt).enumerate() {
        println!("frame {i:>2}  pred ({:6.1}, {:6.1}, {:5.1}, {:5.1})  iou {:.2}", p.cx, p.cy, p.w, p.h, p.iou(g));
    }
    Ok(())
}
