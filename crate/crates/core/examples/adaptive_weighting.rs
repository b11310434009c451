//! The MI weight following a noisy, slowly falling GIoU loss.
//!
//! cargo run --example adaptive_weighting [beta]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spiketrack::sched::{AdaptiveWeightConfig, AdaptiveWeighter};

fn main() -> Result<(), spiketrack::Error> {
    let beta = std::env::args().nth(1).map(|s| s.parse().expect("beta is a number")).unwrap_or(0.5);
    let cfg = AdaptiveWeightConfig { beta, ..Default::default() };
    cfg.validate()?;
    let mut w = AdaptiveWeighter::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("{:>4} {:>7} {:>7} {:>7} {:>7}", "step", "giou", "ema", "delta", "lambda");
    for step in 0..40 {
        let giou = 0.8 * (-(step as f64) / 30.0).exp() + rng.gen_range(-0.05..0.05);
        let s = w.step(giou)?;
        println!("{step:>4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}", s.giou, s.ema_before, s.delta, s.lambda_mi);
    }
    Ok(())
}
