//! Fits a statistics network alone on correlated Gaussian pairs and
//! prints the estimate against the true mutual information.
//!
//! cargo run --example mi_toy

use spiketrack::amim::{fit_toy_estimator, ToyMiConfig};

fn main() -> Result<(), spiketrack::Error> {
    let cfg = ToyMiConfig::default();
    println!("{:>5} {:>10} {:>10}", "rho", "true MI", "estimate");
    for rho in [0.0, 0.3, 0.6, 0.9, 0.99] {
        let mi = 0.5 * (1.0 / (1.0f64 - rho * rho)).ln();
        println!("{rho:>5} {mi:>10.4} {:>10.4}", fit_toy_estimator(rho, 0, &cfg)?);
    }
    println!("(the estimate is a Jensen-Shannon score, -2 ln 2 for independent pairs)");
    Ok(())
}
