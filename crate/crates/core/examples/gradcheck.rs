//! Finite-difference checks of every differentiable operation.
//!
//! cargo run --example gradcheck

use spiketrack::checks::{gradcheck_suite, TOLERANCE};

fn main() -> Result<(), spiketrack::Error> {
    let out = gradcheck_suite()?;
    for o in &out {
        println!("{} {:>9.2e}  {}", if o.passed { "ok  " } else { "FAIL" }, o.max_rel_err, o.name);
    }
    let failed = out.iter().filter(|o| !o.passed).count();
    println!("{} checks at tolerance {TOLERANCE:e}, {failed} failed", out.len());
    if failed > 0 {
        std::process::exit(2);
    }
    Ok(())
}
