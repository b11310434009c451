//! Per-layer synaptic operations and energy of a freshly initialised
//! desk-scale model, with firing rates measured on synthetic samples.
//!
//! cargo run --example energy_profile [config.toml]

use std::path::PathBuf;

use spiketrack::config::RunConfig;
use spiketrack::model::{synthetic_batch, TrackerModel};

fn main() -> Result<(), spiketrack::Error> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml")));
    let cfg = RunConfig::load(&path)?;
    let (store, model) = TrackerModel::new(&cfg.model, 0)?;
    let batch = synthetic_batch(&cfg.model, &cfg.data, 4, 0)?;
    let p = model.profile_energy(&store, &batch, cfg.energy.e_mac, cfg.energy.e_ac)?;
    println!("{:<28} {:>12} {:>6} {:>12} {:>12}", "layer", "MACs", "rate", "SOPs", "joules");
    for l in &p.layers {
        let rate = if l.spiking { format!("{:.3}", l.firing_rate) } else { "-".into() };
        println!("{:<28} {:>12} {:>6} {:>12.0} {:>12.3e}", l.name, l.mac_equivalent_ops, rate, l.sops, l.joules);
    }
    println!("spiking network {:.3e} J, dense equivalent {:.3e} J (T = {})", p.snn_joules, p.ann_joules, p.t_max);
    Ok(())
}
