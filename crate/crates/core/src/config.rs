//! Run configuration read from TOML. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::synth::SceneConfig;
use crate::energy::{DEFAULT_E_AC, DEFAULT_E_MAC};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::track::TrackConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub track: TrackConfig,
    /// Held-out sequences per evaluation.
    pub sequences: usize,
    pub length: usize,
    /// Scene seed of the first held-out sequence; the rest follow it.
    pub seed: u64,
    pub precision_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { track: TrackConfig::default(), sequences: 5, length: 50, seed: 1_000_000, precision_threshold: 20.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    /// Joules per multiply-accumulate.
    pub e_mac: f64,
    /// Joules per accumulate.
    pub e_ac: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { e_mac: DEFAULT_E_MAC, e_ac: DEFAULT_E_AC }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SceneConfig,
    pub eval: EvalConfig,
    pub energy: EnergyConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| text[s].lines().next().unwrap_or("").trim().to_string()).unwrap_or_default();
            Error::Config { key, detail: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        let e = &self.eval;
        let bad = |k: &str, d: &str| Err(Error::Config { key: k.into(), detail: d.into() });
        if e.sequences == 0 {
            return bad("eval.sequences", "need at least one sequence");
        }
        if e.length < 2 {
            return bad("eval.length", "sequences need a frame after the initial one");
        }
        if !(e.precision_threshold >= 0.0) {
            return bad("eval.precision_threshold", "must be >= 0");
        }
        let t = &e.track;
        if !(t.search_factor > 0.0 && t.template_factor > 0.0 && t.min_box_side > 0.0) {
            return bad("eval.track.search_factor", "crop factors and min_box_side must be positive");
        }
        if !(self.energy.e_mac >= 0.0 && self.energy.e_ac >= 0.0) {
            return bad("energy.e_mac", "energy constants must be >= 0");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_frozen_table() {
        let c = RunConfig::default();
        let t = &c.train;
        assert_eq!(t.batch_size, 32);
        assert_eq!(t.steps, 2000);
        assert_eq!(t.optimizer.lr, 4e-5);
        assert_eq!(t.optimizer.weight_decay, 1e-4);
        assert_eq!(t.amim.lambda_base, 0.1);
        assert_eq!(t.amim.beta, 0.5);
        assert_eq!(t.amim.eta, 10.0);
        assert_eq!(c.model.backbone.template_size, 128);
        assert_eq!(c.model.backbone.search_size, 256);
        assert_eq!((t.loss.lambda_iou, t.loss.lambda_l1, t.loss.lambda_sim), (2.0, 5.0, 0.1));
        assert_eq!(c.eval.track.update_interval, 25);
        assert_eq!(c.eval.track.update_threshold, 0.7);
        assert_eq!(c.eval.track.search_factor, 4.0);
        assert_eq!(c.eval.precision_threshold, 20.0);
        assert_eq!((c.energy.e_mac, c.energy.e_ac), (4.6e-12, 0.9e-12));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("[train]\nbatch_size = 8\n[train.amim]\nbeta = 0.0\n").unwrap();
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.amim.beta, 0.0);
        assert_eq!(c.train.amim.lambda_base, 0.1);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::from_toml("[train]\nbatch_sise = 8\n").unwrap_err();
        assert!(e.to_string().contains("batch_sise"), "{e}");
        let e = RunConfig::from_toml("[train]\nbatch_size = 1\n").unwrap_err();
        assert!(e.to_string().contains("train.batch_size"), "{e}");
        let e = RunConfig::from_toml("[model.backbone]\nembed_dim = 0\n").unwrap_err();
        assert!(e.to_string().contains("model.backbone"), "{e}");
    }

    #[test]
    fn desk_preset_loads() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.train.batch_size, 8);
    }
}
