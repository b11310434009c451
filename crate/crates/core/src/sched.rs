//! Difficulty-aware weighting of the MI term.
//!
//! `Δ = tanh(η·(L̄ − L))` compares the batch GIoU loss `L` with its running
//! average `L̄`; `λ_MI = max(0, λ_base + β·Δ)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which sign convention turns the loss gap into `Δ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// `tanh(η(L̄ − L))`: batches harder than average lower the MI weight.
    #[default]
    AsWritten,
    /// `tanh(η(L − L̄))`: batches harder than average raise it.
    ProseIntent,
}

impl fmt::Display for SignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignMode::AsWritten => "as_written",
            SignMode::ProseIntent => "prose_intent",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveWeightConfig {
    pub lambda_base: f64,
    pub beta: f64,
    pub eta: f64,
    pub ema_momentum: f64,
    pub sign_mode: SignMode,
}

impl Default for AdaptiveWeightConfig {
    fn default() -> Self {
        Self { lambda_base: 0.1, beta: 0.5, eta: 10.0, ema_momentum: 0.9, sign_mode: SignMode::AsWritten }
    }
}

impl AdaptiveWeightConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, d: String| Err(Error::Config { key: format!("train.amim.{k}"), detail: d });
        if !(self.lambda_base >= 0.0 && self.lambda_base.is_finite()) {
            return bad("lambda_base", format!("must be >= 0, got {}", self.lambda_base));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", format!("must be >= 0, got {}", self.beta));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta", format!("must be > 0, got {}", self.eta));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return bad("ema_momentum", format!("must lie in (0, 1), got {}", self.ema_momentum));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeightState {
    /// Running GIoU loss `L̄`; `None` before the first batch.
    pub ema_giou: Option<f64>,
    pub step_count: u64,
}

fn finite(l: f64) -> Result<f64> {
    if l.is_finite() {
        Ok(l)
    } else {
        Err(Error::invalid(format!("GIoU loss must be finite, got {l}")))
    }
}

/// `Δ` for the current batch against the pre-update average; 0 before any
/// history exists.
pub fn compute_delta(state: &AdaptiveWeightState, giou: f64, cfg: &AdaptiveWeightConfig) -> Result<f64> {
    let l = finite(giou)?;
    let Some(avg) = state.ema_giou else { return Ok(0.0) };
    let gap = match cfg.sign_mode {
        SignMode::AsWritten => avg - l,
        SignMode::ProseIntent => l - avg,
    };
    Ok((cfg.eta * gap).tanh())
}

/// `max(0, λ_base + β·Δ)`.
pub fn compute_lambda(delta: f64, cfg: &AdaptiveWeightConfig) -> f64 {
    (cfg.lambda_base + cfg.beta * delta).max(0.0)
}

pub fn update_ema(state: &AdaptiveWeightState, giou: f64, cfg: &AdaptiveWeightConfig) -> Result<AdaptiveWeightState> {
    let l = finite(giou)?;
    let m = cfg.ema_momentum;
    let ema = match state.ema_giou {
        None => l,
        Some(a) => m * a + (1.0 - m) * l,
    };
    Ok(AdaptiveWeightState { ema_giou: Some(ema), step_count: state.step_count + 1 })
}

/// One scheduler step as logged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightStep {
    pub giou: f64,
    /// Average before absorbing `giou` (equal to `giou` on the first batch).
    pub ema_before: f64,
    pub delta: f64,
    pub lambda_mi: f64,
}

/// Owns the scheduler state for a training run.
#[derive(Clone, Debug)]
pub struct AdaptiveWeighter {
    pub cfg: AdaptiveWeightConfig,
    pub state: AdaptiveWeightState,
}

impl AdaptiveWeighter {
    pub fn new(cfg: AdaptiveWeightConfig) -> Self {
        Self { cfg, state: AdaptiveWeightState::default() }
    }

    /// Weight for a batch whose GIoU loss is `giou`, then folds it into
    /// the average.
    pub fn step(&mut self, giou: f64) -> Result<WeightStep> {
        let delta = compute_delta(&self.state, giou, &self.cfg)?;
        let lambda_mi = compute_lambda(delta, &self.cfg);
        let ema_before = self.state.ema_giou.unwrap_or(giou);
        self.state = update_ema(&self.state, giou, &self.cfg)?;
        Ok(WeightStep { giou, ema_before, delta, lambda_mi })
    }
}
