//! Scalar math of the multi-spike activation and its surrogate derivatives.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Derivative used in place of the (zero almost everywhere) derivative of
/// the integer spike count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Surrogate {
    /// `1/θ` inside `[0, θ·t_max]`, zero outside.
    StraightThrough,
    /// `1 / (1 + (π·w·(m − θ·k))²)` inside `[0, θ·t_max]`, where `k` is the
    /// emitted spike count; zero outside.
    Arctan { width: f64 },
}

impl Default for Surrogate {
    fn default() -> Self {
        Surrogate::StraightThrough
    }
}

/// Parameters of the quantizing spike function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpikeFn {
    pub threshold: f64,
    pub t_max: u32,
    pub surrogate: Surrogate,
}

impl SpikeFn {
    /// Spike count `clip(round(m/θ), 0, t_max)`.
    pub fn count(&self, m: f64) -> f64 {
        (m / self.threshold).round().clamp(0.0, self.t_max as f64)
    }

    fn active(&self, m: f64) -> bool {
        m >= 0.0 && m <= self.threshold * self.t_max as f64
    }

    /// Surrogate derivative d(count)/dm.
    pub fn surrogate_grad(&self, m: f64) -> f64 {
        if !self.active(m) {
            return 0.0;
        }
        match self.surrogate {
            Surrogate::StraightThrough => 1.0 / self.threshold,
            Surrogate::Arctan { width } => {
                let k = self.count(m);
                let z = PI * width * (m - self.threshold * k);
                1.0 / (1.0 + z * z)
            }
        }
    }

    /// Continuous function whose exact derivative is [`Self::surrogate_grad`].
    ///
    /// Used in place of [`Self::count`] when finite-difference checking a
    /// network that contains spiking layers.
    pub fn relaxed(&self, m: f64) -> f64 {
        let top = self.threshold * self.t_max as f64;
        let m = m.clamp(0.0, top);
        match self.surrogate {
            Surrogate::StraightThrough => m / self.threshold,
            Surrogate::Arctan { width } => {
                let a = PI * width;
                let cell = 2.0 * (a * self.threshold / 2.0).atan() / a;
                let k = self.count(m);
                k * cell + (a * (m - self.threshold * k)).atan() / a
            }
        }
    }
}
