//! Multi-spike neurons and the integer spike tensors they emit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{SpikeFn, Surrogate, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Ctx;

/// Neuron emitting `clip(round(m/θ), 0, t_max)` spikes per forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiSpikeNeuron {
    pub threshold: f64,
    pub t_max: u32,
    #[serde(default)]
    pub surrogate: Surrogate,
}

impl Default for MultiSpikeNeuron {
    fn default() -> Self {
        Self { threshold: 1.0, t_max: 4, surrogate: Surrogate::StraightThrough }
    }
}

impl MultiSpikeNeuron {
    pub fn new(threshold: f64, t_max: u32, surrogate: Surrogate) -> Result<Self> {
        let n = Self { threshold, t_max, surrogate };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::invalid(format!("neuron threshold must be positive, got {}", self.threshold)));
        }
        if self.t_max < 1 {
            return Err(Error::invalid("neuron t_max must be at least 1"));
        }
        if let Surrogate::Arctan { width } = self.surrogate {
            if !(width > 0.0 && width.is_finite()) {
                return Err(Error::invalid(format!("surrogate width must be positive, got {width}")));
            }
        }
        Ok(())
    }

    pub fn spike_fn(&self) -> SpikeFn {
        SpikeFn { threshold: self.threshold, t_max: self.t_max, surrogate: self.surrogate }
    }

    pub fn with_threshold(self, threshold: f64) -> Self {
        Self { threshold, ..self }
    }
}

/// Non-negative integer spike counts bounded by `t_max`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTensor {
    shape: Vec<usize>,
    counts: Vec<u8>,
    t_max: u32,
}

impl SpikeTensor {
    pub fn new(shape: Vec<usize>, counts: Vec<u8>, t_max: u32) -> Result<Self> {
        if t_max < 1 || t_max > u8::MAX as u32 {
            return Err(Error::invalid(format!("t_max {t_max} outside 1..=255")));
        }
        if shape.iter().product::<usize>() != counts.len() {
            return Err(Error::shape("spike_tensor", format!("shape {shape:?} vs {} counts", counts.len())));
        }
        if let Some(c) = counts.iter().find(|&&c| c as u32 > t_max) {
            return Err(Error::invalid(format!("spike count {c} exceeds t_max {t_max}")));
        }
        Ok(Self { shape, counts, t_max })
    }

    /// Audits a dense tensor: every value must be an integer in `[0, t_max]`.
    pub fn from_tensor(t: &Tensor, t_max: u32) -> Result<Self> {
        let mut counts = Vec::with_capacity(t.numel());
        for &v in t.data() {
            if v.fract() != 0.0 || v < 0.0 || v > t_max as f64 {
                return Err(Error::invalid(format!("value {v} is not a spike count in 0..={t_max}")));
            }
            counts.push(v as u8);
        }
        Self::new(t.shape().to_vec(), counts, t_max)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn counts(&self) -> &[u8] {
        &self.counts
    }

    pub fn t_max(&self) -> u32 {
        self.t_max
    }

    /// `mean(counts) / t_max`.
    pub fn firing_rate(&self) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        total as f64 / (self.counts.len() as f64 * self.t_max as f64)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.counts.iter().map(|&c| c as f64).collect()).expect("consistent shape")
    }
}

/// Elementwise spike counts for a membrane tensor.
pub fn neuron_forward(membrane: &Tensor, neuron: &MultiSpikeNeuron) -> SpikeTensor {
    let f = neuron.spike_fn();
    let counts = membrane.data().iter().map(|&m| f.count(m) as u8).collect();
    SpikeTensor { shape: membrane.shape().to_vec(), counts, t_max: neuron.t_max }
}

/// A tape value produced by a spiking neuron. Synaptic layers in the
/// spiking network only accept this type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpikeVar(Var);

impl SpikeVar {
    pub fn var(self) -> Var {
        self.0
    }

    /// Re-wraps a pure rearrangement (select, reshape, permute) of spikes.
    pub(crate) fn rearranged(v: Var) -> SpikeVar {
        SpikeVar(v)
    }
}

/// Fires `neuron` on `membrane`, logging the layer's firing rate under `name`.
pub fn fire(ctx: &mut Ctx<'_>, name: &str, membrane: Var, neuron: &MultiSpikeNeuron) -> SpikeVar {
    let s = ctx.tape().spike(membrane, neuron.spike_fn());
    let out = ctx.value(s);
    let rate = out.mean() / neuron.t_max as f64;
    let n = out.numel();
    ctx.record_firing(name, rate, n);
    SpikeVar(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamStore, SpikeMode, Tape};

    fn unit() -> MultiSpikeNeuron {
        MultiSpikeNeuron { threshold: 1.0, t_max: 4, surrogate: Surrogate::StraightThrough }
    }

    #[test]
    fn counts_round_and_clip() {
        let m = Tensor::from_vec(vec![0.0, 2.3, 9.0, -1.0, 0.49, 0.5001]);
        let s = neuron_forward(&m, &unit());
        assert_eq!(s.counts(), &[0, 2, 4, 0, 0, 1]);
        assert!((s.firing_rate() - 7.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn audit_rejects_non_spikes() {
        assert!(SpikeTensor::from_tensor(&Tensor::from_vec(vec![0.0, 1.5]), 4).is_err());
        assert!(SpikeTensor::from_tensor(&Tensor::from_vec(vec![5.0]), 4).is_err());
        assert!(SpikeTensor::from_tensor(&Tensor::from_vec(vec![0.0, 3.0]), 4).is_ok());
        assert!(MultiSpikeNeuron::new(0.0, 4, Surrogate::StraightThrough).is_err());
        assert!(MultiSpikeNeuron::new(1.0, 0, Surrogate::StraightThrough).is_err());
    }

    fn closed_form(n: &MultiSpikeNeuron, m: f64) -> f64 {
        let top = n.threshold * n.t_max as f64;
        if !(0.0..=top).contains(&m) {
            return 0.0;
        }
        match n.surrogate {
            Surrogate::StraightThrough => 1.0 / n.threshold,
            Surrogate::Arctan { width } => {
                let k = (m / n.threshold).round().clamp(0.0, n.t_max as f64);
                let z = std::f64::consts::PI * width * (m - n.threshold * k);
                1.0 / (1.0 + z * z)
            }
        }
    }

    #[test]
    fn backward_matches_surrogate_closed_form() {
        for surrogate in [Surrogate::StraightThrough, Surrogate::Arctan { width: 2.0 }] {
            let n = MultiSpikeNeuron { threshold: 0.7, t_max: 4, surrogate };
            let ms: Vec<f64> = (0..400).map(|i| -0.5 + i as f64 * 0.0093).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(ms.clone()), true);
            let s = tape.spike(x, n.spike_fn());
            let l = tape.sum(s);
            tape.backward(l).unwrap();
            let g = tape.grad(x).unwrap();
            for (m, gi) in ms.iter().zip(g.data()) {
                assert!((gi - closed_form(&n, *m)).abs() < 1e-10, "{surrogate:?} at {m}");
            }
        }
    }

    #[test]
    fn fire_records_rate_in_unit_interval() {
        let store = ParamStore::new();
        let mut ctx = Ctx::build(&store, false, false, SpikeMode::Quantized);
        let x = ctx.tape().constant(Tensor::from_vec(vec![-3.0, 0.0, 1.2, 7.0]));
        let s = fire(&mut ctx, "n", x, &unit());
        assert_eq!(ctx.value(s.var()).data(), &[0.0, 0.0, 1.0, 4.0]);
        let r = &ctx.firing()[0];
        assert_eq!(r.layer, "n");
        assert!((r.rate - 5.0 / 16.0).abs() < 1e-15);
    }
}
