//! Synaptic-operation counting and the accumulate-vs-multiply energy model.
//!
//! A spiking layer does one accumulate per incoming spike and synapse, so
//! its work is `rate · t_max · ops` accumulates; a non-spiking layer pays a
//! full multiply-accumulate per dense op.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FiringRecord;

pub const DEFAULT_E_MAC: f64 = 4.6e-12;
pub const DEFAULT_E_AC: f64 = 0.9e-12;

/// Geometry of one synaptic layer, enough to count its dense MACs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerShape {
    /// `rows × in_dim` times `in_dim × out_dim`.
    Linear { rows: usize, in_dim: usize, out_dim: usize },
    /// `c_in × h × w` input, `c_out` kernels of `k × k`.
    Conv2d { c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, h: usize, w: usize },
    /// `batch` independent `m × k` times `k × n` products.
    Matmul { batch: usize, m: usize, n: usize, k: usize },
}

impl LayerShape {
    pub fn macs(&self) -> Result<u64> {
        let v = match *self {
            LayerShape::Linear { rows, in_dim, out_dim } => rows * in_dim * out_dim,
            LayerShape::Conv2d { c_in, c_out, k, stride, pad, h, w } => {
                if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
                    return Err(Error::invalid(format!("conv of {k}x{k} does not fit a {h}x{w} map")));
                }
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (w + 2 * pad - k) / stride + 1;
                oh * ow * c_out * k * k * c_in
            }
            LayerShape::Matmul { batch, m, n, k } => batch * m * n * k,
        };
        Ok(v as u64)
    }
}

/// One layer of a model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDesc {
    pub name: String,
    pub shape: LayerShape,
    /// Whether the layer's input is a spike tensor.
    pub spiking: bool,
    /// Neuron whose firing rate feeds the layer.
    #[serde(default)]
    pub input: Option<String>,
}

/// Parses a JSON model description; unknown layer kinds are rejected.
pub fn parse_description(json: &str) -> Result<Vec<LayerDesc>> {
    serde_json::from_str(json).map_err(|e| Error::invalid(format!("model description: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOpsSpec {
    pub name: String,
    pub mac_equivalent_ops: u64,
    pub is_spiking: bool,
    pub input: Option<String>,
}

pub fn count_ops(desc: &[LayerDesc]) -> Result<Vec<LayerOpsSpec>> {
    desc.iter()
        .map(|d| {
            Ok(LayerOpsSpec {
                name: d.name.clone(),
                mac_equivalent_ops: d.shape.macs()?,
                is_spiking: d.spiking,
                input: d.input.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub mac_equivalent_ops: u64,
    pub spiking: bool,
    pub firing_rate: f64,
    pub sops: f64,
    pub joules: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    pub layers: Vec<LayerEnergy>,
    /// Same layers costed as dense multiply-accumulates.
    pub ann_joules: f64,
    pub snn_joules: f64,
    pub e_mac: f64,
    pub e_ac: f64,
    pub t_max: u32,
}

impl EnergyProfile {
    pub fn total_sops(&self) -> f64 {
        self.layers.iter().map(|l| l.sops).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

/// `rates[i]` is the input firing rate of `specs[i]` (ignored for
/// non-spiking layers).
pub fn estimate_energy(specs: &[LayerOpsSpec], rates: &[f64], t_max: u32, e_mac: f64, e_ac: f64) -> Result<EnergyProfile> {
    if rates.len() != specs.len() {
        return Err(Error::invalid(format!("{} layers but {} firing rates", specs.len(), rates.len())));
    }
    if !(e_mac >= 0.0 && e_ac >= 0.0) {
        return Err(Error::invalid("energy constants must be non-negative"));
    }
    let mut layers = Vec::with_capacity(specs.len());
    let (mut ann, mut snn) = (0.0, 0.0);
    for (s, &r) in specs.iter().zip(rates) {
        let ops = s.mac_equivalent_ops as f64;
        ann += ops * e_mac;
        let (rate, sops, joules) = if s.is_spiking {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("firing rate {r} of `{}` outside [0, 1]", s.name)));
            }
            let sops = r * t_max as f64 * ops;
            (r, sops, sops * e_ac)
        } else {
            (1.0, 0.0, ops * e_mac)
        };
        snn += joules;
        layers.push(LayerEnergy {
            name: s.name.clone(),
            mac_equivalent_ops: s.mac_equivalent_ops,
            spiking: s.is_spiking,
            firing_rate: rate,
            sops,
            joules,
        });
    }
    Ok(EnergyProfile { layers, ann_joules: ann, snn_joules: snn, e_mac, e_ac, t_max })
}

/// Element-weighted mean firing rate per neuron name.
pub fn mean_rates(records: &[FiringRecord]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.layer.clone()).or_default();
        e.0 += r.rate * r.elements as f64;
        e.1 += r.elements;
    }
    acc.into_iter().map(|(k, (s, n))| (k, if n == 0 { 0.0 } else { s / n as f64 })).collect()
}

/// Looks up each spiking layer's input rate; a missing neuron is an error.
pub fn rates_for(specs: &[LayerOpsSpec], rates: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
    specs
        .iter()
        .map(|s| match (&s.input, s.is_spiking) {
            (_, false) => Ok(1.0),
            (Some(n), true) => {
                rates.get(n).copied().ok_or_else(|| Error::invalid(format!("no firing rate recorded for `{n}`")))
            }
            (None, true) => Err(Error::invalid(format!("spiking layer `{}` names no input neuron", s.name))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(ops: u64, spiking: bool) -> LayerOpsSpec {
        LayerOpsSpec { name: "l".into(), mac_equivalent_ops: ops, is_spiking: spiking, input: None }
    }

    #[test]
    fn conv_count() {
        let s = LayerShape::Conv2d { c_in: 4, c_out: 8, k: 1, stride: 1, pad: 0, h: 16, w: 16 };
        assert_eq!(s.macs().unwrap(), 8192);
        let z = LayerShape::Conv2d { c_in: 0, c_out: 8, k: 3, stride: 1, pad: 1, h: 16, w: 16 };
        assert_eq!(z.macs().unwrap(), 0);
        assert_eq!(LayerShape::Matmul { batch: 2, m: 3, n: 4, k: 5 }.macs().unwrap(), 120);
    }

    #[test]
    fn unknown_kind_rejected() {
        let ok = r#"[{"name":"a","shape":{"kind":"linear","rows":2,"in_dim":3,"out_dim":4},"spiking":true}]"#;
        assert_eq!(count_ops(&parse_description(ok).unwrap()).unwrap()[0].mac_equivalent_ops, 24);
        let bad = r#"[{"name":"a","shape":{"kind":"pool","rows":2},"spiking":true}]"#;
        assert!(parse_description(bad).is_err());
    }

    #[test]
    fn spiking_and_dense_costs() {
        let p = estimate_energy(&[spec(1000, true)], &[0.2], 4, DEFAULT_E_MAC, DEFAULT_E_AC).unwrap();
        assert!((p.layers[0].sops - 800.0).abs() < 1e-9);
        assert!((p.snn_joules - 7.2e-10).abs() <= 1e-12 * 7.2e-10);
        let a = estimate_energy(&[spec(1000, false)], &[0.0], 4, DEFAULT_E_MAC, DEFAULT_E_AC).unwrap();
        assert!((a.snn_joules - 4.6e-9).abs() <= 1e-12 * 4.6e-9);
        let z = estimate_energy(&[spec(1000, true)], &[0.0], 4, DEFAULT_E_MAC, DEFAULT_E_AC).unwrap();
        assert_eq!(z.snn_joules, 0.0);
        assert!(estimate_energy(&[spec(1, true)], &[1.5], 4, DEFAULT_E_MAC, DEFAULT_E_AC).is_err());
    }
}
