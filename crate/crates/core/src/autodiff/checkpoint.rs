//! JSON checkpoint format: parameter name → shape + values, with a
//! mandatory version tag.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "spiketrack-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(default)]
    pub buffer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub params: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let params = store
            .iter()
            .map(|(_, e)| {
                let rec = TensorRecord {
                    shape: e.value.shape().to_vec(),
                    values: e.value.data().to_vec(),
                    buffer: e.kind == ParamKind::Buffer,
                };
                (e.name.clone(), rec)
            })
            .collect();
        Self { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, params }
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, rec) in &self.params {
            let t = Tensor::new(rec.shape.clone(), rec.values.clone())
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            if rec.buffer {
                store.add_buffer(name, t);
            } else {
                store.add(name, t);
            }
        }
        Ok(store)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn json_round_trip_is_lossless(vals in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
            let mut store = ParamStore::new();
            store.add("w", Tensor::from_vec(vals.clone()));
            store.add_buffer("bn.mean", Tensor::from_vec(vals.iter().map(|v| v * 0.5).collect()));
            let ck = Checkpoint::from_store(&store);
            let back = Checkpoint::from_json(&ck.to_json()).unwrap();
            prop_assert_eq!(&back, &ck);
            let restored = back.to_store().unwrap();
            prop_assert_eq!(restored.by_name("w").unwrap().data(), &vals[..]);
        }
    }

    #[test]
    fn version_tag_is_mandatory() {
        let missing = r#"{"format":"spiketrack-checkpoint","params":{}}"#;
        assert!(Checkpoint::from_json(missing).is_err());
        let wrong = r#"{"format":"spiketrack-checkpoint","version":99,"params":{}}"#;
        assert!(Checkpoint::from_json(wrong).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros([2, 2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros([3]));
        let e = a.load_from(&b).unwrap_err().to_string();
        assert!(e.contains("architecture mismatch"), "{e}");
    }
}
