//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

pub mod checkpoint;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod params;
pub mod spike;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradcheck, gradcheck_with, GradcheckOpts, GradcheckReport};
pub use kernels::ConvGeom;
pub use params::{ParamId, ParamKind, ParamStore, Session};
pub use spike::{SpikeFn, Surrogate};
pub use tape::{BnMode, BnStats, SpikeMode, Tape, Var};
pub use tensor::Tensor;
