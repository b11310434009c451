//! Synthetic sequences, evaluation metrics, and ablation runs.

pub mod harness;
pub mod metrics;
pub mod synth;

pub use harness::{ablation_grid, evaluate, run_ablation, sensitivity_grid, train_and_evaluate, AblationReport, ReportRow, Variant};
pub use metrics::{precision_score, success_auc, EvalResult};
pub use synth::{generate_sequence, DistractorStyle, SceneConfig, ShapeKind, SyntheticScene};
