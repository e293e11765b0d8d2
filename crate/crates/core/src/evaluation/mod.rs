//! Metrics, the downstream probe, gate statistics and experiment harnesses.

pub mod experiments;
pub mod gates;
pub mod metrics;
pub mod probe;

pub use experiments::*;
pub use gates::{gate_statistics, GateStats};
pub use metrics::{accuracy, category_similarity_matrix, confusion_matrix, cosine_alignment, macro_f1};
pub use probe::{train_probe, ProbeConfig, ProbeData, ProbeMetrics, ProbeModel, ProbeNorms};
