//! Record types for the sidecar artifacts that flow between pipeline
//! stages: ground-truth probabilities, journey weights, and attributions.

use serde::{Deserialize, Serialize};

/// One line of a `.truth.jsonl` sidecar written next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub index: usize,
    pub p_true: f64,
    pub setting: String,
}

/// One line of a weights file produced by the reweighter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub index: usize,
    pub w: f64,
    /// Monte-Carlo sample count used for the harmonic-mean estimate.
    pub s: usize,
    /// Whether the raw weight hit the clip range before normalization.
    pub clip_hit: bool,
}

/// One line of an attribution file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub index: usize,
    /// "exact" for full subset enumeration, "sampled" for permutations.
    pub regime: String,
    /// Raw Shapley value per touchpoint position.
    pub sv: Vec<f64>,
    /// Nonnegative, normalized credit per touchpoint position.
    pub credit: Vec<f64>,
}
