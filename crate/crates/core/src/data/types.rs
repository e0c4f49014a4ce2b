//! Journey data model shared by the whole pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Touchpoint {
    /// Channel index in [0, K).
    pub channel: usize,
    /// Seconds since epoch; nondecreasing within a journey.
    pub ts: f64,
    /// Dynamic side information, one value per feature-schema entry.
    pub features: Vec<f64>,
    /// Media cost of the exposure, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Journey {
    pub user_id: String,
    /// Categorical user-attribute codes, ordered per the dataset schema.
    pub user_attrs: Vec<usize>,
    pub touchpoints: Vec<Touchpoint>,
    pub converted: bool,
}

impl Journey {
    pub fn len(&self) -> usize {
        self.touchpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.touchpoints.is_empty()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.touchpoints.iter().map(|t| t.channel).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Real,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureDef {
    pub fn real(name: &str) -> Self {
        FeatureDef {
            name: name.to_string(),
            kind: FeatureKind::Real,
        }
    }

    pub fn binary(name: &str) -> Self {
        FeatureDef {
            name: name.to_string(),
            kind: FeatureKind::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAttrDef {
    pub name: String,
    /// Number of categorical codes; values must be < cardinality.
    pub cardinality: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub n_channels: usize,
    pub features: Vec<FeatureDef>,
    pub user_attrs: Vec<UserAttrDef>,
    /// Hash of the configuration that produced the file; empty if unknown.
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub journeys: Vec<Journey>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(journeys: Vec<Journey>, meta: DatasetMeta) -> Result<Self> {
        let ds = Dataset { journeys, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.journeys.len()
    }

    pub fn n_channels(&self) -> usize {
        self.meta.n_channels
    }

    pub fn conversion_rate(&self) -> f64 {
        let conv = self.journeys.iter().filter(|j| j.converted).count();
        conv as f64 / self.journeys.len().max(1) as f64
    }

    pub fn max_len(&self) -> usize {
        self.journeys.iter().map(|j| j.len()).max().unwrap_or(0)
    }

    /// Check every structural invariant; `line_of` maps a journey index to a
    /// 1-based source line for error messages (identity + 1 by default).
    pub fn validate(&self) -> Result<()> {
        self.validate_with(|i| i + 1)
    }

    pub fn validate_with(&self, line_of: impl Fn(usize) -> usize) -> Result<()> {
        if self.journeys.is_empty() {
            return Err(CoreError::Data("no journeys".into()));
        }
        let k = self.meta.n_channels;
        let n_feat = self.meta.features.len();
        let n_attr = self.meta.user_attrs.len();
        for (i, j) in self.journeys.iter().enumerate() {
            let line = line_of(i);
            if j.touchpoints.is_empty() {
                return Err(CoreError::DataLine {
                    line,
                    msg: format!("journey {} has no touchpoints", j.user_id),
                });
            }
            if j.user_attrs.len() != n_attr {
                return Err(CoreError::DataLine {
                    line,
                    msg: format!(
                        "journey {} has {} user attrs, schema has {n_attr}",
                        j.user_id,
                        j.user_attrs.len()
                    ),
                });
            }
            for (a, (&v, def)) in j.user_attrs.iter().zip(&self.meta.user_attrs).enumerate() {
                if v >= def.cardinality {
                    return Err(CoreError::DataLine {
                        line,
                        msg: format!(
                            "user attr {a} ({}) = {v} exceeds cardinality {}",
                            def.name, def.cardinality
                        ),
                    });
                }
            }
            let mut prev_ts = f64::NEG_INFINITY;
            for tp in &j.touchpoints {
                if tp.channel >= k {
                    return Err(CoreError::DataLine {
                        line,
                        msg: format!("channel {} out of range (K = {k})", tp.channel),
                    });
                }
                if tp.features.len() != n_feat {
                    return Err(CoreError::DataLine {
                        line,
                        msg: format!(
                            "touchpoint has {} features, schema has {n_feat}",
                            tp.features.len()
                        ),
                    });
                }
                if !tp.ts.is_finite() || tp.features.iter().any(|f| !f.is_finite()) {
                    return Err(CoreError::DataLine {
                        line,
                        msg: "non-finite timestamp or feature".into(),
                    });
                }
                if tp.ts < prev_ts {
                    return Err(CoreError::DataLine {
                        line,
                        msg: format!("timestamps decrease ({prev_ts} then {})", tp.ts),
                    });
                }
                prev_ts = tp.ts;
            }
        }
        Ok(())
    }
}
