//! Journey data model, JSONL and CSV ingestion, journey construction from
//! raw impression logs, and train/test splitting.

pub mod artifacts;
pub mod criteo;
pub mod jsonl;
pub mod split;
pub mod types;

pub use artifacts::{AttributionRecord, TruthRecord, WeightRecord};
pub use criteo::{criteo_preprocess, read_impressions_csv, PreprocessConfig, RawImpression};
pub use jsonl::{load_journeys, load_records, meta_path, save_journeys, save_records};
pub use split::{train_test_split, SplitSpec};
pub use types::{
    Dataset, DatasetMeta, FeatureDef, FeatureKind, Journey, Touchpoint, UserAttrDef,
    FORMAT_VERSION,
};
