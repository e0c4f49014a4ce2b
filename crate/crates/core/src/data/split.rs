//! Deterministic train/test splitting with the user-subset constraint.

use std::collections::HashSet;

use crate::data::types::Dataset;
use crate::error::{CoreError, Result};
use crate::rng::hash_bytes;

#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

/// Partition journeys by a seeded per-journey hash, then move any test
/// journey whose user never appears in train over to train, so the test
/// user set is always a subset of the train user set.
pub fn train_test_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "test fraction must be in (0, 1), got {}",
            spec.test_fraction
        )));
    }
    let mut to_test: Vec<bool> = ds
        .journeys
        .iter()
        .enumerate()
        .map(|(i, j)| {
            let h = hash_bytes(spec.seed, format!("split|{}|{i}", j.user_id).as_bytes());
            (h as f64 / u64::MAX as f64) < spec.test_fraction
        })
        .collect();

    let train_users: HashSet<&str> = ds
        .journeys
        .iter()
        .zip(&to_test)
        .filter(|(_, &t)| !t)
        .map(|(j, _)| j.user_id.as_str())
        .collect();
    for (j, t) in ds.journeys.iter().zip(to_test.iter_mut()) {
        if *t && !train_users.contains(j.user_id.as_str()) {
            *t = false;
        }
    }

    let pick = |want_test: bool| -> Vec<_> {
        ds.journeys
            .iter()
            .zip(&to_test)
            .filter(|(_, &t)| t == want_test)
            .map(|(j, _)| j.clone())
            .collect()
    };
    let train = Dataset::new(pick(false), ds.meta.clone())?;
    // The subset rule can legitimately drain the test side (e.g. a single
    // user), so the empty-dataset check is not applied here.
    let test = Dataset {
        journeys: pick(true),
        meta: ds.meta.clone(),
    };
    Ok((train, test))
}
