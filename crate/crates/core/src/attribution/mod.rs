//! Shapley-value credit allocation.
//!
//! Coalitions are subsequences of a journey's touchpoints (removal keeps
//! surviving order, timestamps and features). Short journeys are solved by
//! exact subset enumeration, long ones by uniform permutation sampling;
//! both regimes share a per-journey subset-value cache keyed by bitmask.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::data::{AttributionRecord, Dataset, Journey};
use crate::error::{CoreError, Result};
use crate::predictor::{predict_batch, PredictorParams};
use crate::rng::{derive_indexed, rng_for};

#[derive(Debug, Clone)]
pub struct ShapleyConfig {
    /// Largest T solved by full subset enumeration (2^T evaluations).
    pub exact_max_len: usize,
    pub n_permutations: usize,
    pub seed: u64,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        ShapleyConfig {
            exact_max_len: 12,
            n_permutations: 10_000,
            seed: 0,
        }
    }
}

impl ShapleyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exact_max_len < 1 || self.n_permutations < 1 {
            return Err(CoreError::InvalidArgument(
                "exact_max_len and n_permutations must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TouchpointCredit {
    pub sv: f64,
    /// Clamped, normalized share in [0, 1]; sums to 1 over the journey.
    pub credit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCredit {
    pub channel: usize,
    /// Mean normalized credit over the selected journeys' touchpoints on
    /// this channel; 0 when the channel never appears.
    pub mean_credit: f64,
    /// Number of selected journeys in which the channel appears.
    pub n_journeys: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCreditReport {
    pub channels: Vec<ChannelCredit>,
}

/// Batched conversion-probability source for coalition evaluation.
pub trait SubsetPredictor: Sync {
    fn predict(&self, journeys: &[Journey]) -> Result<Vec<f64>>;
}

impl SubsetPredictor for PredictorParams {
    fn predict(&self, journeys: &[Journey]) -> Result<Vec<f64>> {
        let refs: Vec<&Journey> = journeys.iter().collect();
        predict_batch(self, &refs)
    }
}

/// Adapter for plain per-journey functions (table predictors in tests).
pub struct FnPredictor<F: Fn(&Journey) -> f64 + Sync>(pub F);

impl<F: Fn(&Journey) -> f64 + Sync> SubsetPredictor for FnPredictor<F> {
    fn predict(&self, journeys: &[Journey]) -> Result<Vec<f64>> {
        Ok(journeys.iter().map(&self.0).collect())
    }
}

/// Subsequence of `journey` keeping touchpoints whose bit is set, in
/// original order with original timestamps and features.
fn subset_journey(journey: &Journey, mask: u64) -> Journey {
    Journey {
        user_id: journey.user_id.clone(),
        user_attrs: journey.user_attrs.clone(),
        touchpoints: journey
            .touchpoints
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, tp)| tp.clone())
            .collect(),
        converted: journey.converted,
    }
}

/// Evaluate p for every mask in `masks`, one predictor call.
fn eval_masks<P: SubsetPredictor>(
    journey: &Journey,
    predict: &P,
    masks: &[u64],
) -> Result<Vec<f64>> {
    let subs: Vec<Journey> = masks.iter().map(|&m| subset_journey(journey, m)).collect();
    let vals = predict.predict(&subs)?;
    if vals.len() != masks.len() {
        return Err(CoreError::InvalidArgument(
            "predictor returned wrong arity".into(),
        ));
    }
    if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite(format!("subset probability {bad}")));
    }
    Ok(vals)
}

/// Exact Shapley values by full subset enumeration:
/// SV_t = sum over S not containing t of |S|!(T-|S|-1)!/T! (v(S+t) - v(S)).
pub fn shapley_exact<P: SubsetPredictor>(
    journey: &Journey,
    predict: &P,
    cfg: &ShapleyConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let t_len = journey.len();
    if t_len > cfg.exact_max_len {
        return Err(CoreError::InvalidArgument(format!(
            "journey length {t_len} exceeds exact_max_len {}; use shapley_sampled",
            cfg.exact_max_len
        )));
    }
    if t_len == 0 {
        return Ok(Vec::new());
    }
    let all: Vec<u64> = (0..1u64 << t_len).collect();
    let v = eval_masks(journey, predict, &all)?;

    // T <= 12 keeps every factorial exact in f64
    let mut fact = vec![1.0f64; t_len + 1];
    for i in 1..=t_len {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut sv = vec![0.0; t_len];
    for t in 0..t_len {
        let bit = 1u64 << t;
        let mut acc = 0.0;
        for mask in 0..1u64 << t_len {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact[s] * fact[t_len - s - 1] / fact[t_len];
            acc += w * (v[(mask | bit) as usize] - v[mask as usize]);
        }
        sv[t] = acc;
    }
    Ok(sv)
}

/// Monte-Carlo Shapley values: average marginal contribution over
/// `n_permutations` uniform insertion orders. Subset values are memoized
/// across permutations.
pub fn shapley_sampled<P: SubsetPredictor>(
    journey: &Journey,
    predict: &P,
    cfg: &ShapleyConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let t_len = journey.len();
    if t_len == 0 {
        return Ok(Vec::new());
    }
    if t_len > 64 {
        return Err(CoreError::InvalidArgument(
            "permutation sampling supports at most 64 touchpoints".into(),
        ));
    }
    let mut rng = rng_for(cfg.seed, "shapley-perm");
    let mut order: Vec<usize> = (0..t_len).collect();
    // (touchpoint, prefix mask before insertion), in draw order
    let mut events: Vec<(usize, u64)> = Vec::with_capacity(cfg.n_permutations * t_len);
    for _ in 0..cfg.n_permutations {
        crate::reweighting::shuffle_indices(&mut order, &mut rng);
        let mut prefix = 0u64;
        for &t in &order {
            events.push((t, prefix));
            prefix |= 1 << t;
        }
    }
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut unique: Vec<u64> = Vec::new();
    for &(t, prefix) in &events {
        for m in [prefix, prefix | 1 << t] {
            if !index.contains_key(&m) {
                index.insert(m, unique.len());
                unique.push(m);
            }
        }
    }
    let v = eval_masks(journey, predict, &unique)?;
    let mut sv = vec![0.0; t_len];
    for &(t, prefix) in &events {
        sv[t] += v[index[&(prefix | 1 << t)]] - v[index[&prefix]];
    }
    for s in &mut sv {
        *s /= cfg.n_permutations as f64;
    }
    Ok(sv)
}

/// a_t = max(0, SV_t) / sum of clamped values; uniform when everything
/// clamps to zero.
pub fn normalize_credits(svs: &[f64]) -> Vec<f64> {
    if svs.is_empty() {
        return Vec::new();
    }
    let clamped: Vec<f64> = svs.iter().map(|&s| s.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total > 0.0 {
        clamped.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / svs.len() as f64; svs.len()]
    }
}

/// Per-journey Shapley credits over a frozen predictor, exact when the
/// journey is short enough, plus the per-channel mean-credit report.
/// Selection defaults to converted journeys only.
pub fn attribute_dataset<P: SubsetPredictor>(
    ds: &Dataset,
    predict: &P,
    cfg: &ShapleyConfig,
    converted_only: bool,
) -> Result<(Vec<AttributionRecord>, ChannelCreditReport)> {
    cfg.validate()?;
    let selected: Vec<usize> = ds
        .journeys
        .iter()
        .enumerate()
        .filter(|(_, j)| j.converted || !converted_only)
        .map(|(i, _)| i)
        .collect();
    let records: Vec<AttributionRecord> = selected
        .par_iter()
        .map(|&i| -> Result<AttributionRecord> {
            let j = &ds.journeys[i];
            let exact = j.len() <= cfg.exact_max_len;
            let sv = if exact {
                shapley_exact(j, predict, cfg)?
            } else {
                let jcfg = ShapleyConfig {
                    seed: derive_indexed(cfg.seed, "journey", i as u64),
                    ..cfg.clone()
                };
                shapley_sampled(j, predict, &jcfg)?
            };
            let credit = normalize_credits(&sv);
            Ok(AttributionRecord {
                index: i,
                regime: if exact { "exact" } else { "sampled" }.into(),
                sv,
                credit,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let k = ds.n_channels();
    let mut sums = vec![0.0f64; k];
    let mut touch_counts = vec![0usize; k];
    let mut journey_counts = vec![0usize; k];
    for rec in &records {
        let j = &ds.journeys[rec.index];
        let mut seen = vec![false; k];
        for (tp, &a) in j.touchpoints.iter().zip(&rec.credit) {
            sums[tp.channel] += a;
            touch_counts[tp.channel] += 1;
            seen[tp.channel] = true;
        }
        for (c, &s) in seen.iter().enumerate() {
            if s {
                journey_counts[c] += 1;
            }
        }
    }
    let channels = (0..k)
        .map(|c| ChannelCredit {
            channel: c,
            mean_credit: if touch_counts[c] > 0 {
                sums[c] / touch_counts[c] as f64
            } else {
                0.0
            },
            n_journeys: journey_counts[c],
        })
        .collect();
    Ok((records, ChannelCreditReport { channels }))
}

/// channel,mean_credit,n CSV body for the report.
pub fn channel_report_csv(report: &ChannelCreditReport) -> String {
    let mut out = String::from("channel,mean_credit,n\n");
    for c in &report.channels {
        out.push_str(&format!("{},{},{}\n", c.channel, c.mean_credit, c.n_journeys));
    }
    out
}

#[cfg(test)]
mod tests;
