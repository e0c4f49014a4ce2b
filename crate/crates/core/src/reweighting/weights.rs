//! Variational sample weights.
//!
//! w_i = ( (1/S) Σ_s 1/W_z(u_i, z_s) )^{-1} with z_s drawn from the trained
//! posterior q(z|c_i). The harmonic mean over density ratios approximates
//! p(C_i)/p(C_i|u_i), down-weighting journeys a user was unusually likely
//! to receive.

use rayon::prelude::*;

use crate::data::{Dataset, WeightRecord};
use crate::error::{CoreError, Result};
use crate::rng::rng_indexed;

use super::domain::{density_ratios_batch, DomainClassifierParams};
use super::vrae::{vrae_posteriors, VraeParams};
use super::ReweightConfig;

#[derive(Debug, Clone)]
pub struct JourneyWeights {
    pub records: Vec<WeightRecord>,
    pub w_min: f64,
    pub w_max: f64,
    pub s: usize,
    pub normalized: bool,
}

impl JourneyWeights {
    pub fn weights(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.w).collect()
    }
}

/// Clip into [w_min, w_max], then rescale to mean 1, iterating because the
/// rescale can push weights back outside the bounds. The fixpoint keeps
/// both invariants: every weight within bounds and mean within 1e-9 of 1.
pub(crate) fn clip_normalize(w: &mut [f64], w_min: f64, w_max: f64) -> Result<()> {
    for _ in 0..1000 {
        for v in w.iter_mut() {
            *v = v.clamp(w_min, w_max);
        }
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        if !mean.is_finite() || mean <= 0.0 {
            return Err(CoreError::Numeric("weight mean not positive".into()));
        }
        if (mean - 1.0).abs() <= 1e-12 {
            return Ok(());
        }
        for v in w.iter_mut() {
            *v /= mean;
        }
    }
    Err(CoreError::Numeric(
        "weight clip/normalize did not converge".into(),
    ))
}

/// Estimate one weight per training journey. Per-journey rngs are derived
/// from (seed, index), so the rayon worker count cannot change results.
pub fn estimate_weights(
    train: &Dataset,
    vrae: &VraeParams,
    clf: &DomainClassifierParams,
    cfg: &ReweightConfig,
) -> Result<JourneyWeights> {
    if train.n() == 0 {
        return Err(CoreError::InvalidArgument("empty training set".into()));
    }
    if cfg.s_samples < 1 || cfg.w_min <= 0.0 || cfg.w_min > cfg.w_max {
        return Err(CoreError::InvalidArgument(
            "need S >= 1 and 0 < w_min <= w_max".into(),
        ));
    }
    let sequences: Vec<Vec<usize>> = train.journeys.iter().map(|j| j.channels()).collect();
    let refs: Vec<&[usize]> = sequences.iter().map(|s| s.as_slice()).collect();
    let posteriors = vrae_posteriors(vrae, &refs)?;

    let raw: Vec<f64> = posteriors
        .par_iter()
        .enumerate()
        .map(|(i, post)| -> Result<f64> {
            let mut rng = rng_indexed(cfg.seed, "weights", i as u64);
            // Antithetic pairs (mu + s*eps, mu - s*eps) halve the MC
            // variance of the harmonic mean at no extra classifier cost.
            let mut zs: Vec<Vec<f64>> = Vec::with_capacity(cfg.s_samples);
            while zs.len() < cfg.s_samples {
                let z = post.sample(&mut rng);
                if zs.len() + 1 < cfg.s_samples {
                    let mirror: Vec<f64> = z
                        .iter()
                        .zip(&post.mu)
                        .map(|(zv, m)| 2.0 * m - zv)
                        .collect();
                    zs.push(z);
                    zs.push(mirror);
                } else {
                    zs.push(z);
                }
            }
            let ratios = density_ratios_batch(&train.journeys[i].user_attrs, &zs, clf)?;
            let inv_mean =
                ratios.iter().map(|w| 1.0 / w).sum::<f64>() / cfg.s_samples as f64;
            let w = 1.0 / inv_mean;
            if !w.is_finite() || w <= 0.0 {
                return Err(CoreError::NonFinite(format!("weight for journey {i}")));
            }
            Ok(w)
        })
        .collect::<Result<Vec<f64>>>()?;

    let clip_hit: Vec<bool> = raw
        .iter()
        .map(|&w| w < cfg.w_min || w > cfg.w_max)
        .collect();
    let mut w = raw;
    if cfg.normalize {
        clip_normalize(&mut w, cfg.w_min, cfg.w_max)?;
    } else {
        for v in w.iter_mut() {
            *v = v.clamp(cfg.w_min, cfg.w_max);
        }
    }
    let records = w
        .iter()
        .zip(&clip_hit)
        .enumerate()
        .map(|(index, (&w, &clip_hit))| WeightRecord {
            index,
            w,
            s: cfg.s_samples,
            clip_hit,
        })
        .collect();
    Ok(JourneyWeights {
        records,
        w_min: cfg.w_min,
        w_max: cfg.w_max,
        s: cfg.s_samples,
        normalized: cfg.normalize,
    })
}
