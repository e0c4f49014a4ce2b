//! Confounded journey simulator: homogeneous-Poisson ad exposures,
//! preference-dependent channel assignment, and an inhomogeneous-Poisson
//! conversion model with log-linear intensity
//! log lambda(t) = alpha_0 + alpha_user + sum_j beta_k e^{-omega_k (t-t_j)}.
//!
//! Confounding flows through a latent per-user preference vector: it can
//! drive the exposure rate (dynamic), the channel choice (static), both
//! (hybrid), or neither (unbiased), while always shifting the conversion
//! base rate. Times are days; emitted timestamps are seconds.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::artifacts::TruthRecord;
use crate::data::types::{
    Dataset, DatasetMeta, FeatureDef, Journey, Touchpoint, UserAttrDef, FORMAT_VERSION,
};
use crate::error::{CoreError, Result};
use crate::rng::{hash_bytes, rng_for};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Reference decay (per day) for the decayed-exposure feature accumulator.
const FEATURE_DECAY: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfounderSetting {
    DynamicOnly,
    StaticOnly,
    Hybrid,
    Unbiased,
}

impl ConfounderSetting {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConfounderSetting::DynamicOnly => "dynamic-only",
            ConfounderSetting::StaticOnly => "static-only",
            ConfounderSetting::Hybrid => "hybrid",
            ConfounderSetting::Unbiased => "unbiased",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dynamic-only" | "dynamic" => Ok(ConfounderSetting::DynamicOnly),
            "static-only" | "static" => Ok(ConfounderSetting::StaticOnly),
            "hybrid" => Ok(ConfounderSetting::Hybrid),
            "unbiased" => Ok(ConfounderSetting::Unbiased),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown setting {other:?}; expected dynamic-only, static-only, hybrid, or unbiased"
            ))),
        }
    }

    pub fn rate_depends_on_profile(&self) -> bool {
        matches!(self, ConfounderSetting::DynamicOnly | ConfounderSetting::Hybrid)
    }

    pub fn channels_depend_on_profile(&self) -> bool {
        matches!(self, ConfounderSetting::StaticOnly | ConfounderSetting::Hybrid)
    }
}

#[derive(Debug, Clone)]
pub struct UserProfile {
    /// Latent preference vector, standard normal per dimension.
    pub preference: Vec<f64>,
    /// Noisy bucketed view of the preference, what models get to see.
    pub attrs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ExposureParams {
    /// Base exposure rate, events per day.
    pub base_rate: f64,
    /// Per-dimension coupling of preference into the log exposure rate.
    pub rate_coupling: Vec<f64>,
    /// Channel-affinity matrix, d_u x K row-major.
    pub affinity: Vec<f64>,
    pub d_u: usize,
    pub k: usize,
    /// Journey horizon in days.
    pub horizon: f64,
}

#[derive(Debug, Clone)]
pub struct ConversionParams {
    pub alpha0: f64,
    /// Per-dimension coupling of preference into the log conversion rate.
    pub conv_coupling: Vec<f64>,
    /// Kernel amplitude per channel, beta_k >= 0.
    pub beta: Vec<f64>,
    /// Kernel decay per channel, omega_k > 0 (per day).
    pub omega: Vec<f64>,
}

impl ConversionParams {
    pub fn alpha_user(&self, profile: &[f64]) -> f64 {
        self.conv_coupling
            .iter()
            .zip(profile)
            .map(|(w, p)| w * p)
            .sum()
    }
}

/// Full generator configuration with desk-scale defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_journeys: usize,
    pub journeys_per_user: usize,
    pub k: usize,
    pub d_u: usize,
    pub horizon_days: f64,
    pub base_rate: f64,
    /// Strength of preference -> exposure-rate coupling (dynamic settings).
    pub rate_coupling: f64,
    /// Softmax scale of preference -> channel coupling (static settings).
    pub affinity_scale: f64,
    pub alpha0: f64,
    /// Strength of preference -> conversion coupling.
    pub conv_coupling: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub n_attr_buckets: usize,
    /// Noise added to preferences before bucketing into attrs.
    pub attr_noise: f64,
    /// Per-exposure cost scale; channel k costs cost_base*(0.4 + 1.2 k/(K-1)).
    pub cost_base: f64,
    /// Replaces the default beta ramp when set; must have one nonnegative
    /// entry per channel. Lets experiments plant a dominant channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_override: Option<Vec<f64>>,
    /// Total Simpson panel budget per journey for the truth integral.
    pub panels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_journeys: 20_000,
            journeys_per_user: 2,
            k: 10,
            d_u: 4,
            horizon_days: 14.0,
            base_rate: 0.8,
            rate_coupling: 0.35,
            affinity_scale: 1.2,
            alpha0: -5.15,
            conv_coupling: 0.45,
            beta_min: 0.1,
            beta_max: 0.55,
            omega_min: 0.8,
            omega_max: 1.2,
            n_attr_buckets: 4,
            attr_noise: 0.35,
            cost_base: 1.0,
            beta_override: None,
            panels: 2_048,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_journeys == 0
            || self.journeys_per_user == 0
            || self.k == 0
            || self.d_u == 0
            || self.n_attr_buckets < 2
        {
            return Err(CoreError::InvalidArgument(
                "n_journeys, journeys_per_user, k, d_u must be positive; buckets >= 2".into(),
            ));
        }
        if self.horizon_days <= 0.0 || self.base_rate < 0.0 {
            return Err(CoreError::InvalidArgument(
                "horizon must be positive and base rate nonnegative".into(),
            ));
        }
        if self.beta_min < 0.0 || self.beta_max < self.beta_min {
            return Err(CoreError::InvalidArgument("beta range invalid".into()));
        }
        if self.omega_min <= 0.0 || self.omega_max < self.omega_min {
            return Err(CoreError::InvalidArgument("omega range invalid".into()));
        }
        if self.panels < 2 {
            return Err(CoreError::InvalidArgument("panels must be >= 2".into()));
        }
        if let Some(b) = &self.beta_override {
            if b.len() != self.k || b.iter().any(|&v| !(v >= 0.0)) {
                return Err(CoreError::InvalidArgument(
                    "beta_override needs one nonnegative entry per channel".into(),
                ));
            }
        }
        Ok(())
    }

    /// Alternating-sign unit pattern scaled by `scale`; shared sign pattern
    /// between rate and conversion couplings is what creates confounding.
    fn signed(&self, scale: f64) -> Vec<f64> {
        (0..self.d_u)
            .map(|i| if i % 2 == 0 { scale } else { -scale })
            .collect()
    }

    pub fn exposure_params(&self, setting: ConfounderSetting) -> ExposureParams {
        let mut affinity = vec![0.0; self.d_u * self.k];
        if setting.channels_depend_on_profile() {
            for k in 0..self.k {
                affinity[(k % self.d_u) * self.k + k] = self.affinity_scale;
            }
        }
        ExposureParams {
            base_rate: self.base_rate,
            rate_coupling: if setting.rate_depends_on_profile() {
                self.signed(self.rate_coupling)
            } else {
                vec![0.0; self.d_u]
            },
            affinity,
            d_u: self.d_u,
            k: self.k,
            horizon: self.horizon_days,
        }
    }

    pub fn conversion_params(&self) -> ConversionParams {
        let span = (self.k - 1).max(1) as f64;
        ConversionParams {
            alpha0: self.alpha0,
            conv_coupling: self.signed(self.conv_coupling),
            beta: self.beta_override.clone().unwrap_or_else(|| {
                (0..self.k)
                    .map(|k| self.beta_min + (self.beta_max - self.beta_min) * k as f64 / span)
                    .collect()
            }),
            omega: (0..self.k)
                .map(|k| self.omega_min + (self.omega_max - self.omega_min) * k as f64 / span)
                .collect(),
        }
    }

    pub fn channel_cost(&self, channel: usize) -> f64 {
        let span = (self.k - 1).max(1) as f64;
        self.cost_base * (0.4 + 1.2 * channel as f64 / span)
    }

    pub fn config_hash(&self, setting: ConfounderSetting, seed: u64) -> String {
        let body = format!(
            "{}|{seed}|{}",
            setting.as_str(),
            serde_json::to_string(self).expect("config serializes")
        );
        format!("{:016x}", hash_bytes(0, body.as_bytes()))
    }
}

/// Homogeneous Poisson times in [0, horizon), strictly increasing.
pub fn sample_exposure_times(rate: f64, horizon: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut times = Vec::new();
    if rate <= 0.0 || horizon <= 0.0 {
        return times;
    }
    let exp = Exp::new(rate).expect("rate > 0");
    let mut t = 0.0;
    loop {
        t += exp.sample(rng);
        if t >= horizon {
            return times;
        }
        times.push(t);
    }
}

/// Per-event channel draw: softmax(A^T preference) when the setting couples
/// channels to the profile, uniform otherwise.
pub fn assign_channels(
    times: &[f64],
    profile: &UserProfile,
    setting: ConfounderSetting,
    params: &ExposureParams,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let k = params.k;
    let probs: Vec<f64> = if setting.channels_depend_on_profile() {
        let mut logits = vec![0.0; k];
        for (i, p) in profile.preference.iter().enumerate() {
            for (c, l) in logits.iter_mut().enumerate() {
                *l += params.affinity[i * k + c] * p;
            }
        }
        crate::nn::tape::softmax_slice(&logits)
    } else {
        vec![1.0 / k as f64; k]
    };
    times
        .iter()
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return c;
                }
            }
            k - 1
        })
        .collect()
}

/// lambda(t) = exp(alpha_0 + alpha_user + sum_j beta_{k_j} e^{-omega_{k_j}(t - t_j)})
/// over history exposures with t_j <= t.
pub fn conversion_intensity(
    t: f64,
    history: &[(f64, usize)],
    alpha_user: f64,
    params: &ConversionParams,
) -> f64 {
    let mut log_rate = params.alpha0 + alpha_user;
    for &(tj, ch) in history {
        if tj <= t {
            log_rate += params.beta[ch] * (-params.omega[ch] * (t - tj)).exp();
        }
    }
    log_rate.exp()
}

/// P(at least one conversion event in [0, horizon]) = 1 - exp(-Lambda),
/// Lambda = integral of lambda. The intensity jumps at each exposure, so
/// Simpson quadrature runs piecewise between exposures; `panels` is the
/// total panel budget, distributed over segments by length.
pub fn conversion_probability(
    exposures: &[(f64, usize)],
    alpha_user: f64,
    params: &ConversionParams,
    horizon: f64,
    panels: usize,
) -> Result<f64> {
    if horizon <= 0.0 {
        return Ok(0.0);
    }
    for w in exposures.windows(2) {
        if w[1].0 < w[0].0 {
            return Err(CoreError::InvalidArgument(
                "exposures must be time-sorted".into(),
            ));
        }
    }
    let base = params.alpha0 + alpha_user;
    let k = params.beta.len();

    // Segment boundaries: 0, each in-horizon exposure time, horizon.
    let mut bounds = vec![0.0];
    for &(tj, _) in exposures {
        if tj > 0.0 && tj < horizon && *bounds.last().unwrap() != tj {
            bounds.push(tj);
        }
    }
    bounds.push(horizon);

    // Kernel state at the current left boundary, grouped by channel so each
    // grid step costs K multiplies and one exp.
    let mut kernel = vec![0.0f64; k];
    let mut next_exposure = 0usize;
    // Exposures at t = 0 are active from the start.
    while next_exposure < exposures.len() && exposures[next_exposure].0 <= 0.0 {
        let (_, ch) = exposures[next_exposure];
        kernel[ch] += params.beta[ch];
        next_exposure += 1;
    }

    let mut lambda_total = 0.0;
    let n_segments = bounds.len() - 1;
    for s in 0..n_segments {
        let (a, b) = (bounds[s], bounds[s + 1]);
        let len = b - a;
        if len <= 0.0 {
            continue;
        }
        // Even panel count per segment, at least 2, sharing the budget.
        let share = ((panels as f64) * (len / horizon)).ceil() as usize;
        let n = share.max(2).div_ceil(2) * 2;
        let h = len / n as f64;

        let decay: Vec<f64> = params.omega.iter().map(|w| (-w * h).exp()).collect();
        let mut seg_kernel = kernel.clone();
        let lambda_at = |kern: &[f64]| (base + kern.iter().sum::<f64>()).exp();

        // Simpson: h/3 (f0 + 4 f_odd + 2 f_even + fn).
        let mut sum = lambda_at(&seg_kernel);
        for i in 1..n {
            for (c, d) in seg_kernel.iter_mut().zip(&decay) {
                *c *= d;
            }
            sum += lambda_at(&seg_kernel) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        for (c, d) in seg_kernel.iter_mut().zip(&decay) {
            *c *= d;
        }
        sum += lambda_at(&seg_kernel);
        lambda_total += sum * h / 3.0;

        // Advance the boundary state to b and absorb the exposure that
        // starts there (its Delta = 0 contribution is exact).
        for (c, (w, _)) in kernel.iter_mut().zip(params.omega.iter().zip(&params.beta)) {
            *c *= (-w * len).exp();
        }
        while next_exposure < exposures.len() && exposures[next_exposure].0 <= b {
            let (tj, ch) = exposures[next_exposure];
            kernel[ch] += params.beta[ch] * (-params.omega[ch] * (b - tj)).exp();
            next_exposure += 1;
        }
    }
    Ok(1.0 - (-lambda_total).exp())
}

/// Rational approximation of the standard-normal quantile (Acklam form),
/// |error| < 1.2e-8 over (0, 1). Used only to place attr bucket thresholds.
fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

fn sample_profile(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> UserProfile {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let preference: Vec<f64> = (0..cfg.d_u).map(|_| normal.sample(rng)).collect();
    // Bucket a noisy view by quantiles of its own marginal so buckets are
    // roughly equally likely.
    let sigma = (1.0 + cfg.attr_noise * cfg.attr_noise).sqrt();
    let attrs = preference
        .iter()
        .map(|&p| {
            let noisy = p + cfg.attr_noise * normal.sample(rng);
            let mut bucket = 0;
            for b in 1..cfg.n_attr_buckets {
                let cut = sigma * normal_quantile(b as f64 / cfg.n_attr_buckets as f64);
                if noisy > cut {
                    bucket = b;
                }
            }
            bucket
        })
        .collect();
    UserProfile { preference, attrs }
}

fn exposure_rate(profile: &UserProfile, params: &ExposureParams) -> f64 {
    let coupling: f64 = params
        .rate_coupling
        .iter()
        .zip(&profile.preference)
        .map(|(w, p)| w * p)
        .sum();
    // Clamp so journey lengths stay desk-scale even in the tails.
    params.base_rate * coupling.clamp(-1.2, 1.2).exp()
}

pub struct GeneratedData {
    pub dataset: Dataset,
    pub truth: Vec<TruthRecord>,
}

/// Generate `cfg.n_journeys` journeys. Each journey draws from an rng
/// derived from (seed, journey index), so output is identical regardless
/// of thread count, and empty exposure draws resample deterministically.
pub fn generate_dataset(
    setting: ConfounderSetting,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<GeneratedData> {
    cfg.validate()?;
    let exposure = cfg.exposure_params(setting);
    let conversion = cfg.conversion_params();

    let journeys: Vec<(Journey, f64)> = (0..cfg.n_journeys)
        .into_par_iter()
        .map(|idx| {
            let user = idx / cfg.journeys_per_user;
            let mut user_rng = rng_for(seed, &format!("user|{user}"));
            let profile = sample_profile(cfg, &mut user_rng);
            let rate = if setting.rate_depends_on_profile() {
                exposure_rate(&profile, &exposure)
            } else {
                exposure.base_rate
            };
            let alpha_user = conversion.alpha_user(&profile.preference);

            let mut attempt = 0u32;
            let (times, channels, mut rng) = loop {
                let mut rng = rng_for(seed, &format!("journey|{idx}|{attempt}"));
                let times = sample_exposure_times(rate, exposure.horizon, &mut rng);
                if !times.is_empty() {
                    let channels = assign_channels(&times, &profile, setting, &exposure, &mut rng);
                    break (times, channels, rng);
                }
                attempt += 1;
            };

            let exposures: Vec<(f64, usize)> =
                times.iter().copied().zip(channels.iter().copied()).collect();
            let p_true = conversion_probability(
                &exposures,
                alpha_user,
                &conversion,
                exposure.horizon,
                cfg.panels,
            )
            .expect("sorted exposures");
            let converted = rng.random::<f64>() < p_true;

            let mut decayed = 0.0f64;
            let mut prev_t = 0.0f64;
            let touchpoints = exposures
                .iter()
                .enumerate()
                .map(|(i, &(t, ch))| {
                    if i > 0 {
                        decayed = (decayed + 1.0) * (-FEATURE_DECAY * (t - prev_t)).exp();
                    }
                    let gap = if i == 0 { 0.0 } else { t - prev_t };
                    prev_t = t;
                    Touchpoint {
                        channel: ch,
                        ts: t * SECONDS_PER_DAY,
                        features: vec![gap, i as f64, decayed],
                        cost: Some(cfg.channel_cost(ch)),
                    }
                })
                .collect();

            (
                Journey {
                    user_id: format!("u{user}"),
                    user_attrs: profile.attrs.clone(),
                    touchpoints,
                    converted,
                },
                p_true,
            )
        })
        .collect();

    let truth = journeys
        .iter()
        .enumerate()
        .map(|(index, (_, p_true))| TruthRecord {
            index,
            p_true: *p_true,
            setting: setting.as_str().to_string(),
        })
        .collect();
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        n_channels: cfg.k,
        features: vec![
            FeatureDef::real("gap_d"),
            FeatureDef::real("position"),
            FeatureDef::real("decayed_exposure"),
        ],
        user_attrs: (0..cfg.d_u)
            .map(|i| UserAttrDef {
                name: format!("pref{i}"),
                cardinality: cfg.n_attr_buckets,
            })
            .collect(),
        config_hash: cfg.config_hash(setting, seed),
        seed,
    };
    let dataset = Dataset::new(journeys.into_iter().map(|(j, _)| j).collect(), meta)?;
    Ok(GeneratedData { dataset, truth })
}
