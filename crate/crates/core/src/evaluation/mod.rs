//! Metrics, classical baselines, budget data-replay, and executable checks
//! of the two theory identities behind the pipeline (reweighted-risk
//! equality and the reverse-branch JSD identity).

use serde::{Deserialize, Serialize};

use crate::data::{AttributionRecord, Dataset, Journey};
use crate::error::{CoreError, Result};
use crate::nn::EPS_PROB;


/// Conversion-prediction quality on one journey set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(CoreError::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(CoreError::InvalidArgument("no scores".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(CoreError::InvalidArgument(format!("non-finite score {s}")));
    }
    Ok(())
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Computed via average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::InvalidArgument(
            "AUC needs both a positive and a negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average rank over each tie group keeps ties worth exactly 0.5
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean binary cross-entropy with probabilities clamped away from {0, 1}.
pub fn logloss(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(CoreError::InvalidArgument(format!(
            "probability {s} outside [0, 1]"
        )));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(EPS_PROB, 1.0 - EPS_PROB);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

pub fn metrics(scores: &[f64], labels: &[bool]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        auc: auc(scores, labels)?,
        logloss: logloss(scores, labels)?,
        n: scores.len(),
    })
}

/// Per-channel conversion rates for the noisy-or baseline, estimated as
/// the fraction of each channel's impressions that sit in a converted
/// journey.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpModel {
    pub rates: Vec<f64>,
}

pub fn sp_fit(ds: &Dataset) -> SpModel {
    let k = ds.meta.n_channels;
    let mut hits = vec![0usize; k];
    let mut seen = vec![0usize; k];
    for j in &ds.journeys {
        for tp in &j.touchpoints {
            seen[tp.channel] += 1;
            if j.converted {
                hits[tp.channel] += 1;
            }
        }
    }
    let rates = hits
        .iter()
        .zip(&seen)
        .map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 })
        .collect();
    SpModel { rates }
}

/// Noisy-or conversion probability: 1 - prod_j (1 - rate(c_j)).
pub fn sp_predict(rates: &[f64], journey: &Journey) -> f64 {
    let miss: f64 = journey
        .touchpoints
        .iter()
        .map(|tp| 1.0 - rates[tp.channel])
        .product();
    1.0 - miss
}

impl SpModel {
    pub fn predict(&self, journey: &Journey) -> f64 {
        sp_predict(&self.rates, journey)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            epochs: 300,
            lr: 0.3,
        }
    }
}

/// Logistic regression on channel-count vectors plus user-attribute
/// one-hots, trained by full-batch gradient descent (deterministic, zero
/// init). Channel coefficients double as the LR attribution baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrModel {
    pub n_channels: usize,
    pub attr_cards: Vec<usize>,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

fn lr_features(journey: &Journey, n_channels: usize, attr_cards: &[usize]) -> Vec<f64> {
    let dim: usize = n_channels + attr_cards.iter().sum::<usize>();
    let mut x = vec![0.0; dim];
    for tp in &journey.touchpoints {
        x[tp.channel] += 1.0;
    }
    let mut base = n_channels;
    for (f, &card) in attr_cards.iter().enumerate() {
        x[base + journey.user_attrs[f]] = 1.0;
        base += card;
    }
    x
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn lr_fit(ds: &Dataset, cfg: &LrConfig) -> Result<LrModel> {
    if ds.n() == 0 {
        return Err(CoreError::InvalidArgument("empty dataset".into()));
    }
    let attr_cards: Vec<usize> = ds.meta.user_attrs.iter().map(|a| a.cardinality).collect();
    let rows: Vec<Vec<f64>> = ds
        .journeys
        .iter()
        .map(|j| lr_features(j, ds.meta.n_channels, &attr_cards))
        .collect();
    let ys: Vec<f64> = ds
        .journeys
        .iter()
        .map(|j| if j.converted { 1.0 } else { 0.0 })
        .collect();
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, &y) in rows.iter().zip(&ys) {
            let z = b + x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>();
            let err = sigmoid(z) - y;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * g / n;
        }
        b -= cfg.lr * gb / n;
    }
    Ok(LrModel {
        n_channels: ds.meta.n_channels,
        attr_cards,
        weights: w,
        intercept: b,
    })
}

impl LrModel {
    pub fn predict(&self, journey: &Journey) -> f64 {
        let x = lr_features(journey, self.n_channels, &self.attr_cards);
        let z = self.intercept
            + x.iter()
                .zip(&self.weights)
                .map(|(xi, wi)| xi * wi)
                .sum::<f64>();
        sigmoid(z)
    }

    /// Learned channel-count coefficients, the LR attribution values.
    pub fn channel_attribution(&self) -> &[f64] {
        &self.weights[..self.n_channels]
    }
}

/// Rule baseline: the final touchpoint gets all the credit.
pub fn last_touch(journey: &Journey) -> Vec<f64> {
    let t = journey.len();
    let mut credit = vec![0.0; t];
    if t > 0 {
        credit[t - 1] = 1.0;
    }
    credit
}

/// One channel's share of the value/cost ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRoi {
    pub channel: usize,
    /// Sum of credit * V over converted journeys touching this channel.
    pub value: f64,
    /// Unscaled spend on this channel across the whole dataset.
    pub cost: f64,
    /// value / (cost * cost_scale); infinite when the channel cost is 0.
    pub roi: f64,
    pub budget_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRoiReport {
    pub channels: Vec<ChannelRoi>,
    pub warnings: Vec<String>,
}

impl ChannelRoiReport {
    pub fn budget_weights(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.budget_weight).collect()
    }
}

fn touchpoint_cost(cost: Option<f64>) -> f64 {
    cost.unwrap_or(1.0)
}

/// Aggregates per-journey credits into channel ROI and normalized budget
/// weights. Costs sum over every journey in the dataset; value sums over
/// the credited converted journeys.
pub fn channel_roi(
    ds: &Dataset,
    credits: &[AttributionRecord],
    v_value: f64,
    cost_scale: f64,
) -> Result<ChannelRoiReport> {
    if cost_scale <= 0.0 || !cost_scale.is_finite() {
        return Err(CoreError::InvalidArgument(format!(
            "cost_scale {cost_scale} must be positive"
        )));
    }
    let k = ds.meta.n_channels;
    let mut value = vec![0.0; k];
    let mut cost = vec![0.0; k];
    for j in &ds.journeys {
        for tp in &j.touchpoints {
            cost[tp.channel] += touchpoint_cost(tp.cost);
        }
    }
    for rec in credits {
        let j = ds
            .journeys
            .get(rec.index)
            .ok_or_else(|| CoreError::InvalidArgument(format!("record index {}", rec.index)))?;
        if rec.credit.len() != j.len() {
            return Err(CoreError::InvalidArgument(format!(
                "journey {}: {} credits for {} touchpoints",
                rec.index,
                rec.credit.len(),
                j.len()
            )));
        }
        if !j.converted {
            continue;
        }
        for (tp, &a) in j.touchpoints.iter().zip(&rec.credit) {
            value[tp.channel] += a * v_value;
        }
    }
    let mut warnings = Vec::new();
    let mut channels: Vec<ChannelRoi> = (0..k)
        .map(|c| {
            let roi = if cost[c] > 0.0 {
                value[c] / (cost[c] * cost_scale)
            } else {
                f64::INFINITY
            };
            ChannelRoi {
                channel: c,
                value: value[c],
                cost: cost[c],
                roi,
                budget_weight: 0.0,
            }
        })
        .collect();
    let finite_total: f64 = channels
        .iter()
        .map(|c| if c.roi.is_finite() { c.roi } else { 0.0 })
        .sum();
    for c in &mut channels {
        if !c.roi.is_finite() {
            warnings.push(format!(
                "channel {} has zero cost; excluded from budget normalization",
                c.channel
            ));
        }
    }
    if finite_total > 0.0 {
        for c in &mut channels {
            if c.roi.is_finite() {
                c.budget_weight = c.roi / finite_total;
            }
        }
    } else {
        warnings.push("no channel has positive finite ROI; using uniform budget weights".into());
        for c in &mut channels {
            c.budget_weight = 1.0 / k as f64;
        }
    }
    Ok(ChannelRoiReport { channels, warnings })
}

/// Back-evaluation of one (budget weights, fraction) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub fraction: f64,
    pub selected: usize,
    pub conversions: usize,
    /// Scaled spend per conversion; None when nothing converted.
    pub cpa: Option<f64>,
    pub cvr: f64,
    pub profit: f64,
    /// Unscaled spend over the selected journeys.
    pub spent: f64,
}

/// Replays the test set under a budget: each channel gets
/// fraction * total_cost * weight, journeys are scanned in order of first
/// touchpoint timestamp, and a journey is admitted only if every channel
/// it touches can absorb its full cost (all-or-nothing), debiting as it
/// goes.
pub fn replay(
    test: &Dataset,
    budget_weights: &[f64],
    fraction: f64,
    v_profit: f64,
    cost_scale: f64,
) -> Result<ReplayReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "budget fraction {fraction} outside (0, 1]"
        )));
    }
    let k = test.meta.n_channels;
    if budget_weights.len() != k {
        return Err(CoreError::InvalidArgument(format!(
            "{} budget weights for {} channels",
            budget_weights.len(),
            k
        )));
    }
    if budget_weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
        return Err(CoreError::InvalidArgument("budget weights outside [0, 1]".into()));
    }
    let total_w: f64 = budget_weights.iter().sum();
    if (total_w - 1.0).abs() > 1e-6 {
        return Err(CoreError::InvalidArgument(format!(
            "budget weights sum to {total_w}, expected 1"
        )));
    }
    let total_cost: f64 = test
        .journeys
        .iter()
        .flat_map(|j| &j.touchpoints)
        .map(|tp| touchpoint_cost(tp.cost))
        .sum();
    let mut remaining: Vec<f64> = budget_weights
        .iter()
        .map(|w| fraction * total_cost * w)
        .collect();
    // absolute slack so summation roundoff cannot reject a journey the
    // budget covers exactly
    let slack = 1e-9 * total_cost.max(1.0);

    let mut order: Vec<usize> = (0..test.n()).collect();
    order.sort_by(|&a, &b| {
        let ta = test.journeys[a].touchpoints[0].ts;
        let tb = test.journeys[b].touchpoints[0].ts;
        ta.partial_cmp(&tb).unwrap().then(a.cmp(&b))
    });

    let mut selected = 0usize;
    let mut conversions = 0usize;
    let mut spent = 0.0;
    let mut demand = vec![0.0; k];
    for &i in &order {
        let j = &test.journeys[i];
        demand.iter_mut().for_each(|d| *d = 0.0);
        for tp in &j.touchpoints {
            demand[tp.channel] += touchpoint_cost(tp.cost);
        }
        let fits = demand
            .iter()
            .zip(&remaining)
            .all(|(&d, &r)| d <= r + slack);
        if !fits {
            continue;
        }
        for (r, &d) in remaining.iter_mut().zip(&demand) {
            *r -= d;
        }
        selected += 1;
        spent += demand.iter().sum::<f64>();
        if j.converted {
            conversions += 1;
        }
    }
    let cpa = if conversions > 0 {
        Some(spent * cost_scale / conversions as f64)
    } else {
        None
    };
    let cvr = if selected > 0 {
        conversions as f64 / selected as f64
    } else {
        0.0
    };
    let profit = conversions as f64 * v_profit - spent * cost_scale;
    Ok(ReplayReport {
        fraction,
        selected,
        conversions,
        cpa,
        cvr,
        profit,
        spent,
    })
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(CoreError::InvalidArgument("empty distribution".into()));
    }
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(CoreError::InvalidArgument("probability outside [0, 1]".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CoreError::InvalidArgument(format!(
            "distribution sums to {total}"
        )));
    }
    Ok(())
}

/// Numerically checks that the reverse-branch objective equals
/// K * JSD(p_1..p_K) - K log K on discrete distributions.
///
/// Returns (lhs, rhs): lhs sums E_{v~p_k}[log(p_k(v) / sum_m p_m(v))]
/// directly; rhs goes through the mixture KL form of the multi-
/// distribution JSD. The two are computed by different reductions, so
/// their agreement is a genuine check of the identity.
pub fn theory_jsd_identity(dists: &[Vec<f64>]) -> Result<(f64, f64)> {
    if dists.len() < 2 {
        return Err(CoreError::InvalidArgument("need at least two distributions".into()));
    }
    let n = dists[0].len();
    for p in dists {
        if p.len() != n {
            return Err(CoreError::InvalidArgument("distributions on different grids".into()));
        }
        check_distribution(p)?;
    }
    let k = dists.len() as f64;
    let mut lhs = 0.0;
    for p in dists {
        for (v, &pv) in p.iter().enumerate() {
            if pv > 0.0 {
                let denom: f64 = dists.iter().map(|q| q[v]).sum();
                lhs += pv * (pv / denom).ln();
            }
        }
    }
    let mean: Vec<f64> = (0..n)
        .map(|v| dists.iter().map(|q| q[v]).sum::<f64>() / k)
        .collect();
    let mut jsd = 0.0;
    for p in dists {
        for (v, &pv) in p.iter().enumerate() {
            if pv > 0.0 {
                jsd += pv * (pv / mean[v]).ln();
            }
        }
    }
    jsd /= k;
    let rhs = k * jsd - k * k.ln();
    Ok((lhs, rhs))
}

/// Finite (user, channel-assignment, outcome) world where every
/// expectation is an exact sum.
#[derive(Debug, Clone)]
pub struct DiscreteToy {
    /// p(u)
    pub p_u: Vec<f64>,
    /// p(C | u), one row per user state
    pub p_c_given_u: Vec<Vec<f64>>,
    /// loss of the fixed predictor at (u, C)
    pub loss: Vec<Vec<f64>>,
}

/// Risks of the same predictor under three samplings of (u, C).
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightCheck {
    /// counterfactual risk: u ~ p(u), C ~ p(C) independently
    pub e_cf: f64,
    /// observational risk reweighted by W_T = p(C)/p(C|u)
    pub e_fw: f64,
    /// plain observational risk (W_T = 1)
    pub e_f: f64,
}

/// Computes the counterfactual, reweighted, and plain observational risks
/// exactly. e_fw multiplies the joint density by the literal weight ratio
/// term by term, so e_cf == e_fw checks the reweighting identity through
/// a different arithmetic path rather than by construction.
pub fn theory_reweight_equivalence(toy: &DiscreteToy) -> Result<ReweightCheck> {
    let nu = toy.p_u.len();
    if nu == 0 || toy.p_c_given_u.len() != nu || toy.loss.len() != nu {
        return Err(CoreError::InvalidArgument("toy tables misaligned".into()));
    }
    check_distribution(&toy.p_u)?;
    let nc = toy.p_c_given_u[0].len();
    for (row, lrow) in toy.p_c_given_u.iter().zip(&toy.loss) {
        if row.len() != nc || lrow.len() != nc {
            return Err(CoreError::InvalidArgument("toy tables misaligned".into()));
        }
        check_distribution(row)?;
        if lrow.iter().any(|l| !l.is_finite()) {
            return Err(CoreError::InvalidArgument("non-finite loss entry".into()));
        }
    }
    let p_c: Vec<f64> = (0..nc)
        .map(|c| {
            toy.p_u
                .iter()
                .zip(&toy.p_c_given_u)
                .map(|(&pu, row)| pu * row[c])
                .sum()
        })
        .collect();
    for (u, row) in toy.p_c_given_u.iter().enumerate() {
        for (c, &pcu) in row.iter().enumerate() {
            if toy.p_u[u] > 0.0 && pcu == 0.0 && p_c[c] > 0.0 {
                return Err(CoreError::InvalidArgument(format!(
                    "positivity violated: p(C={c}|u={u}) = 0 but p(C={c}) > 0"
                )));
            }
        }
    }
    let mut e_cf = 0.0;
    let mut e_fw = 0.0;
    let mut e_f = 0.0;
    for (u, &pu) in toy.p_u.iter().enumerate() {
        for c in 0..nc {
            let pcu = toy.p_c_given_u[u][c];
            let l = toy.loss[u][c];
            e_cf += pu * p_c[c] * l;
            e_f += pu * pcu * l;
            if pcu > 0.0 {
                e_fw += pu * pcu * l * (p_c[c] / pcu);
            }
        }
    }
    Ok(ReweightCheck { e_cf, e_fw, e_f })
}
