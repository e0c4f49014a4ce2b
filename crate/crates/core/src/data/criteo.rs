//! Raw ad-impression logs and the journey-construction rules used for
//! Criteo-style data: keep the most-exposed campaigns, group impressions
//! into journeys, split stale non-converting streaks, and drop stubs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::data::types::{Dataset, DatasetMeta, FeatureDef, Journey, Touchpoint, FORMAT_VERSION};
use crate::error::{CoreError, Result};
use crate::rng::hash_bytes;

#[derive(Debug, Clone, PartialEq)]
pub struct RawImpression {
    pub timestamp: f64,
    pub user_id: String,
    pub campaign: String,
    pub click: bool,
    /// -1 when the impression is not attributed to any conversion.
    pub conversion_id: i64,
    pub cost: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct PreprocessConfig {
    pub top_n: usize,
    pub min_len: usize,
    pub gap_days: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            top_n: 10,
            min_len: 3,
            gap_days: 3.0,
        }
    }
}

#[derive(Debug)]
pub struct PreprocessOutput {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

/// Read impressions from CSV. The header must name at least
/// `timestamp,uid,campaign,click,conversion_id`; a `cost` column is
/// picked up when present and other columns are ignored.
pub fn read_impressions_csv(path: &Path) -> Result<Vec<RawImpression>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CoreError::Data(format!("missing required CSV column {name}")))
    };
    let c_ts = col("timestamp")?;
    let c_uid = col("uid")?;
    let c_campaign = col("campaign")?;
    let c_click = col("click")?;
    let c_conv = col("conversion_id")?;
    let c_cost = headers.iter().position(|h| h == "cost");

    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2; // 1-based, after the header
        let field = |idx: usize| -> Result<&str> {
            record.get(idx).ok_or(CoreError::DataLine {
                line,
                msg: "short CSV record".into(),
            })
        };
        let timestamp: f64 = field(c_ts)?.trim().parse().map_err(|_| CoreError::DataLine {
            line,
            msg: format!("bad timestamp {:?}", field(c_ts).unwrap_or("")),
        })?;
        let click = match field(c_click)?.trim() {
            "1" | "true" => true,
            "0" | "false" | "" => false,
            other => {
                return Err(CoreError::DataLine {
                    line,
                    msg: format!("bad click flag {other:?}"),
                })
            }
        };
        let conv_raw = field(c_conv)?.trim();
        let conversion_id: i64 = if conv_raw.is_empty() {
            -1
        } else {
            conv_raw.parse().map_err(|_| CoreError::DataLine {
                line,
                msg: format!("bad conversion_id {conv_raw:?}"),
            })?
        };
        let cost = match c_cost {
            Some(c) => {
                let raw = field(c)?.trim();
                if raw.is_empty() {
                    None
                } else {
                    Some(raw.parse().map_err(|_| CoreError::DataLine {
                        line,
                        msg: format!("bad cost {raw:?}"),
                    })?)
                }
            }
            None => None,
        };
        out.push(RawImpression {
            timestamp,
            user_id: field(c_uid)?.to_string(),
            campaign: field(c_campaign)?.to_string(),
            click,
            conversion_id,
            cost,
        });
    }
    Ok(out)
}

/// Campaign ordering for ranks and tie-breaks: numeric when both ids parse
/// as integers, lexicographic otherwise.
fn campaign_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

/// Build journeys from raw impressions:
/// (i) keep only the `top_n` campaigns by impression count,
/// (ii) group by (user, conversion id) and sort each group by time,
/// (iii) split non-converting groups at gaps longer than `gap_days`,
/// (iv) drop journeys shorter than `min_len`,
/// (v) label journeys with a conversion id as converted.
///
/// Channel indices are assigned by descending touchpoint frequency in the
/// final journeys (ties by campaign id ascending), which makes the whole
/// construction idempotent: rebuilding from its own output changes nothing.
pub fn criteo_preprocess(
    records: &[RawImpression],
    cfg: &PreprocessConfig,
) -> Result<PreprocessOutput> {
    if records.is_empty() {
        return Err(CoreError::Data("no raw impressions".into()));
    }
    if cfg.top_n == 0 || cfg.min_len == 0 {
        return Err(CoreError::InvalidArgument(
            "top_n and min_len must be positive".into(),
        ));
    }
    let mut warnings = Vec::new();

    // (i) impression counts over the raw input pick the campaign set.
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(r.campaign.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| campaign_cmp(a.0, b.0)));
    if ranked.len() < cfg.top_n {
        warnings.push(format!(
            "only {} distinct campaigns, requested top {}; using all",
            ranked.len(),
            cfg.top_n
        ));
    }
    let kept: Vec<&str> = ranked
        .iter()
        .take(cfg.top_n)
        .map(|(c, _)| *c)
        .collect();
    let kept_set: std::collections::HashSet<&str> = kept.iter().copied().collect();

    // (ii) group by (user, conversion id), time-sorted. BTreeMap ordering
    // keeps the construction deterministic.
    let mut groups: BTreeMap<(&str, i64), Vec<&RawImpression>> = BTreeMap::new();
    for r in records {
        if kept_set.contains(r.campaign.as_str()) {
            groups.entry((r.user_id.as_str(), r.conversion_id)).or_default().push(r);
        }
    }
    for g in groups.values_mut() {
        g.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }

    // (iii)+(iv)+(v)
    let gap_secs = cfg.gap_days * 86_400.0;
    let mut raw_journeys: Vec<(Vec<&RawImpression>, bool)> = Vec::new();
    for ((_, conv_id), imps) in &groups {
        if *conv_id == -1 {
            let mut start = 0usize;
            for i in 1..=imps.len() {
                let split_here = i == imps.len()
                    || imps[i].timestamp - imps[i - 1].timestamp > gap_secs;
                if split_here {
                    if i - start >= cfg.min_len {
                        raw_journeys.push((imps[start..i].to_vec(), false));
                    }
                    start = i;
                }
            }
        } else if imps.len() >= cfg.min_len {
            raw_journeys.push((imps.clone(), true));
        }
    }
    if raw_journeys.is_empty() {
        return Err(CoreError::Data(
            "preprocessing left no journeys (all dropped)".into(),
        ));
    }

    // Channel assignment by surviving-touchpoint frequency.
    let mut survivor_counts: HashMap<&str, usize> = HashMap::new();
    for (imps, _) in &raw_journeys {
        for r in imps {
            *survivor_counts.entry(r.campaign.as_str()).or_default() += 1;
        }
    }
    let mut final_rank: Vec<(&str, usize)> = survivor_counts.into_iter().collect();
    final_rank.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| campaign_cmp(a.0, b.0)));
    let channel_of: HashMap<&str, usize> = final_rank
        .iter()
        .enumerate()
        .map(|(i, (c, _))| (*c, i))
        .collect();
    let k = channel_of.len();

    let mut journeys: Vec<Journey> = raw_journeys
        .iter()
        .map(|(imps, converted)| {
            let t0 = imps[0].timestamp;
            Journey {
                user_id: imps[0].user_id.clone(),
                user_attrs: Vec::new(),
                touchpoints: imps
                    .iter()
                    .map(|r| Touchpoint {
                        channel: channel_of[r.campaign.as_str()],
                        ts: r.timestamp,
                        features: vec![r.timestamp - t0, if r.click { 1.0 } else { 0.0 }],
                        cost: r.cost,
                    })
                    .collect(),
                converted: *converted,
            }
        })
        .collect();
    journeys.sort_by(|a, b| {
        a.user_id
            .cmp(&b.user_id)
            .then_with(|| a.touchpoints[0].ts.total_cmp(&b.touchpoints[0].ts))
    });

    let campaign_list = final_rank
        .iter()
        .map(|(c, _)| *c)
        .collect::<Vec<_>>()
        .join(",");
    let config_hash = format!(
        "{:016x}",
        hash_bytes(
            0,
            format!("preprocess|{}|{}|{}|{campaign_list}", cfg.top_n, cfg.min_len, cfg.gap_days)
                .as_bytes()
        )
    );
    let dataset = Dataset::new(
        journeys,
        DatasetMeta {
            format_version: FORMAT_VERSION,
            n_channels: k,
            features: vec![FeatureDef::real("elapsed_s"), FeatureDef::binary("click")],
            user_attrs: Vec::new(),
            config_hash,
            seed: 0,
        },
    )?;
    Ok(PreprocessOutput { dataset, warnings })
}

/// Flatten a journey dataset back into raw impressions (inverse of
/// `criteo_preprocess` up to campaign renaming). Converted journeys get
/// their journey index as the conversion id. Used by idempotence checks.
pub fn dataset_to_impressions(ds: &Dataset) -> Vec<RawImpression> {
    let click_col = ds.meta.features.iter().position(|f| f.name == "click");
    let mut out = Vec::new();
    for (i, j) in ds.journeys.iter().enumerate() {
        for tp in &j.touchpoints {
            out.push(RawImpression {
                timestamp: tp.ts,
                user_id: j.user_id.clone(),
                campaign: tp.channel.to_string(),
                click: click_col.map(|c| tp.features[c] > 0.5).unwrap_or(false),
                conversion_id: if j.converted { i as i64 } else { -1 },
                cost: tp.cost,
            });
        }
    }
    out
}
