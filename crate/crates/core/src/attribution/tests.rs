use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{DatasetMeta, FeatureDef, Touchpoint, UserAttrDef};
use crate::predictor::{train_predictor, PredictorConfig};
use crate::rng::hash_bytes;
use crate::synthgen::{generate_dataset, ConfounderSetting, SynthConfig};

fn plain_journey(chans: &[usize], converted: bool) -> Journey {
    Journey {
        user_id: "u0".into(),
        user_attrs: vec![],
        touchpoints: chans
            .iter()
            .enumerate()
            .map(|(t, &channel)| Touchpoint {
                channel,
                ts: t as f64,
                features: vec![],
                cost: None,
            })
            .collect(),
        converted,
    }
}

/// Pseudo-random but deterministic value in (0, 1) keyed by the visible
/// channel sequence, so duplicate touchpoints are indistinguishable.
fn table_value(channels: &[usize]) -> f64 {
    let bytes: Vec<u8> = channels.iter().map(|&c| c as u8).collect();
    let h = hash_bytes(12345, &bytes);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn table_predictor() -> FnPredictor<impl Fn(&Journey) -> f64 + Sync> {
    FnPredictor(|j: &Journey| table_value(&j.channels()))
}

/// Independent oracle: average marginal contribution over all T!
/// insertion orders, straight from the Shapley definition.
fn shapley_by_all_permutations(journey: &Journey, value: &dyn Fn(&[usize]) -> f64) -> Vec<f64> {
    let t_len = journey.len();
    let mut idx: Vec<usize> = (0..t_len).collect();
    let mut perms: Vec<Vec<usize>> = Vec::new();
    permute(&mut idx, 0, &mut perms);
    let visible = |mask: u64| -> Vec<usize> {
        journey
            .touchpoints
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, tp)| tp.channel)
            .collect()
    };
    let mut sv = vec![0.0; t_len];
    for perm in &perms {
        let mut mask = 0u64;
        for &t in perm {
            let with = mask | 1 << t;
            sv[t] += value(&visible(with)) - value(&visible(mask));
            mask = with;
        }
    }
    for s in &mut sv {
        *s /= perms.len() as f64;
    }
    sv
}

fn permute(idx: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == idx.len() {
        out.push(idx.clone());
        return;
    }
    for i in k..idx.len() {
        idx.swap(k, i);
        permute(idx, k + 1, out);
        idx.swap(k, i);
    }
}

#[test]
fn config_is_validated() {
    let bad = ShapleyConfig {
        exact_max_len: 0,
        ..ShapleyConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ShapleyConfig {
        n_permutations: 0,
        ..ShapleyConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(ShapleyConfig::default().validate().is_ok());
}

#[test]
fn exact_rejects_journeys_longer_than_the_cap() {
    let j = plain_journey(&[0, 1, 2], true);
    let cfg = ShapleyConfig {
        exact_max_len: 2,
        ..ShapleyConfig::default()
    };
    let err = shapley_exact(&j, &table_predictor(), &cfg).unwrap_err();
    assert!(err.to_string().contains("shapley_sampled"), "{err}");
}

#[test]
fn singleton_sv_is_the_lift_over_the_empty_journey() {
    let j = plain_journey(&[4], true);
    let pred = table_predictor();
    let sv = shapley_exact(&j, &pred, &ShapleyConfig::default()).unwrap();
    let want = table_value(&[4]) - table_value(&[]);
    assert_eq!(sv.len(), 1);
    assert!((sv[0] - want).abs() < 1e-15);
}

#[test]
fn constant_predictor_gives_all_zero_svs() {
    let j = plain_journey(&[0, 1, 2, 3], true);
    let pred = FnPredictor(|_: &Journey| 0.37);
    let cfg = ShapleyConfig {
        n_permutations: 50,
        ..ShapleyConfig::default()
    };
    assert!(shapley_exact(&j, &pred, &cfg)
        .unwrap()
        .iter()
        .all(|&s| s == 0.0));
    assert!(shapley_sampled(&j, &pred, &cfg)
        .unwrap()
        .iter()
        .all(|&s| s == 0.0));
}

#[test]
fn exact_matches_the_permutation_definition_on_a_hand_table() {
    // eight coalition values fixed by hand for channels [0, 1, 2]
    let table: HashMap<Vec<usize>, f64> = [
        (vec![], 0.05),
        (vec![0], 0.10),
        (vec![1], 0.20),
        (vec![2], 0.15),
        (vec![0, 1], 0.40),
        (vec![0, 2], 0.25),
        (vec![1, 2], 0.55),
        (vec![0, 1, 2], 0.80),
    ]
    .into_iter()
    .collect();
    let value = move |c: &[usize]| table[c];
    let j = plain_journey(&[0, 1, 2], true);
    let pred = FnPredictor(|j: &Journey| value(&j.channels()));
    let sv = shapley_exact(&j, &pred, &ShapleyConfig::default()).unwrap();
    let oracle = shapley_by_all_permutations(&j, &value);
    for (a, b) in sv.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    let total: f64 = sv.iter().sum();
    assert!((total - (0.80 - 0.05)).abs() <= 1e-12);
}

#[test]
fn exact_matches_the_permutation_definition_on_random_tables() {
    for t_len in 1..=4 {
        let chans: Vec<usize> = (0..t_len).collect();
        let j = plain_journey(&chans, true);
        let sv = shapley_exact(&j, &table_predictor(), &ShapleyConfig::default()).unwrap();
        let oracle = shapley_by_all_permutations(&j, &table_value);
        for (a, b) in sv.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12, "T={t_len}: {a} vs {b}");
        }
    }
}

#[test]
fn exact_satisfies_efficiency_on_a_six_touchpoint_table() {
    let j = plain_journey(&[0, 1, 2, 3, 4, 5], true);
    let sv = shapley_exact(&j, &table_predictor(), &ShapleyConfig::default()).unwrap();
    let total: f64 = sv.iter().sum();
    let want = table_value(&[0, 1, 2, 3, 4, 5]) - table_value(&[]);
    assert!((total - want).abs() <= 1e-9, "{total} vs {want}");
}

#[test]
fn identical_touchpoints_get_equal_exact_svs() {
    let j = plain_journey(&[1, 1, 2], true);
    let pred = table_predictor();
    let sv = shapley_exact(&j, &pred, &ShapleyConfig::default()).unwrap();
    assert!((sv[0] - sv[1]).abs() <= 1e-12, "{} vs {}", sv[0], sv[1]);

    // swapping the two identical touchpoints is a no-op on the input, so
    // the output is bitwise identical
    let swapped = plain_journey(&[1, 1, 2], true);
    let sv2 = shapley_exact(&swapped, &pred, &ShapleyConfig::default()).unwrap();
    for (a, b) in sv.iter().zip(&sv2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn dummy_touchpoint_gets_exactly_zero() {
    // value ignores channel 9 wherever it appears
    let value = |c: &[usize]| {
        let kept: Vec<usize> = c.iter().copied().filter(|&x| x != 9).collect();
        table_value(&kept)
    };
    let j = plain_journey(&[0, 9, 2], true);
    let pred = FnPredictor(move |j: &Journey| value(&j.channels()));
    let sv = shapley_exact(&j, &pred, &ShapleyConfig::default()).unwrap();
    assert_eq!(sv[1], 0.0);
    assert!(sv[0] != 0.0 && sv[2] != 0.0);
}

#[test]
fn sampled_equals_exact_for_singletons() {
    let j = plain_journey(&[3], true);
    let pred = table_predictor();
    let exact = shapley_exact(&j, &pred, &ShapleyConfig::default()).unwrap();
    for n in [1, 7, 100] {
        let cfg = ShapleyConfig {
            n_permutations: n,
            seed: n as u64,
            ..ShapleyConfig::default()
        };
        let sampled = shapley_sampled(&j, &pred, &cfg).unwrap();
        // summing n identical marginals and dividing by n accumulates
        // about one ulp of roundoff per addition
        assert!(
            (sampled[0] - exact[0]).abs() <= n as f64 * 1e-16,
            "n={n}: sampled {} vs exact {}",
            sampled[0],
            exact[0]
        );
    }
}

#[test]
fn sampled_tracks_exact_within_a_percent_at_ten_thousand_permutations() {
    let chans: Vec<usize> = (0..8).collect();
    let j = plain_journey(&chans, true);
    let pred = table_predictor();
    let exact = shapley_exact(&j, &pred, &ShapleyConfig::default()).unwrap();
    let cfg = ShapleyConfig {
        n_permutations: 10_000,
        seed: 3,
        ..ShapleyConfig::default()
    };
    let sampled = shapley_sampled(&j, &pred, &cfg).unwrap();
    let worst = exact
        .iter()
        .zip(&sampled)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(worst <= 0.01, "max abs err {worst}");
}

#[test]
fn sampled_svs_of_identical_adjacent_touchpoints_are_close() {
    let j = plain_journey(&[5, 5, 1, 2], true);
    let cfg = ShapleyConfig {
        n_permutations: 10_000,
        seed: 9,
        ..ShapleyConfig::default()
    };
    let sv = shapley_sampled(&j, &table_predictor(), &cfg).unwrap();
    assert!((sv[0] - sv[1]).abs() <= 0.005, "{} vs {}", sv[0], sv[1]);
}

#[test]
fn sampled_is_seed_deterministic() {
    let chans: Vec<usize> = (0..7).collect();
    let j = plain_journey(&chans, true);
    let cfg = ShapleyConfig {
        n_permutations: 500,
        seed: 21,
        ..ShapleyConfig::default()
    };
    let a = shapley_sampled(&j, &table_predictor(), &cfg).unwrap();
    let b = shapley_sampled(&j, &table_predictor(), &cfg).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    let other = ShapleyConfig { seed: 22, ..cfg };
    let c = shapley_sampled(&j, &table_predictor(), &other).unwrap();
    assert!(a.iter().zip(&c).any(|(x, y)| x != y));
}

#[test]
fn sampled_estimator_is_unbiased_over_seeds() {
    let chans: Vec<usize> = (0..8).collect();
    let j = plain_journey(&chans, true);
    let pred = table_predictor();
    let exact = shapley_exact(&j, &pred, &ShapleyConfig::default()).unwrap();
    let n_seeds = 50;
    let mut means = vec![Vec::with_capacity(n_seeds); 8];
    for seed in 0..n_seeds as u64 {
        let cfg = ShapleyConfig {
            n_permutations: 400,
            seed,
            ..ShapleyConfig::default()
        };
        let sv = shapley_sampled(&j, &pred, &cfg).unwrap();
        for (t, &v) in sv.iter().enumerate() {
            means[t].push(v);
        }
    }
    for (t, samples) in means.iter().enumerate() {
        let n = samples.len() as f64;
        let mean: f64 = samples.iter().sum::<f64>() / n;
        let var: f64 = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(
            (mean - exact[t]).abs() <= 3.0 * se.max(1e-12),
            "t={t}: mean {mean} vs exact {} (se {se})",
            exact[t]
        );
    }
}

#[test]
fn credit_normalization_clamps_and_falls_back_to_uniform() {
    assert_eq!(normalize_credits(&[0.2, -0.1, 0.2]), vec![0.5, 0.0, 0.5]);
    assert_eq!(normalize_credits(&[0.0; 4]), vec![0.25; 4]);
    assert_eq!(normalize_credits(&[0.3]), vec![1.0]);
    assert_eq!(normalize_credits(&[-0.4, -0.1]), vec![0.5, 0.5]);
    assert!(normalize_credits(&[]).is_empty());
}

#[test]
fn normalized_credits_form_a_simplex_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let t = rng.random_range(1..=10);
        let svs: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let credits = normalize_credits(&svs);
        assert_eq!(credits.len(), t);
        assert!(credits.iter().all(|&c| (0.0..=1.0).contains(&c)));
        let total: f64 = credits.iter().sum();
        assert!((total - 1.0).abs() <= 1e-9, "sum {total}");
    }
}

fn mini_meta(k: usize) -> DatasetMeta {
    DatasetMeta {
        format_version: 1,
        n_channels: k,
        features: vec![],
        user_attrs: vec![],
        config_hash: String::new(),
        seed: 0,
    }
}

#[test]
fn one_converted_singleton_owns_its_channel() {
    let ds = Dataset::new(vec![plain_journey(&[2], true)], mini_meta(4)).unwrap();
    let (records, report) =
        attribute_dataset(&ds, &table_predictor(), &ShapleyConfig::default(), true).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].regime, "exact");
    assert_eq!(records[0].credit, vec![1.0]);
    assert_eq!(report.channels[2].mean_credit, 1.0);
    assert_eq!(report.channels[2].n_journeys, 1);
    assert_eq!(report.channels[0].n_journeys, 0);
    assert_eq!(report.channels[0].mean_credit, 0.0);
}

fn mixed_dataset() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut journeys = Vec::new();
    for i in 0..40 {
        let len = rng.random_range(1..=6);
        let chans: Vec<usize> = (0..len).map(|_| rng.random_range(0..4)).collect();
        let mut j = plain_journey(&chans, rng.random_bool(0.6));
        j.user_id = format!("u{i}");
        journeys.push(j);
    }
    Dataset::new(journeys, mini_meta(4)).unwrap()
}

#[test]
fn attribution_switches_regime_on_journey_length() {
    let ds = mixed_dataset();
    let cfg = ShapleyConfig {
        exact_max_len: 3,
        n_permutations: 200,
        seed: 5,
    };
    let (records, _) = attribute_dataset(&ds, &table_predictor(), &cfg, false).unwrap();
    assert_eq!(records.len(), ds.n());
    for rec in &records {
        let want = if ds.journeys[rec.index].len() <= 3 {
            "exact"
        } else {
            "sampled"
        };
        assert_eq!(rec.regime, want, "journey {}", rec.index);
        assert_eq!(rec.sv.len(), ds.journeys[rec.index].len());
        let total: f64 = rec.credit.iter().sum();
        assert!((total - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn exact_records_satisfy_efficiency_against_the_table() {
    let ds = mixed_dataset();
    let pred = table_predictor();
    let (records, _) = attribute_dataset(&ds, &pred, &ShapleyConfig::default(), true).unwrap();
    for rec in &records {
        assert_eq!(rec.regime, "exact");
        let j = &ds.journeys[rec.index];
        let total: f64 = rec.sv.iter().sum();
        let want = table_value(&j.channels()) - table_value(&[]);
        assert!((total - want).abs() <= 1e-9);
    }
}

#[test]
fn attribution_report_is_seed_deterministic() {
    let ds = mixed_dataset();
    let cfg = ShapleyConfig {
        exact_max_len: 2,
        n_permutations: 300,
        seed: 8,
    };
    let a = attribute_dataset(&ds, &table_predictor(), &cfg, true).unwrap();
    let b = attribute_dataset(&ds, &table_predictor(), &cfg, true).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn converted_only_flag_controls_selection() {
    let ds = mixed_dataset();
    let n_conv = ds.journeys.iter().filter(|j| j.converted).count();
    let pred = table_predictor();
    let cfg = ShapleyConfig::default();
    let (conv_records, _) = attribute_dataset(&ds, &pred, &cfg, true).unwrap();
    assert_eq!(conv_records.len(), n_conv);
    assert!(conv_records.iter().all(|r| ds.journeys[r.index].converted));
    let (all_records, _) = attribute_dataset(&ds, &pred, &cfg, false).unwrap();
    assert_eq!(all_records.len(), ds.n());
}

#[test]
fn channel_report_renders_as_csv() {
    let report = ChannelCreditReport {
        channels: vec![
            ChannelCredit {
                channel: 0,
                mean_credit: 0.25,
                n_journeys: 3,
            },
            ChannelCredit {
                channel: 1,
                mean_credit: 0.0,
                n_journeys: 0,
            },
        ],
    };
    let csv = channel_report_csv(&report);
    assert_eq!(csv, "channel,mean_credit,n\n0,0.25,3\n1,0,0\n");
}

/// End-to-end ground-truth check: one channel's conversion kernel is an
/// order of magnitude stronger than every other, exposures are unbiased,
/// so after training the predictor that channel must collect the largest
/// mean credit.
#[test]
fn dominant_conversion_channel_collects_the_most_credit() {
    let mut beta = vec![0.04; 10];
    beta[5] = 0.8;
    let gen_cfg = SynthConfig {
        n_journeys: 3000,
        journeys_per_user: 1,
        horizon_days: 5.0,
        base_rate: 1.2,
        alpha0: -3.9,
        beta_override: Some(beta),
        ..SynthConfig::default()
    };
    let ds = generate_dataset(ConfounderSetting::Unbiased, &gen_cfg, 101)
        .unwrap()
        .dataset;
    let rate = ds.conversion_rate();
    assert!(rate > 0.05 && rate < 0.5, "conversion rate {rate}");

    let pcfg = PredictorConfig {
        gamma: 0.0,
        hidden: 24,
        n_layers: 2,
        channel_embed_dim: 8,
        feat_embed_dim: 8,
        attr_embed_dim: 4,
        mlp_hidden: 24,
        epochs: 10,
        batch_size: 64,
        lr: 3e-3,
        seed: 19,
        ..PredictorConfig::default()
    };
    let weights = vec![1.0; ds.n()];
    let model = train_predictor(&ds, &weights, &pcfg).unwrap().params;
    let cfg = ShapleyConfig {
        n_permutations: 2000,
        seed: 31,
        ..ShapleyConfig::default()
    };
    let (_, report) = attribute_dataset(&ds, &model, &cfg, true).unwrap();
    let best = report
        .channels
        .iter()
        .max_by(|a, b| a.mean_credit.partial_cmp(&b.mean_credit).unwrap())
        .unwrap();
    let shares: Vec<f64> = report.channels.iter().map(|c| c.mean_credit).collect();
    assert_eq!(best.channel, 5, "mean credits {shares:?}");
    assert!(report
        .channels
        .iter()
        .all(|c| (0.0..=1.0).contains(&c.mean_credit)));
}
