use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, DatasetMeta, Journey, Touchpoint, UserAttrDef};
use crate::nn::layers::{LinearParams, LstmStackParams};
use crate::nn::tape::softmax_slice;
use crate::nn::{Binder, HasParams, Tape};
use crate::rng::{rng_for, rng_indexed};

use super::vrae::{
    reconstruction_accuracy, train_vrae, vrae_decode_batch, vrae_loss_batch, vrae_posteriors,
    VraeParams,
};
use super::weights::clip_normalize;
use super::*;

fn small_cfg() -> ReweightConfig {
    ReweightConfig {
        d_z: 2,
        embed_dim: 4,
        hidden: 5,
        n_layers: 3,
        ..ReweightConfig::default()
    }
}

fn zero_linear(lin: &mut LinearParams) {
    lin.w.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    lin.b.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
}

/// Plain-f64 LSTM step with the tape's gate layout, used as an
/// independent oracle for the batched forward.
fn ref_lstm_step(
    stack: &LstmStackParams,
    x: &[f64],
    state: &mut Vec<(Vec<f64>, Vec<f64>)>,
) -> Vec<f64> {
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let h = stack.hidden;
    let mut inp = x.to_vec();
    for (l, lin) in stack.layers.iter().enumerate() {
        let (h_prev, c_prev) = state[l].clone();
        let z: Vec<f64> = inp.iter().chain(&h_prev).copied().collect();
        let w = &lin.w.value;
        let mut gates = lin.b.value.data().to_vec();
        for (i, zi) in z.iter().enumerate() {
            for (g, wv) in w.row(i).iter().enumerate() {
                gates[g] += zi * wv;
            }
        }
        let mut h_new = vec![0.0; h];
        let mut c_new = vec![0.0; h];
        for j in 0..h {
            let i_g = sigmoid(gates[j]);
            let f_g = sigmoid(gates[h + j]);
            let g_g = gates[2 * h + j].tanh();
            let o_g = sigmoid(gates[3 * h + j]);
            c_new[j] = f_g * c_prev[j] + i_g * g_g;
            h_new[j] = o_g * c_new[j].tanh();
        }
        state[l] = (h_new.clone(), c_new);
        inp = h_new;
    }
    inp
}

fn ref_linear(lin: &LinearParams, x: &[f64]) -> Vec<f64> {
    let mut out = lin.b.value.data().to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (j, w) in lin.w.value.row(i).iter().enumerate() {
            out[j] += xi * w;
        }
    }
    out
}

fn params_map(model: &dyn HasParams) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    model.visit(&mut |p| {
        out.insert(p.name.clone(), p.value.data().to_vec());
    });
    out
}

#[test]
fn encode_zero_projection_returns_bias() {
    let mut rng = rng_for(1, "t");
    let cfg = small_cfg();
    let mut params = VraeParams::new(&mut rng, 3, &cfg);
    params.w_mu.w.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    params.w_mu.b.value.data_mut().copy_from_slice(&[0.7, -0.2]);
    let posts = vrae_posteriors(&params, &[&[0, 1, 2], &[2]]).unwrap();
    for p in posts {
        assert_eq!(p.mu, vec![0.7, -0.2]);
    }
}

#[test]
fn encode_is_deterministic() {
    let mut rng = rng_for(2, "t");
    let params = VraeParams::new(&mut rng, 4, &small_cfg());
    let a = vrae_posteriors(&params, &[&[1, 3, 0]]).unwrap();
    let b = vrae_posteriors(&params, &[&[1, 3, 0]]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn encode_rejects_out_of_range_channel() {
    let mut rng = rng_for(3, "t");
    let params = VraeParams::new(&mut rng, 3, &small_cfg());
    assert!(vrae_posteriors(&params, &[&[0, 3]]).is_err());
    assert!(vrae_posteriors(&params, &[&[]]).is_err());
}

#[test]
fn encode_matches_step_by_step_hand_roll() {
    let mut rng = rng_for(4, "t");
    let params = VraeParams::new(&mut rng, 3, &small_cfg());
    let seq = [2usize, 0, 1];
    let mut state = vec![(vec![0.0; 5], vec![0.0; 5]); 3];
    let mut h_top = Vec::new();
    for &c in &seq {
        let x = params.embed.table.value.row(c).to_vec();
        h_top = ref_lstm_step(&params.encoder, &x, &mut state);
    }
    let mu_ref = ref_linear(&params.w_mu, &h_top);
    let ls_ref = ref_linear(&params.w_sigma, &h_top);

    let post = vrae_posteriors(&params, &[&seq]).unwrap().remove(0);
    for (a, b) in post.mu.iter().zip(&mu_ref) {
        assert!((a - b).abs() < 1e-10);
    }
    for (a, b) in post.log_sigma.iter().zip(&ls_ref) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn encode_ignores_padding_rows() {
    // Batched with a longer neighbor vs alone: same posterior.
    let mut rng = rng_for(5, "t");
    let params = VraeParams::new(&mut rng, 3, &small_cfg());
    let alone = vrae_posteriors(&params, &[&[1, 2]]).unwrap().remove(0);
    let batched = vrae_posteriors(&params, &[&[0, 0, 0, 0, 0], &[1, 2]])
        .unwrap()
        .remove(1);
    for (a, b) in alone.mu.iter().zip(&batched.mu) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn decode_t1_is_one_distribution_and_repeatable() {
    let mut rng = rng_for(6, "t");
    let params = VraeParams::new(&mut rng, 4, &small_cfg());
    let run = || {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let z = tape.constant(crate::nn::Tensor::new(vec![1, 2], vec![0.3, -1.0]).unwrap());
        let (probs, fed) = vrae_decode_batch(&mut tape, &mut binder, &params, z, 1).unwrap();
        assert_eq!(probs.len(), 1);
        assert_eq!(fed[0], vec![params.begin_token()]);
        tape.value(probs[0]).data().to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn decode_zero_latent_first_step_matches_hand_roll() {
    let mut rng = rng_for(7, "t");
    let params = VraeParams::new(&mut rng, 3, &small_cfg());
    // b_z is zero-initialized, so z = 0 gives h'_0 = tanh(0) = 0 and the
    // first step is LSTM(begin embedding, zero state).
    let x = params.embed.table.value.row(params.begin_token()).to_vec();
    let mut state = vec![(vec![0.0; 5], vec![0.0; 5]); 3];
    let h = ref_lstm_step(&params.decoder, &x, &mut state);
    let expect = softmax_slice(&ref_linear(&params.w_o, &h));

    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let z = tape.constant(crate::nn::Tensor::zeros(&[1, 2]));
    let (probs, _) = vrae_decode_batch(&mut tape, &mut binder, &params, z, 3).unwrap();
    for (a, b) in tape.value(probs[0]).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn loss_kl_vanishes_when_posterior_equals_prior() {
    let mut rng = rng_for(8, "t");
    let cfg = small_cfg();
    let mut params = VraeParams::new(&mut rng, 3, &cfg);
    zero_linear(&mut params.w_mu);
    zero_linear(&mut params.w_sigma);
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut eps_rng = rng_for(8, "eps");
    let out = vrae_loss_batch(
        &mut tape,
        &mut binder,
        &params,
        &[&[0, 1], &[2, 2, 1]],
        0.0,
        1.0,
        &mut eps_rng,
    )
    .unwrap();
    assert!(tape.value(out.kl).data()[0].abs() < 1e-12);
    assert!(tape.value(out.loss).data()[0].abs() < 1e-12);
}

#[test]
fn loss_kl_closed_form_is_half_for_unit_mean() {
    let mut rng = rng_for(9, "t");
    let cfg = ReweightConfig {
        d_z: 1,
        ..small_cfg()
    };
    let mut params = VraeParams::new(&mut rng, 3, &cfg);
    zero_linear(&mut params.w_mu);
    zero_linear(&mut params.w_sigma);
    params.w_mu.b.value.data_mut()[0] = 1.0;
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut eps_rng = rng_for(9, "eps");
    let out = vrae_loss_batch(&mut tape, &mut binder, &params, &[&[1]], 0.0, 1.0, &mut eps_rng)
        .unwrap();
    assert!((tape.value(out.kl).data()[0] - 0.5).abs() < 1e-12);
}

#[test]
fn loss_reconstruction_is_zero_with_single_channel_alphabet() {
    // K = 1: the decoder's softmax over one class is exactly 1, the
    // one-hot-perfect reconstruction case.
    let mut rng = rng_for(10, "t");
    let params = VraeParams::new(&mut rng, 1, &small_cfg());
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut eps_rng = rng_for(10, "eps");
    let out = vrae_loss_batch(
        &mut tape,
        &mut binder,
        &params,
        &[&[0, 0, 0], &[0]],
        1.0,
        0.0,
        &mut eps_rng,
    )
    .unwrap();
    assert_eq!(tape.value(out.recon).data()[0], 0.0);
    assert_eq!(tape.value(out.loss).data()[0], 0.0);
    assert_eq!(out.correct, out.tokens);
}

#[test]
fn loss_decomposes_over_journeys_with_collapsed_sigma() {
    // With sigma forced to ~0 the reparam draw is mu, so per-journey terms
    // are deterministic and the batch loss must equal the sum of
    // single-journey losses regardless of batch padding.
    let mut rng = rng_for(11, "t");
    let cfg = small_cfg();
    let mut params = VraeParams::new(&mut rng, 3, &cfg);
    params
        .w_sigma
        .w
        .value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    params
        .w_sigma
        .b
        .value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = -40.0);
    let eval = |batch: &[&[usize]]| {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut eps_rng = rng_for(11, "eps");
        let out =
            vrae_loss_batch(&mut tape, &mut binder, &params, batch, 0.5, 0.5, &mut eps_rng)
                .unwrap();
        tape.value(out.loss).data()[0]
    };
    let joint = eval(&[&[0, 1, 2, 1], &[2]]);
    let split = eval(&[&[0, 1, 2, 1]]) + eval(&[&[2]]);
    assert!((joint - split).abs() < 1e-9, "{joint} vs {split}");
}

fn alternation_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = rng_for(seed, "alt");
    let journeys: Vec<Journey> = (0..n)
        .map(|i| {
            let start = rng.random_range(0..2usize);
            let len = rng.random_range(4..=8usize);
            let touchpoints = (0..len)
                .map(|t| Touchpoint {
                    channel: (start + t) % 2,
                    ts: t as f64,
                    features: vec![],
                    cost: None,
                })
                .collect();
            Journey {
                user_id: format!("u{i}"),
                user_attrs: vec![0],
                touchpoints,
                converted: false,
            }
        })
        .collect();
    let meta = DatasetMeta {
        format_version: 1,
        n_channels: 2,
        features: vec![],
        user_attrs: vec![UserAttrDef {
            name: "seg".into(),
            cardinality: 1,
        }],
        config_hash: String::new(),
        seed,
    };
    Dataset::new(journeys, meta).unwrap()
}

#[test]
fn train_vrae_learns_deterministic_alternation() {
    let data = alternation_dataset(200, 21);
    let cfg = ReweightConfig {
        d_z: 8,
        embed_dim: 8,
        hidden: 32,
        epochs: 30,
        batch_size: 32,
        lr: 5e-3,
        seed: 21,
        ..ReweightConfig::default()
    };
    let report = train_vrae(&data, &cfg).unwrap();
    let seqs: Vec<Vec<usize>> = data.journeys.iter().map(|j| j.channels()).collect();
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let acc_half = reconstruction_accuracy(&report.params, &refs).unwrap();
    assert!(acc_half >= 0.95, "beta=0.5 accuracy {acc_half}");

    // Dropping the KL term can only make reconstruction easier.
    let cfg0 = ReweightConfig { beta: 0.0, ..cfg };
    let report0 = train_vrae(&data, &cfg0).unwrap();
    let acc_zero = reconstruction_accuracy(&report0.params, &refs).unwrap();
    assert!(
        acc_zero >= acc_half - 1e-9,
        "beta=0 {acc_zero} < beta=0.5 {acc_half}"
    );
}

#[test]
fn train_vrae_is_seed_deterministic() {
    let data = alternation_dataset(30, 22);
    let cfg = ReweightConfig {
        d_z: 4,
        embed_dim: 4,
        hidden: 8,
        n_layers: 2,
        epochs: 3,
        batch_size: 16,
        seed: 5,
        ..ReweightConfig::default()
    };
    let a = train_vrae(&data, &cfg).unwrap();
    let b = train_vrae(&data, &cfg).unwrap();
    assert_eq!(params_map(&a.params), params_map(&b.params));
    let c = train_vrae(&data, &ReweightConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(params_map(&a.params), params_map(&c.params));
}

#[test]
fn train_vrae_rejects_empty_dataset() {
    let meta = DatasetMeta {
        format_version: 1,
        n_channels: 2,
        features: vec![],
        user_attrs: vec![],
        config_hash: String::new(),
        seed: 0,
    };
    let data = Dataset {
        journeys: vec![],
        meta,
    };
    assert!(train_vrae(&data, &ReweightConfig::default()).is_err());
}

fn toy_user_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = rng_for(seed, "toy");
    let journeys: Vec<Journey> = (0..n)
        .map(|i| {
            let len = rng.random_range(1..=3usize);
            let touchpoints = (0..len)
                .map(|t| Touchpoint {
                    channel: rng.random_range(0..3usize),
                    ts: t as f64,
                    features: vec![],
                    cost: None,
                })
                .collect();
            Journey {
                user_id: format!("u{i}"),
                user_attrs: vec![i % 4],
                touchpoints,
                converted: false,
            }
        })
        .collect();
    let meta = DatasetMeta {
        format_version: 1,
        n_channels: 3,
        features: vec![],
        user_attrs: vec![UserAttrDef {
            name: "bucket".into(),
            cardinality: 4,
        }],
        config_hash: String::new(),
        seed,
    };
    Dataset::new(journeys, meta).unwrap()
}

#[test]
fn domain_samples_are_balanced_one_to_one() {
    let data = toy_user_dataset(50, 30);
    let mut rng = rng_for(30, "p");
    let vrae = VraeParams::new(&mut rng, 3, &small_cfg());
    let samples = build_domain_samples(&data, &vrae, 30).unwrap();
    assert_eq!(samples.len(), 100);
    assert_eq!(samples.iter().filter(|s| s.positive).count(), 50);
    for (i, pair) in samples.chunks(2).enumerate() {
        assert_eq!(pair[0].attrs, data.journeys[i].user_attrs);
        assert_eq!(pair[0].attrs, pair[1].attrs);
        assert!(pair[0].positive && !pair[1].positive);
    }
}

#[test]
fn negative_z_is_standard_normal() {
    let data = toy_user_dataset(10_000, 31);
    let mut rng = rng_for(31, "p");
    let cfg = ReweightConfig {
        d_z: 4,
        embed_dim: 4,
        hidden: 6,
        n_layers: 2,
        ..ReweightConfig::default()
    };
    let vrae = VraeParams::new(&mut rng, 3, &cfg);
    let samples = build_domain_samples(&data, &vrae, 31).unwrap();
    let negs: Vec<&DomainSample> = samples.iter().filter(|s| !s.positive).collect();
    assert_eq!(negs.len(), 10_000);
    for d in 0..4 {
        let mean = negs.iter().map(|s| s.z[d]).sum::<f64>() / negs.len() as f64;
        assert!(mean.abs() < 4.0 / (negs.len() as f64).sqrt(), "dim {d}: {mean}");
    }
}

#[test]
fn positive_z_follows_the_posterior() {
    let data = toy_user_dataset(200, 32);
    let mut rng = rng_for(32, "p");
    let cfg = small_cfg();
    let mut vrae = VraeParams::new(&mut rng, 3, &cfg);
    zero_linear(&mut vrae.w_mu);
    zero_linear(&mut vrae.w_sigma);
    vrae.w_mu.b.value.data_mut().iter_mut().for_each(|v| *v = 5.0);
    let ls = 0.01f64.ln();
    vrae.w_sigma.b.value.data_mut().iter_mut().for_each(|v| *v = ls);
    let samples = build_domain_samples(&data, &vrae, 32).unwrap();
    for s in samples.iter().filter(|s| s.positive) {
        for &z in &s.z {
            assert!((z - 5.0).abs() < 0.05, "z {z}");
        }
    }
}

fn synthetic_pairs(
    n: usize,
    seed: u64,
    d_z: usize,
    separated: bool,
) -> (Vec<DomainSample>, Vec<UserAttrDef>) {
    let mut rng = rng_for(seed, "pairs");
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let u = rng.random_range(0..2usize);
        let z_pos: Vec<f64> = if separated {
            let c = if u == 0 { 5.0 } else { -5.0 };
            vec![c; d_z]
        } else {
            (0..d_z).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let z_neg: Vec<f64> = (0..d_z).map(|_| StandardNormal.sample(&mut rng)).collect();
        out.push(DomainSample {
            attrs: vec![u],
            z: z_pos,
            positive: true,
        });
        out.push(DomainSample {
            attrs: vec![u],
            z: z_neg,
            positive: false,
        });
    }
    let defs = vec![UserAttrDef {
        name: "u".into(),
        cardinality: 2,
    }];
    (out, defs)
}

#[test]
fn classifier_cannot_beat_chance_on_identical_distributions() {
    let (pairs, defs) = synthetic_pairs(1000, 40, 4, false);
    let cfg = ReweightConfig {
        d_z: 4,
        clf_hidden: 16,
        clf_epochs: 8,
        seed: 40,
        ..ReweightConfig::default()
    };
    let report = train_domain_classifier(&pairs, &defs, &cfg).unwrap();
    assert!(
        (report.holdout_accuracy - 0.5).abs() <= 0.05,
        "accuracy {}",
        report.holdout_accuracy
    );
}

#[test]
fn classifier_separates_disjoint_distributions() {
    let (pairs, defs) = synthetic_pairs(1000, 41, 4, true);
    let cfg = ReweightConfig {
        d_z: 4,
        clf_hidden: 32,
        clf_epochs: 15,
        seed: 41,
        ..ReweightConfig::default()
    };
    let report = train_domain_classifier(&pairs, &defs, &cfg).unwrap();
    assert!(
        report.holdout_accuracy >= 0.99,
        "accuracy {}",
        report.holdout_accuracy
    );
}

#[test]
fn classifier_training_is_deterministic() {
    let (pairs, defs) = synthetic_pairs(100, 42, 3, true);
    let cfg = ReweightConfig {
        d_z: 3,
        clf_hidden: 8,
        clf_epochs: 2,
        seed: 42,
        ..ReweightConfig::default()
    };
    let a = train_domain_classifier(&pairs, &defs, &cfg).unwrap();
    let b = train_domain_classifier(&pairs, &defs, &cfg).unwrap();
    assert_eq!(params_map(&a.params), params_map(&b.params));
}

#[test]
fn ratio_arithmetic() {
    assert_eq!(ratio_from_probs(0.5, 0.5), 1.0);
    assert!((ratio_from_probs(0.8, 0.2) - 4.0).abs() < 1e-12);
    // Extreme outputs stay an extreme ratio; clipping happens later at the
    // weight stage.
    assert!(ratio_from_probs(1.0 - 1e-12, 1e-12) > 1e11);
}

/// Classifier whose output layer is zeroed, so p = (0.5, 0.5) everywhere.
fn uninformative_classifier(seed: u64, d_z: usize, defs: &[UserAttrDef]) -> DomainClassifierParams {
    let mut rng = rng_for(seed, "flat");
    let mut clf = DomainClassifierParams::new(&mut rng, defs, d_z, &ReweightConfig::default());
    let last = clf.mlp.layers.len() - 1;
    zero_linear(&mut clf.mlp.layers[last]);
    clf
}

#[test]
fn density_ratio_of_uninformative_classifier_is_one() {
    let defs = vec![UserAttrDef {
        name: "u".into(),
        cardinality: 4,
    }];
    let clf = uninformative_classifier(50, 3, &defs);
    let w = density_ratio(&[2], &[0.3, -1.0, 2.0], &clf).unwrap();
    assert_eq!(w, 1.0);
}

#[test]
fn weights_are_all_one_under_unit_ratio() {
    let data = toy_user_dataset(40, 51);
    let mut rng = rng_for(51, "p");
    let cfg = ReweightConfig {
        s_samples: 8,
        seed: 51,
        ..small_cfg()
    };
    let vrae = VraeParams::new(&mut rng, 3, &cfg);
    let clf = uninformative_classifier(51, cfg.d_z, &data.meta.user_attrs);
    let out = estimate_weights(&data, &vrae, &clf, &cfg).unwrap();
    assert_eq!(out.records.len(), 40);
    for r in &out.records {
        assert_eq!(r.w, 1.0);
        assert!(!r.clip_hit);
        assert_eq!(r.s, 8);
    }
}

#[test]
fn single_sample_weight_equals_the_density_ratio() {
    let data = toy_user_dataset(10, 52);
    let mut rng = rng_for(52, "p");
    let cfg = ReweightConfig {
        s_samples: 1,
        w_min: 1e-6,
        w_max: 1e6,
        normalize: false,
        seed: 52,
        ..small_cfg()
    };
    let vrae = VraeParams::new(&mut rng, 3, &cfg);
    let mut crng = rng_for(52, "c");
    let clf = DomainClassifierParams::new(&mut crng, &data.meta.user_attrs, cfg.d_z, &cfg);
    let out = estimate_weights(&data, &vrae, &clf, &cfg).unwrap();

    let seqs: Vec<Vec<usize>> = data.journeys.iter().map(|j| j.channels()).collect();
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let posts = vrae_posteriors(&vrae, &refs).unwrap();
    for (i, r) in out.records.iter().enumerate() {
        let mut jrng = rng_indexed(cfg.seed, "weights", i as u64);
        let z = posts[i].sample(&mut jrng);
        let w = density_ratio(&data.journeys[i].user_attrs, &z, &clf).unwrap();
        assert!((r.w - w).abs() < 1e-12, "journey {i}: {} vs {w}", r.w);
    }
}

#[test]
fn clip_normalize_reaches_both_invariants() {
    let mut rng = rng_for(53, "w");
    let mut w: Vec<f64> = (0..500).map(|_| rng.random_range(0.01..30.0)).collect();
    clip_normalize(&mut w, 0.1, 10.0).unwrap();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!((mean - 1.0).abs() <= 1e-9);
    assert!(w.iter().all(|&v| (0.1..=10.0).contains(&v)));

    // One huge outlier among ones.
    let mut w = vec![1.0; 99];
    w.push(1e6);
    clip_normalize(&mut w, 0.1, 10.0).unwrap();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!((mean - 1.0).abs() <= 1e-9);
    assert!(w.iter().all(|&v| (0.1..=10.0).contains(&v)));
}

/// Discrete chain u -> z -> c where every density is enumerable. The
/// harmonic-mean estimate over the exact posterior q(z|c) = p(z|c) and
/// exact ratio W(u,z) = p(z)/p(z|u) must reproduce p(c)/p(c|u).
#[test]
fn harmonic_mean_identity_on_discrete_chain() {
    let p_u = [0.4, 0.6];
    let p_z_given_u = [[0.5, 0.3, 0.1, 0.1], [0.1, 0.2, 0.3, 0.4]];
    let p_c_given_z = [
        [0.7, 0.2, 0.1],
        [0.3, 0.4, 0.3],
        [0.1, 0.1, 0.8],
        [0.25, 0.5, 0.25],
    ];
    let n_z = 4;
    let n_c = 3;
    let p_z: Vec<f64> = (0..n_z)
        .map(|z| p_u.iter().zip(&p_z_given_u).map(|(pu, pz)| pu * pz[z]).sum())
        .collect();
    let p_c: Vec<f64> = (0..n_c)
        .map(|c| (0..n_z).map(|z| p_c_given_z[z][c] * p_z[z]).sum())
        .collect();
    let p_c_given_u = |u: usize, c: usize| -> f64 {
        (0..n_z)
            .map(|z| p_c_given_z[z][c] * p_z_given_u[u][z])
            .sum()
    };
    // Posterior of the generative model, q(z|c) = p(c|z) p(z) / p(c).
    let q_z_given_c =
        |c: usize, z: usize| -> f64 { p_c_given_z[z][c] * p_z[z] / p_c[c] };
    let ratio = |u: usize, z: usize| -> f64 { p_z[z] / p_z_given_u[u][z] };

    let mut rng = rng_for(54, "mc");
    for u in 0..2 {
        for c in 0..n_c {
            let truth = p_c[c] / p_c_given_u(u, c);
            // Exact expectation.
            let inv_mean: f64 = (0..n_z).map(|z| q_z_given_c(c, z) / ratio(u, z)).sum();
            assert!((1.0 / inv_mean - truth).abs() < 1e-12);
            // Monte Carlo at S = 10,000 over the same posterior.
            let s = 10_000;
            let mut acc = 0.0;
            for _ in 0..s {
                let mut r: f64 = rng.random();
                let mut z = n_z - 1;
                for cand in 0..n_z {
                    r -= q_z_given_c(c, cand);
                    if r <= 0.0 {
                        z = cand;
                        break;
                    }
                }
                acc += 1.0 / ratio(u, z);
            }
            let w_mc = 1.0 / (acc / s as f64);
            assert!(
                (w_mc - truth).abs() / truth <= 0.02,
                "u={u} c={c}: {w_mc} vs {truth}"
            );
        }
    }
}

fn avg_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = avg_ranks(a);
    let rb = avg_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// End-to-end check of the whole reweighting stage on an enumerable toy:
/// two user types draw length-2 journeys from known channel distributions,
/// so the target weight p(C)/p(C|u) is exact.
#[test]
fn estimated_weights_track_enumerated_truth() {
    let probs = [[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]];
    let n = 600;
    let mut rng = rng_for(55, "toy");
    let mut journeys = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let u = rng.random_range(0..2usize);
        let draw = |r: &mut rand_chacha::ChaCha8Rng| {
            let mut x: f64 = r.random();
            for (c, p) in probs[u].iter().enumerate() {
                x -= p;
                if x <= 0.0 {
                    return c;
                }
            }
            2
        };
        let c0 = draw(&mut rng);
        let c1 = draw(&mut rng);
        let p_cond = probs[u][c0] * probs[u][c1];
        let p_marg = 0.5 * probs[0][c0] * probs[0][c1] + 0.5 * probs[1][c0] * probs[1][c1];
        truth.push(p_marg / p_cond);
        journeys.push(Journey {
            user_id: format!("u{i}"),
            user_attrs: vec![u],
            touchpoints: [c0, c1]
                .iter()
                .enumerate()
                .map(|(t, &c)| Touchpoint {
                    channel: c,
                    ts: t as f64,
                    features: vec![],
                    cost: None,
                })
                .collect(),
            converted: false,
        });
    }
    let meta = DatasetMeta {
        format_version: 1,
        n_channels: 3,
        features: vec![],
        user_attrs: vec![UserAttrDef {
            name: "u".into(),
            cardinality: 2,
        }],
        config_hash: String::new(),
        seed: 55,
    };
    let data = Dataset::new(journeys, meta).unwrap();

    let cfg = ReweightConfig {
        d_z: 4,
        beta: 0.1,
        embed_dim: 8,
        hidden: 32,
        epochs: 80,
        kl_warmup_epochs: 50,
        clf_epochs: 60,
        clf_hidden: 32,
        batch_size: 64,
        lr: 5e-3,
        s_samples: 512,
        seed: 77,
        ..ReweightConfig::default()
    };
    let vrae = train_vrae(&data, &cfg).unwrap().params;
    let samples = build_domain_samples(&data, &vrae, cfg.seed).unwrap();
    let clf = train_domain_classifier(&samples, &data.meta.user_attrs, &cfg)
        .unwrap()
        .params;
    let est = estimate_weights(&data, &vrae, &clf, &cfg).unwrap();
    let rho = spearman(&est.weights(), &truth);
    assert!(rho >= 0.9, "spearman {rho}");
}

#[test]
fn unbiased_setting_gives_weights_near_one() {
    let gen_cfg = crate::synthgen::SynthConfig {
        n_journeys: 800,
        ..crate::synthgen::SynthConfig::default()
    };
    let data = crate::synthgen::generate_dataset(
        crate::synthgen::ConfounderSetting::Unbiased,
        &gen_cfg,
        56,
    )
    .unwrap()
    .dataset;
    let cfg = ReweightConfig {
        d_z: 8,
        embed_dim: 8,
        hidden: 32,
        epochs: 8,
        clf_epochs: 10,
        s_samples: 16,
        seed: 56,
        ..ReweightConfig::default()
    };
    let vrae = train_vrae(&data, &cfg).unwrap().params;
    let samples = build_domain_samples(&data, &vrae, cfg.seed).unwrap();
    let clf = train_domain_classifier(&samples, &data.meta.user_attrs, &cfg)
        .unwrap()
        .params;
    let est = estimate_weights(&data, &vrae, &clf, &cfg).unwrap();
    let w = est.weights();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!((mean - 1.0).abs() <= 1e-9);
    assert!(w.iter().all(|&v| v.is_finite() && v > 0.0));
    let near = w.iter().filter(|&&v| (0.5..=2.0).contains(&v)).count();
    assert!(
        near as f64 / w.len() as f64 >= 0.9,
        "only {near}/{} weights in [0.5, 2]",
        w.len()
    );
}
