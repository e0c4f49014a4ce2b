//! Domain classifier for density-ratio estimation.
//!
//! Positive pairs take z from the trained posterior of a real journey,
//! negative pairs take z from the standard-normal prior, both attached to
//! the same user attributes. With the labels balanced 1:1, the trained
//! classifier's odds p(L=0|u,z)/p(L=1|u,z) estimate the density ratio
//! between prior and posterior-marginal z for that user.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, UserAttrDef};
use crate::error::{CoreError, Result};
use crate::nn::layers::{EmbeddingParams, MlpParams};
use crate::nn::param::clip_grad_norm;
use crate::nn::tensor::Tensor;
use crate::nn::{Adam, AdamConfig, Binder, HasParams, NodeId, Parameter, Tape, EPS_PROB};
use crate::rng::{rng_for, rng_indexed};

use super::vrae::{shuffle, vrae_posteriors, VraeParams};
use super::ReweightConfig;

/// One (u, z, L) training pair.
#[derive(Debug, Clone)]
pub struct DomainSample {
    pub attrs: Vec<usize>,
    pub z: Vec<f64>,
    /// True for real-posterior z, false for prior z.
    pub positive: bool,
}

/// Per journey, one positive pair with z ~ q(z|c_i) and one negative pair
/// with z ~ N(0,I), so labels are balanced exactly 1:1.
pub fn build_domain_samples(
    train: &Dataset,
    vrae: &VraeParams,
    seed: u64,
) -> Result<Vec<DomainSample>> {
    let sequences: Vec<Vec<usize>> = train.journeys.iter().map(|j| j.channels()).collect();
    let refs: Vec<&[usize]> = sequences.iter().map(|s| s.as_slice()).collect();
    let posteriors = vrae_posteriors(vrae, &refs)?;
    let mut out = Vec::with_capacity(2 * train.n());
    for (i, post) in posteriors.iter().enumerate() {
        let mut rng = rng_indexed(seed, "domain", i as u64);
        let attrs = train.journeys[i].user_attrs.clone();
        out.push(DomainSample {
            attrs: attrs.clone(),
            z: post.sample(&mut rng),
            positive: true,
        });
        let z_neg: Vec<f64> = (0..vrae.d_z)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        out.push(DomainSample {
            attrs,
            z: z_neg,
            positive: false,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DomainClassifierParams {
    pub d_z: usize,
    /// One table per categorical user-attribute field.
    pub attr_embeds: Vec<EmbeddingParams>,
    /// Four fully connected layers ending in a 2-way softmax.
    pub mlp: MlpParams,
}

impl DomainClassifierParams {
    pub fn new(rng: &mut ChaCha8Rng, user_attrs: &[UserAttrDef], d_z: usize, cfg: &ReweightConfig) -> Self {
        let attr_embeds: Vec<EmbeddingParams> = user_attrs
            .iter()
            .enumerate()
            .map(|(f, def)| {
                EmbeddingParams::new(
                    rng,
                    &format!("clf.attr{f}"),
                    def.cardinality,
                    cfg.attr_embed_dim,
                )
            })
            .collect();
        let d_in = attr_embeds.len() * cfg.attr_embed_dim + d_z;
        let h = cfg.clf_hidden;
        DomainClassifierParams {
            d_z,
            attr_embeds,
            mlp: MlpParams::new(rng, "clf.mlp", &[d_in, h, h, h, 2]),
        }
    }

    /// Softmax probabilities, B x 2 with columns [p(L=0), p(L=1)].
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        attrs: &[&[usize]],
        z: NodeId,
    ) -> Result<NodeId> {
        let b = attrs.len();
        if tape.value(z).shape() != [b, self.d_z] {
            return Err(CoreError::ShapeMismatch("domain classifier z".into()));
        }
        let mut parts = Vec::with_capacity(self.attr_embeds.len() + 1);
        for (f, table) in self.attr_embeds.iter().enumerate() {
            let idx: Vec<usize> = attrs.iter().map(|a| a[f]).collect();
            if let Some(&bad) = idx.iter().find(|&&v| v >= table.rows()) {
                return Err(CoreError::InvalidArgument(format!(
                    "attr field {f} value {bad} out of range"
                )));
            }
            let t = table.bind(tape, binder);
            parts.push(tape.embed_rows(t, &idx)?);
        }
        parts.push(z);
        let x = tape.concat_cols(&parts)?;
        self.mlp.bind(tape, binder).forward_softmax(tape, x)
    }
}

impl HasParams for DomainClassifierParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        for e in &self.attr_embeds {
            e.visit(f);
        }
        self.mlp.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for e in &mut self.attr_embeds {
            e.visit_mut(f);
        }
        self.mlp.visit_mut(f);
    }
}

fn batch_probs(
    clf: &DomainClassifierParams,
    samples: &[&DomainSample],
) -> Result<(Tape, Binder, NodeId)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let attrs: Vec<&[usize]> = samples.iter().map(|s| s.attrs.as_slice()).collect();
    let z_data: Vec<f64> = samples.iter().flat_map(|s| s.z.iter().copied()).collect();
    let z = tape.constant(Tensor::new(vec![samples.len(), clf.d_z], z_data)?);
    let probs = clf.forward(&mut tape, &mut binder, &attrs, z)?;
    Ok((tape, binder, probs))
}

/// (mean holdout cross-entropy, accuracy).
fn holdout_metrics(clf: &DomainClassifierParams, samples: &[&DomainSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (tape, _, probs) = batch_probs(clf, samples)?;
    let vals = tape.value(probs);
    let mut correct = 0usize;
    let mut ce = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let row = vals.row(i);
        correct += usize::from((row[1] > row[0]) == s.positive);
        let p = row[usize::from(s.positive)].max(EPS_PROB);
        ce -= p.ln();
    }
    Ok((ce / samples.len() as f64, correct as f64 / samples.len() as f64))
}

pub struct DomainTrainReport {
    pub params: DomainClassifierParams,
    pub holdout_accuracy: f64,
}

/// Minibatch Adam over 2-way cross-entropy with a 10% holdout for the
/// reported accuracy.
pub fn train_domain_classifier(
    samples: &[DomainSample],
    user_attrs: &[UserAttrDef],
    cfg: &ReweightConfig,
) -> Result<DomainTrainReport> {
    if samples.is_empty() || cfg.clf_epochs == 0 {
        return Err(CoreError::InvalidArgument(
            "need samples and clf_epochs >= 1".into(),
        ));
    }
    let d_z = samples[0].z.len();
    let mut init_rng = rng_for(cfg.seed, "clf-init");
    let mut params = DomainClassifierParams::new(&mut init_rng, user_attrs, d_z, cfg);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut split_rng = rng_for(cfg.seed, "clf-holdout");
    shuffle(&mut order, &mut split_rng);
    let n_holdout = ((samples.len() as f64 * cfg.holdout_fraction) as usize)
        .clamp(1, samples.len() - 1);
    let (holdout_idx, train_idx) = order.split_at(n_holdout);
    let mut train_order = train_idx.to_vec();

    let holdout: Vec<&DomainSample> = holdout_idx.iter().map(|&i| &samples[i]).collect();
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    // Probability ratios inherit any overconfidence, so keep the epoch
    // checkpoint with the best held-out cross-entropy rather than the last.
    let mut best: Option<(f64, DomainClassifierParams)> = None;
    for epoch in 0..cfg.clf_epochs {
        let mut shuffle_rng = rng_indexed(cfg.seed, "clf-shuffle", epoch as u64);
        shuffle(&mut train_order, &mut shuffle_rng);
        for chunk in train_order.chunks(cfg.batch_size) {
            let batch: Vec<&DomainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (mut tape, binder, probs) = {
                let mut tape = Tape::new();
                let mut binder = Binder::new();
                let attrs: Vec<&[usize]> = batch.iter().map(|s| s.attrs.as_slice()).collect();
                let z_data: Vec<f64> = batch.iter().flat_map(|s| s.z.iter().copied()).collect();
                let z = tape.constant(Tensor::new(vec![batch.len(), d_z], z_data)?);
                let probs = params.forward(&mut tape, &mut binder, &attrs, z)?;
                (tape, binder, probs)
            };
            let targets: Vec<Option<usize>> =
                batch.iter().map(|s| Some(usize::from(s.positive))).collect();
            let ce = tape.cross_entropy_rows(probs, targets)?;
            let loss = tape.sum_all(ce);
            if !tape.value(loss).data()[0].is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "domain classifier loss at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            let mut named = binder.gradients(&grads, &tape);
            clip_grad_norm(&mut named, cfg.grad_clip)?;
            opt.step(&mut params, &named)?;
        }
        let (ce, _) = holdout_metrics(&params, &holdout)?;
        if best.as_ref().is_none_or(|(b, _)| ce < *b) {
            best = Some((ce, params.clone()));
        }
    }
    let params = best.expect("clf_epochs >= 1").1;
    let (holdout_ce, holdout_accuracy) = holdout_metrics(&params, &holdout)?;
    if cfg.verbose {
        eprintln!(
            "domain classifier holdout ce {holdout_ce:.4} accuracy {holdout_accuracy:.4}"
        );
    }
    Ok(DomainTrainReport {
        params,
        holdout_accuracy,
    })
}

/// p(L=0|u,z) / p(L=1|u,z) with both probabilities clamped away from 0 and 1.
/// No weight-level clipping happens here; that belongs to the journey-weight
/// stage.
pub fn ratio_from_probs(p0: f64, p1: f64) -> f64 {
    let p0 = p0.clamp(EPS_PROB, 1.0 - EPS_PROB);
    let p1 = p1.clamp(EPS_PROB, 1.0 - EPS_PROB);
    p0 / p1
}

pub fn density_ratio(attrs: &[usize], z: &[f64], clf: &DomainClassifierParams) -> Result<f64> {
    let sample = DomainSample {
        attrs: attrs.to_vec(),
        z: z.to_vec(),
        positive: false,
    };
    let (tape, _, probs) = batch_probs(clf, &[&sample])?;
    let row = tape.value(probs).row(0);
    Ok(ratio_from_probs(row[0], row[1]))
}

/// Classifier probabilities for a batch of z samples under one user.
pub(crate) fn density_ratios_batch(
    attrs: &[usize],
    zs: &[Vec<f64>],
    clf: &DomainClassifierParams,
) -> Result<Vec<f64>> {
    let samples: Vec<DomainSample> = zs
        .iter()
        .map(|z| DomainSample {
            attrs: attrs.to_vec(),
            z: z.clone(),
            positive: false,
        })
        .collect();
    let refs: Vec<&DomainSample> = samples.iter().collect();
    let (tape, _, probs) = batch_probs(clf, &refs)?;
    let vals = tape.value(probs);
    Ok((0..zs.len())
        .map(|i| {
            let row = vals.row(i);
            ratio_from_probs(row[0], row[1])
        })
        .collect())
}
