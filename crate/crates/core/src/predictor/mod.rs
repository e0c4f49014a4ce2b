//! Causal conversion prediction.
//!
//! The trunk LSTM reads one-step-offset channel embeddings concatenated
//! with projected touchpoint features, so step t sees channel c_{t-1} while
//! the gradient-reversed branch is asked to predict c_t from out_t. The
//! conversion head attends over the step hiddens with the final hidden as
//! query and concatenates user-attribute embeddings only at the head,
//! keeping the static confounder out of the sequence representation.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, Journey};
use crate::error::{CoreError, Result};
use crate::nn::layers::{attention_pool, EmbeddingParams, LinearParams, LstmStackParams, MlpParams};
use crate::nn::param::clip_grad_norm;
use crate::nn::tensor::Tensor;
use crate::nn::{Adam, AdamConfig, Binder, HasParams, NodeId, Parameter, Tape};
use crate::rng::{rng_for, rng_indexed};

/// Knobs for the conversion predictor.
#[derive(Debug, Clone)]
pub struct PredictorConfig {
    /// Reverse-channel CE coefficient.
    pub gamma: f64,
    /// Weighted conversion CE coefficient.
    pub delta: f64,
    /// Gradient-reversal strength into the shared trunk.
    pub lambda: f64,
    pub hidden: usize,
    pub n_layers: usize,
    pub channel_embed_dim: usize,
    pub feat_embed_dim: usize,
    pub attr_embed_dim: usize,
    pub mlp_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub verbose: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            gamma: 0.5,
            delta: 0.5,
            lambda: 1.0,
            hidden: 64,
            n_layers: 3,
            channel_embed_dim: 16,
            feat_embed_dim: 16,
            attr_embed_dim: 8,
            mlp_hidden: 64,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            grad_clip: 5.0,
            seed: 0,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictorParams {
    pub k: usize,
    pub d_f: usize,
    /// K channel rows plus the offset placeholder and the pad row.
    pub channel_embed: EmbeddingParams,
    pub attr_embeds: Vec<EmbeddingParams>,
    /// Projection of standardized touchpoint features (absent when d_f = 0).
    pub feat_proj: Option<LinearParams>,
    /// Standardization stats, stored as parameters so checkpoints carry
    /// them, but never bound to a tape (no gradients).
    pub feat_mean: Parameter,
    pub feat_std: Parameter,
    pub lstm: LstmStackParams,
    /// Gradient-reversed branch, 4 layers ending in a K-way softmax.
    pub reverse_mlp: MlpParams,
    /// Conversion head over (attention context, user embeddings).
    pub conversion_mlp: MlpParams,
}

impl PredictorParams {
    pub fn new(
        rng: &mut ChaCha8Rng,
        k: usize,
        d_f: usize,
        attr_cardinalities: &[usize],
        cfg: &PredictorConfig,
    ) -> Self {
        let h = cfg.hidden;
        let in_dim = cfg.channel_embed_dim + if d_f > 0 { cfg.feat_embed_dim } else { 0 };
        let attr_embeds = attr_cardinalities
            .iter()
            .enumerate()
            .map(|(f, &card)| {
                EmbeddingParams::new(rng, &format!("pred.attr{f}"), card, cfg.attr_embed_dim)
            })
            .collect::<Vec<_>>();
        let head_in = h + attr_embeds.len() * cfg.attr_embed_dim;
        let m = cfg.mlp_hidden;
        PredictorParams {
            k,
            d_f,
            channel_embed: EmbeddingParams::new(rng, "pred.ch", k + 2, cfg.channel_embed_dim),
            attr_embeds,
            feat_proj: (d_f > 0)
                .then(|| LinearParams::new(rng, "pred.feat", d_f, cfg.feat_embed_dim)),
            feat_mean: Parameter::new("pred.feat_mean", Tensor::zeros(&[1, d_f.max(1)])),
            feat_std: Parameter::new(
                "pred.feat_std",
                Tensor::new(vec![1, d_f.max(1)], vec![1.0; d_f.max(1)]).unwrap(),
            ),
            lstm: LstmStackParams::new(rng, "pred.lstm", in_dim, h, cfg.n_layers),
            reverse_mlp: MlpParams::new(rng, "pred.rev", &[h, m, m, m, k]),
            conversion_mlp: MlpParams::new(rng, "pred.conv", &[head_in, m, m, m, 2]),
        }
    }

    pub fn placeholder_token(&self) -> usize {
        self.k
    }

    pub fn pad_token(&self) -> usize {
        self.k + 1
    }
}

impl HasParams for PredictorParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.channel_embed.visit(f);
        for e in &self.attr_embeds {
            e.visit(f);
        }
        if let Some(p) = &self.feat_proj {
            p.visit(f);
        }
        f(&self.feat_mean);
        f(&self.feat_std);
        self.lstm.visit(f);
        self.reverse_mlp.visit(f);
        self.conversion_mlp.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.channel_embed.visit_mut(f);
        for e in &mut self.attr_embeds {
            e.visit_mut(f);
        }
        if let Some(p) = &mut self.feat_proj {
            p.visit_mut(f);
        }
        f(&mut self.feat_mean);
        f(&mut self.feat_std);
        self.lstm.visit_mut(f);
        self.reverse_mlp.visit_mut(f);
        self.conversion_mlp.visit_mut(f);
    }
}

/// One-step channel offset: [placeholder, c_1, ..., c_{T-1}].
pub fn shift_channels(channels: &[usize], placeholder: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(channels.len().max(1));
    out.push(placeholder);
    out.extend_from_slice(&channels[..channels.len().saturating_sub(1)]);
    out
}

pub struct BatchForward {
    /// B x 2 conversion softmax.
    pub probs: NodeId,
    /// Per step, B x K reversed-branch softmax.
    pub c_rev: Vec<NodeId>,
    /// B x T attention weights.
    pub attn: NodeId,
    /// valid[b][t]: step t is a real (or the placeholder) step of row b.
    pub valid: Vec<Vec<bool>>,
    /// Step hiddens of the trunk, for probes.
    pub steps: Vec<NodeId>,
}

fn check_batch(params: &PredictorParams, journeys: &[&Journey]) -> Result<()> {
    if journeys.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let n_attr = params.attr_embeds.len();
    for j in journeys {
        if j.user_attrs.len() != n_attr {
            return Err(CoreError::InvalidArgument("user attr arity".into()));
        }
        for tp in &j.touchpoints {
            if tp.channel >= params.k {
                return Err(CoreError::InvalidArgument(format!(
                    "channel {} out of range",
                    tp.channel
                )));
            }
            if tp.features.len() != params.d_f {
                return Err(CoreError::InvalidArgument("feature arity".into()));
            }
        }
    }
    Ok(())
}

/// Batched forward pass. Journeys may be empty; they are represented by
/// the lone placeholder step, which also defines p of the empty journey.
pub fn forward_batch(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &PredictorParams,
    journeys: &[&Journey],
    lambda: f64,
) -> Result<BatchForward> {
    check_batch(params, journeys)?;
    let b = journeys.len();
    let eff_len: Vec<usize> = journeys.iter().map(|j| j.len().max(1)).collect();
    let t_max = *eff_len.iter().max().unwrap();

    let shifted: Vec<Vec<usize>> = journeys
        .iter()
        .map(|j| shift_channels(&j.channels(), params.placeholder_token()))
        .collect();
    let ch_table = params.channel_embed.bind(tape, binder);
    let feat_proj = params.feat_proj.as_ref().map(|p| p.bind(tape, binder));
    let lstm = params.lstm.bind(tape, binder);

    let mean = params.feat_mean.value.data();
    let std = params.feat_std.value.data();
    let mut state = lstm.zero_state(tape, b);
    let mut steps = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let tokens: Vec<usize> = shifted
            .iter()
            .map(|s| s.get(t).copied().unwrap_or(params.pad_token()))
            .collect();
        let ch = tape.embed_rows(ch_table, &tokens)?;
        let v_in = if let Some(proj) = &feat_proj {
            let mut data = vec![0.0; b * params.d_f];
            for (r, j) in journeys.iter().enumerate() {
                if let Some(tp) = j.touchpoints.get(t) {
                    for (c, &f) in tp.features.iter().enumerate() {
                        data[r * params.d_f + c] = (f - mean[c]) / std[c].max(1e-6);
                    }
                }
            }
            let raw = tape.constant(Tensor::new(vec![b, params.d_f], data)?);
            let emb = proj.forward(tape, raw)?;
            tape.concat_cols(&[ch, emb])?
        } else {
            ch
        };
        steps.push(lstm.step(tape, v_in, &mut state)?);
    }

    let rev = params.reverse_mlp.bind(tape, binder);
    let mut c_rev = Vec::with_capacity(t_max);
    for &s in &steps {
        let flipped = tape.grl(s, lambda)?;
        c_rev.push(rev.forward_softmax(tape, flipped)?);
    }

    let last: Vec<usize> = eff_len.iter().map(|&l| l - 1).collect();
    let query = tape.select_step(&steps, &last)?;
    let valid: Vec<Vec<bool>> = eff_len
        .iter()
        .map(|&l| (0..t_max).map(|t| t < l).collect())
        .collect();
    let (context, attn) = attention_pool(tape, query, &steps, &valid)?;

    let mut head_parts = vec![context];
    for (f, table) in params.attr_embeds.iter().enumerate() {
        let idx: Vec<usize> = journeys.iter().map(|j| j.user_attrs[f]).collect();
        if let Some(&bad) = idx.iter().find(|&&v| v >= table.rows()) {
            return Err(CoreError::InvalidArgument(format!(
                "attr field {f} value {bad} out of range"
            )));
        }
        let t = table.bind(tape, binder);
        head_parts.push(tape.embed_rows(t, &idx)?);
    }
    let head_in = tape.concat_cols(&head_parts)?;
    let probs = params
        .conversion_mlp
        .bind(tape, binder)
        .forward_softmax(tape, head_in)?;
    Ok(BatchForward {
        probs,
        c_rev,
        attn,
        valid,
        steps,
    })
}

#[derive(Debug, Clone)]
pub struct PredictionOutput {
    pub p: f64,
    /// T x K reversed-branch distributions (empty journey: one row for the
    /// placeholder step).
    pub c_rev: Vec<Vec<f64>>,
    /// Attention weights over the journey's own steps.
    pub attn: Vec<f64>,
}

/// Inference-only forward for one journey.
pub fn forward(params: &PredictorParams, journey: &Journey, lambda: f64) -> Result<PredictionOutput> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let out = forward_batch(&mut tape, &mut binder, params, &[journey], lambda)?;
    let p = tape.value(out.probs).row(0)[1];
    if !p.is_finite() {
        return Err(CoreError::NonFinite("conversion probability".into()));
    }
    let t_eff = journey.len().max(1);
    let c_rev = out.c_rev[..t_eff]
        .iter()
        .map(|&n| tape.value(n).row(0).to_vec())
        .collect();
    let attn = tape.value(out.attn).row(0)[..t_eff].to_vec();
    Ok(PredictionOutput { p, c_rev, attn })
}

pub struct LossParts {
    pub loss: NodeId,
    /// Unscaled reverse-channel CE sum.
    pub rev: NodeId,
    /// Unscaled weighted conversion CE sum.
    pub conv: NodeId,
}

/// gamma * sum_i sum_t CE(c_rev[t], c_t) + delta * sum_i w_i * CE(p_i, y_i),
/// pad steps masked out of the first sum.
pub fn predictor_loss_batch(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &PredictorParams,
    journeys: &[&Journey],
    weights: &[f64],
    cfg: &PredictorConfig,
) -> Result<LossParts> {
    if weights.len() != journeys.len() {
        return Err(CoreError::InvalidArgument(
            "weights not aligned to journeys".into(),
        ));
    }
    let out = forward_batch(tape, binder, params, journeys, cfg.lambda)?;
    let mut rev_col: Option<NodeId> = None;
    for (t, &p) in out.c_rev.iter().enumerate() {
        let targets: Vec<Option<usize>> = journeys
            .iter()
            .map(|j| j.touchpoints.get(t).map(|tp| tp.channel))
            .collect();
        if targets.iter().all(|t| t.is_none()) {
            continue;
        }
        let ce = tape.cross_entropy_rows(p, targets)?;
        rev_col = Some(match rev_col {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let rev = match rev_col {
        Some(col) => tape.sum_all(col),
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let conv_targets: Vec<Option<usize>> = journeys
        .iter()
        .map(|j| Some(usize::from(j.converted)))
        .collect();
    let conv_ce = tape.cross_entropy_rows(out.probs, conv_targets)?;
    let conv = tape.weighted_row_sum(conv_ce, weights.to_vec())?;
    let g = tape.scale(rev, cfg.gamma);
    let d = tape.scale(conv, cfg.delta);
    let loss = tape.add(g, d)?;
    Ok(LossParts { loss, rev, conv })
}

pub struct PredictorTrainReport {
    pub params: PredictorParams,
    /// Per-epoch (total loss, reverse CE sum, weighted conversion CE sum).
    pub curves: Vec<(f64, f64, f64)>,
}

/// Feature standardization stats over every touchpoint in the set.
fn feature_stats(train: &Dataset, d_f: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d_f.max(1)];
    let mut m2 = vec![0.0; d_f.max(1)];
    let mut n = 0.0;
    for j in &train.journeys {
        for tp in &j.touchpoints {
            n += 1.0;
            for (c, &f) in tp.features.iter().enumerate() {
                let d = f - mean[c];
                mean[c] += d / n;
                m2[c] += d * (f - mean[c]);
            }
        }
    }
    let std = m2
        .iter()
        .map(|&v| if n > 1.0 { (v / (n - 1.0)).sqrt().max(1e-6) } else { 1.0 })
        .collect();
    (mean, std)
}

/// Minibatch Adam over the joint loss. `weights` must cover the training
/// journeys one-to-one; pass all ones for the unweighted ablation.
pub fn train_predictor(
    train: &Dataset,
    weights: &[f64],
    cfg: &PredictorConfig,
) -> Result<PredictorTrainReport> {
    if train.n() == 0 {
        return Err(CoreError::InvalidArgument("empty training set".into()));
    }
    if weights.len() != train.n() {
        return Err(CoreError::InvalidArgument(
            "weights not aligned to training set".into(),
        ));
    }
    let d_f = train.meta.features.len();
    let cards: Vec<usize> = train.meta.user_attrs.iter().map(|a| a.cardinality).collect();
    let mut init_rng = rng_for(cfg.seed, "pred-init");
    let mut params = PredictorParams::new(&mut init_rng, train.n_channels(), d_f, &cards, cfg);
    let (mean, std) = feature_stats(train, d_f);
    params.feat_mean.value.data_mut().copy_from_slice(&mean);
    params.feat_std.value.data_mut().copy_from_slice(&std);

    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..train.n()).collect();
    let mut curves = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng_indexed(cfg.seed, "pred-shuffle", epoch as u64);
        crate::reweighting::shuffle_indices(&mut order, &mut shuffle_rng);
        let mut totals = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Journey> = chunk.iter().map(|&i| &train.journeys[i]).collect();
            let w: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let parts = predictor_loss_batch(&mut tape, &mut binder, &params, &batch, &w, cfg)?;
            let loss = tape.value(parts.loss).data()[0];
            if !loss.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "predictor loss at epoch {epoch}"
                )));
            }
            totals.0 += loss;
            totals.1 += tape.value(parts.rev).data()[0];
            totals.2 += tape.value(parts.conv).data()[0];
            let grads = tape.backward(parts.loss)?;
            let mut named = binder.gradients(&grads, &tape);
            clip_grad_norm(&mut named, cfg.grad_clip)?;
            opt.step(&mut params, &named)?;
        }
        if cfg.verbose {
            eprintln!(
                "predictor epoch {epoch}: loss {:.4} rev {:.4} conv {:.4}",
                totals.0, totals.1, totals.2
            );
        }
        curves.push(totals);
    }
    Ok(PredictorTrainReport { params, curves })
}

/// Conversion probability for one journey on frozen parameters.
pub fn predict_conversion(params: &PredictorParams, journey: &Journey) -> Result<f64> {
    Ok(forward(params, journey, 0.0)?.p)
}

/// Batched inference, parallel across chunks of journeys.
pub fn predict_batch(params: &PredictorParams, journeys: &[&Journey]) -> Result<Vec<f64>> {
    let chunks: Vec<&[&Journey]> = journeys.chunks(256).collect();
    let nested: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|chunk| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let out = forward_batch(&mut tape, &mut binder, params, chunk, 0.0)?;
            let vals = tape.value(out.probs);
            let mut ps = Vec::with_capacity(chunk.len());
            for i in 0..chunk.len() {
                let p = vals.row(i)[1];
                if !p.is_finite() {
                    return Err(CoreError::NonFinite("conversion probability".into()));
                }
                ps.push(p);
            }
            Ok(ps)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}
