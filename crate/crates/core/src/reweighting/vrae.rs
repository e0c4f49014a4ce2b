//! Sequence VAE over pure channel sequences.
//!
//! The encoder LSTM reads the journey's channel tokens and maps the final
//! hidden state to a diagonal Gaussian posterior over z. The decoder LSTM
//! starts from h'_0 = tanh(W_z z + b_z), consumes a learned begin token,
//! then feeds each step's argmax back in as the next input (no teacher
//! forcing, at train time too), emitting a softmax over the K channels per
//! step.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::nn::layers::{EmbeddingParams, LinearParams, LstmStackParams};
use crate::nn::param::clip_grad_norm;
use crate::nn::{Adam, AdamConfig, Binder, HasParams, NodeId, Parameter, Tape};
use crate::rng::{rng_for, rng_indexed};

use super::ReweightConfig;

#[derive(Debug, Clone)]
pub struct VraeParams {
    pub k: usize,
    pub d_z: usize,
    /// Shared token table with K channel rows plus begin and pad rows.
    pub embed: EmbeddingParams,
    pub encoder: LstmStackParams,
    pub w_mu: LinearParams,
    pub w_sigma: LinearParams,
    /// z to the per-layer initial decoder hiddens (d_z -> n_layers * hidden).
    pub w_z: LinearParams,
    pub decoder: LstmStackParams,
    pub w_o: LinearParams,
}

impl VraeParams {
    pub fn new(rng: &mut ChaCha8Rng, k: usize, cfg: &ReweightConfig) -> Self {
        assert!(k >= 1 && cfg.d_z >= 1);
        let h = cfg.hidden;
        VraeParams {
            k,
            d_z: cfg.d_z,
            embed: EmbeddingParams::new(rng, "vrae.embed", k + 2, cfg.embed_dim),
            encoder: LstmStackParams::new(rng, "vrae.enc", cfg.embed_dim, h, cfg.n_layers),
            w_mu: LinearParams::new(rng, "vrae.mu", h, cfg.d_z),
            w_sigma: LinearParams::new(rng, "vrae.sigma", h, cfg.d_z),
            w_z: LinearParams::new(rng, "vrae.z0", cfg.d_z, cfg.n_layers * h),
            decoder: LstmStackParams::new(rng, "vrae.dec", cfg.embed_dim, h, cfg.n_layers),
            w_o: LinearParams::new(rng, "vrae.out", h, k),
        }
    }

    pub fn begin_token(&self) -> usize {
        self.k
    }

    pub fn pad_token(&self) -> usize {
        self.k + 1
    }
}

impl HasParams for VraeParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.embed.visit(f);
        self.encoder.visit(f);
        self.w_mu.visit(f);
        self.w_sigma.visit(f);
        self.w_z.visit(f);
        self.decoder.visit(f);
        self.w_o.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.embed.visit_mut(f);
        self.encoder.visit_mut(f);
        self.w_mu.visit_mut(f);
        self.w_sigma.visit_mut(f);
        self.w_z.visit_mut(f);
        self.decoder.visit_mut(f);
        self.w_o.visit_mut(f);
    }
}

fn check_channels(params: &VraeParams, batch: &[&[usize]]) -> Result<()> {
    for seq in batch {
        if seq.is_empty() {
            return Err(CoreError::InvalidArgument("empty channel sequence".into()));
        }
        if let Some(&c) = seq.iter().find(|&&c| c >= params.k) {
            return Err(CoreError::InvalidArgument(format!(
                "channel {c} out of range for {} channels",
                params.k
            )));
        }
    }
    Ok(())
}

/// Encode a batch of channel sequences into posterior (mu, log_sigma)
/// nodes, each B x d_z. Rows are padded to the longest sequence; each
/// row's final hidden is taken at its own last real step, so padding
/// never reaches the posterior.
pub fn vrae_encode_batch(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &VraeParams,
    batch: &[&[usize]],
) -> Result<(NodeId, NodeId)> {
    check_channels(params, batch)?;
    let t_max = batch.iter().map(|s| s.len()).max().unwrap_or(0);
    let table = params.embed.bind(tape, binder);
    let encoder = params.encoder.bind(tape, binder);
    let mut state = encoder.zero_state(tape, batch.len());
    let mut tops = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let idx: Vec<usize> = batch
            .iter()
            .map(|s| s.get(t).copied().unwrap_or(params.pad_token()))
            .collect();
        let x = tape.embed_rows(table, &idx)?;
        tops.push(encoder.step(tape, x, &mut state)?);
    }
    let last: Vec<usize> = batch.iter().map(|s| s.len() - 1).collect();
    let h_final = tape.select_step(&tops, &last)?;
    let mu = params.w_mu.bind(tape, binder).forward(tape, h_final)?;
    let log_sigma = params.w_sigma.bind(tape, binder).forward(tape, h_final)?;
    Ok((mu, log_sigma))
}

/// Run the feed-previous decoder for `t_max` steps from latent codes z
/// (B x d_z). Returns one B x K probability node per step plus the argmax
/// token fed at each step after the begin token.
pub fn vrae_decode_batch(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &VraeParams,
    z: NodeId,
    t_max: usize,
) -> Result<(Vec<NodeId>, Vec<Vec<usize>>)> {
    if t_max == 0 {
        return Err(CoreError::InvalidArgument("decode length 0".into()));
    }
    let b = tape.value(z).shape()[0];
    let h = params.decoder.hidden;
    let table = params.embed.bind(tape, binder);
    let decoder = params.decoder.bind(tape, binder);
    let w_o = params.w_o.bind(tape, binder);

    let lin = params.w_z.bind(tape, binder).forward(tape, z)?;
    let h0 = tape.tanh(lin);
    let mut state = decoder.zero_state(tape, b);
    for (l, slot) in state.iter_mut().enumerate() {
        slot.0 = tape.slice_cols(h0, l * h, h)?;
    }

    let mut tokens = vec![params.begin_token(); b];
    let mut probs = Vec::with_capacity(t_max);
    let mut fed = Vec::with_capacity(t_max);
    for _ in 0..t_max {
        fed.push(tokens.clone());
        let x = tape.embed_rows(table, &tokens)?;
        let top = decoder.step(tape, x, &mut state)?;
        let logits = w_o.forward(tape, top)?;
        let p = tape.softmax(logits)?;
        tokens = argmax_rows(tape.value(p).data(), params.k);
        probs.push(p);
    }
    Ok((probs, fed))
}

fn argmax_rows(data: &[f64], k: usize) -> Vec<usize> {
    data.chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

pub struct VraeBatchLoss {
    pub loss: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
    /// Real (non-pad) token count and how many the decoder argmax got right.
    pub tokens: usize,
    pub correct: usize,
}

/// alpha * sum_i sum_t CE(c_t, decoded_t) + beta * sum_i KL(q(z|c_i) || N(0,I)).
/// Sums are over the batch without length normalization, so long journeys
/// weigh more.
pub fn vrae_loss_batch(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &VraeParams,
    batch: &[&[usize]],
    alpha: f64,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<VraeBatchLoss> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let (mu, log_sigma) = vrae_encode_batch(tape, binder, params, batch)?;
    let eps: Vec<f64> = (0..batch.len() * params.d_z)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let z = tape.reparam(mu, log_sigma, eps)?;
    let t_max = batch.iter().map(|s| s.len()).max().unwrap();
    let (probs, _) = vrae_decode_batch(tape, binder, params, z, t_max)?;

    let mut ce_col: Option<NodeId> = None;
    let mut tokens = 0usize;
    let mut correct = 0usize;
    for (t, &p) in probs.iter().enumerate() {
        let targets: Vec<Option<usize>> = batch.iter().map(|s| s.get(t).copied()).collect();
        let guess = argmax_rows(tape.value(p).data(), params.k);
        for (tgt, g) in targets.iter().zip(&guess) {
            if let Some(tgt) = tgt {
                tokens += 1;
                correct += usize::from(tgt == g);
            }
        }
        let ce_t = tape.cross_entropy_rows(p, targets)?;
        ce_col = Some(match ce_col {
            Some(acc) => tape.add(acc, ce_t)?,
            None => ce_t,
        });
    }
    let recon = tape.sum_all(ce_col.unwrap());
    let kl = tape.kl_std_normal(mu, log_sigma)?;
    let a = tape.scale(recon, alpha);
    let b = tape.scale(kl, beta);
    let loss = tape.add(a, b)?;
    Ok(VraeBatchLoss {
        loss,
        recon,
        kl,
        tokens,
        correct,
    })
}

/// Posterior parameters for one journey, read off a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl LatentPosterior {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .map(|(m, l)| {
                let e: f64 = StandardNormal.sample(rng);
                m + l.exp() * e
            })
            .collect()
    }
}

/// Deterministic posteriors for a batch of sequences (no gradients kept).
/// Processes fixed-size chunks so tape memory stays bounded; rows are
/// independent, so chunking cannot change values.
pub fn vrae_posteriors(params: &VraeParams, batch: &[&[usize]]) -> Result<Vec<LatentPosterior>> {
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(256) {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let (mu, log_sigma) = vrae_encode_batch(&mut tape, &mut binder, params, chunk)?;
        let mu_t = tape.value(mu);
        let ls_t = tape.value(log_sigma);
        for i in 0..chunk.len() {
            let p = LatentPosterior {
                mu: mu_t.row(i).to_vec(),
                log_sigma: ls_t.row(i).to_vec(),
            };
            if p.mu.iter().chain(&p.log_sigma).any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite("vrae posterior".into()));
            }
            out.push(p);
        }
    }
    Ok(out)
}

pub struct VraeTrainReport {
    pub params: VraeParams,
    /// Per-epoch (loss, reconstruction token accuracy).
    pub epochs: Vec<(f64, f64)>,
}

/// Minibatch Adam over the VRAE loss. Aborts on a non-finite loss.
pub fn train_vrae(train: &Dataset, cfg: &ReweightConfig) -> Result<VraeTrainReport> {
    if train.n() == 0 {
        return Err(CoreError::InvalidArgument("empty training set".into()));
    }
    let mut init_rng = rng_for(cfg.seed, "vrae-init");
    let mut params = VraeParams::new(&mut init_rng, train.n_channels(), cfg);
    let sequences: Vec<Vec<usize>> = train.journeys.iter().map(|j| j.channels()).collect();
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    for epoch in 0..cfg.epochs {
        let beta = if cfg.kl_warmup_epochs > 0 {
            cfg.beta * ((epoch + 1) as f64 / cfg.kl_warmup_epochs as f64).min(1.0)
        } else {
            cfg.beta
        };
        let mut shuffle_rng = rng_indexed(cfg.seed, "vrae-shuffle", epoch as u64);
        shuffle(&mut order, &mut shuffle_rng);
        let mut eps_rng = rng_indexed(cfg.seed, "vrae-eps", epoch as u64);
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| sequences[i].as_slice()).collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let out = vrae_loss_batch(
                &mut tape,
                &mut binder,
                &params,
                &batch,
                cfg.alpha,
                beta,
                &mut eps_rng,
            )?;
            let loss = tape.value(out.loss).data()[0];
            if !loss.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "vrae loss at epoch {epoch} (recon {}, kl {})",
                    tape.value(out.recon).data()[0],
                    tape.value(out.kl).data()[0]
                )));
            }
            loss_sum += loss;
            tokens += out.tokens;
            correct += out.correct;
            let grads = tape.backward(out.loss)?;
            let mut named = binder.gradients(&grads, &tape);
            clip_grad_norm(&mut named, cfg.grad_clip)?;
            opt.step(&mut params, &named)?;
        }
        let acc = correct as f64 / tokens as f64;
        if cfg.verbose {
            eprintln!("vrae epoch {epoch}: loss {loss_sum:.4} recon acc {acc:.4}");
        }
        epochs.push((loss_sum, acc));
    }
    Ok(VraeTrainReport { params, epochs })
}

pub(crate) fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Token accuracy of feed-previous reconstruction from the posterior mean.
pub fn reconstruction_accuracy(params: &VraeParams, batch: &[&[usize]]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let (mu, _) = vrae_encode_batch(&mut tape, &mut binder, params, batch)?;
    let t_max = batch.iter().map(|s| s.len()).max().unwrap_or(0);
    let (probs, _) = vrae_decode_batch(&mut tape, &mut binder, params, mu, t_max)?;
    let mut tokens = 0usize;
    let mut correct = 0usize;
    for (t, &p) in probs.iter().enumerate() {
        let guess = argmax_rows(tape.value(p).data(), params.k);
        for (seq, g) in batch.iter().zip(&guess) {
            if let Some(tgt) = seq.get(t) {
                tokens += 1;
                correct += usize::from(tgt == g);
            }
        }
    }
    Ok(correct as f64 / tokens.max(1) as f64)
}
