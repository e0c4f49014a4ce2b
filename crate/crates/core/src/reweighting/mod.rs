//! Journey reweighting.
//!
//! Pipeline: train a sequence VAE over channel sequences, use its posterior
//! to build positive/negative (u, z) pairs, train a domain classifier on
//! them, and convert per-sample density ratios into per-journey weights
//! that approximate p(C)/p(C|u).

mod domain;
mod vrae;
mod weights;

pub use domain::{
    build_domain_samples, density_ratio, ratio_from_probs, train_domain_classifier,
    DomainClassifierParams, DomainSample, DomainTrainReport,
};
pub use vrae::{
    reconstruction_accuracy, train_vrae, vrae_decode_batch, vrae_encode_batch, vrae_loss_batch,
    vrae_posteriors, LatentPosterior, VraeBatchLoss, VraeParams, VraeTrainReport,
};
pub use weights::{estimate_weights, JourneyWeights};

pub(crate) use vrae::shuffle as shuffle_indices;

/// Knobs for the whole reweighting stage. Loss coefficients and seed are
/// shared with the run configuration; the rest are desk-scale defaults.
#[derive(Debug, Clone)]
pub struct ReweightConfig {
    /// Reconstruction coefficient in the VAE loss.
    pub alpha: f64,
    /// KL coefficient in the VAE loss.
    pub beta: f64,
    pub d_z: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub epochs: usize,
    /// Epochs over which the KL coefficient ramps linearly from 0 to beta.
    /// Feed-previous decoding collapses the posterior if the KL term bites
    /// before the reconstruction path forms; the final objective is
    /// unchanged.
    pub kl_warmup_epochs: usize,
    pub clf_epochs: usize,
    pub clf_hidden: usize,
    pub attr_embed_dim: usize,
    pub holdout_fraction: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// MC samples per journey in the harmonic-mean weight estimate.
    pub s_samples: usize,
    pub w_min: f64,
    pub w_max: f64,
    /// Mean-normalize weights to 1 after clipping. Off reproduces the
    /// literal unnormalized formula.
    pub normalize: bool,
    pub seed: u64,
    pub verbose: bool,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        ReweightConfig {
            alpha: 0.5,
            beta: 0.5,
            d_z: 16,
            embed_dim: 16,
            hidden: 64,
            n_layers: 3,
            epochs: 30,
            kl_warmup_epochs: 20,
            clf_epochs: 20,
            clf_hidden: 64,
            attr_embed_dim: 8,
            holdout_fraction: 0.1,
            batch_size: 64,
            lr: 1e-3,
            grad_clip: 5.0,
            s_samples: 32,
            w_min: 0.1,
            w_max: 10.0,
            normalize: true,
            seed: 0,
            verbose: false,
        }
    }
}

#[cfg(test)]
mod tests;
