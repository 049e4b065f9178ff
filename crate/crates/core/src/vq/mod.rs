//! Neural vector-quantization discretizers.
//!
//! [`vqvae`] is a frame-wise VQ-VAE trained with a straight-through
//! estimator. [`wav2vec`] provides the grouped quantizer and contrastive
//! objective of vq-wav2vec as standalone building blocks.

pub mod vqvae;
pub mod wav2vec;

pub use vqvae::{
    corpus_loss, gradients, quantize_nearest, vqvae_loss, vqvae_train, Affine, Gradients,
    LossBreakdown, Mlp, PlateauHalving, TrainTrace, VqVaeConfig, VqVaeModel,
};
pub use wav2vec::{
    contrastive_loss, grouped_quantize, log_sigmoid, sample_negatives, ContrastiveLossConfig,
    GroupedCodebook, QuantizeMode, StepTransform,
};
