//! Post-hoc debiasing of contrastive text embeddings in a sparse-autoencoder
//! latent space: neuron scoring, modulation and steering, a desk-scale
//! Matryoshka SAE trainer, fairness metrics, linear probes and a synthetic
//! corpus generator with planted ground truth.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod error;
pub mod format;
pub mod linalg;
pub mod manifest;
pub mod metrics;
pub mod pca;
pub mod probes;
pub mod sae;
pub mod scoring;
pub mod steering;
pub mod synth;
pub mod train;

pub use error::{Result, SemError};
pub use sae::{init_sae, sae_decode, sae_encode, topk_relu, CenterInit, Embedding, LatentVector, SaeWeights};
pub use scoring::{bias_scores, content_score, median_activation, percentile_score, BiasSpec, NeuronScores, PromptActivations, PromptRole};
pub use steering::{debias_embedding, modulation_agnostic, modulation_aware, orth_proj_baseline, steer, ModulationVector, SteeringContext, Variant};
pub use train::{train_msae, TrainConfig};
