//! Configuration, checkpoints and the three training stages.

pub mod checkpoint;
pub mod config;
pub mod stages;

pub use checkpoint::{file_hash, Checkpoint, CHECKPOINT_VERSION};
pub use config::{Ablation, Config, GenerateConfig, ModelConfig, RetrievalConfig, TrainConfig};
pub use stages::{
    batch_indices, decoder_dev_loss, fit_prior, recon_nll, selected_evidence, step_rng, train_decoder, train_vqvae,
    EvidenceCache, StageReport, StageRun,
};
