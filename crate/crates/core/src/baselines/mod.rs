//! Comparison models trained on the same embedders: Cos-Sim-LVM and the
//! retrieval bi-modal VAE with a product-of-experts posterior.

mod cossim;
mod rbivae;
mod tc;

pub use cossim::{
    alignment_loss, cosine, cosine_table, cossim_train, CosSimConfig, CosSimLvm, CosSimSchedule,
};
pub use rbivae::{
    poe_posterior, rbivae_epoch, rbivae_train, RbiHistoryRow, RbiTerms, RbiTrainState, RbiVae,
    RbiVaeConfig, RBIVAE_MODEL_GROUP,
};
pub use tc::{permute_dims, TcDiscriminator, TcEstimate};
