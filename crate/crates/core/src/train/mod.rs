//! Contrastive and auxiliary objectives, adapters and the optimizer loop.

pub mod adapters;
pub mod check;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use adapters::apply_low_rank_adapters;
pub use loss::{aux_loss, batch_loss, composite_loss, embed_pairs, info_nce, AuxKind, LossConfig};
pub use optim::Adam;
pub use trainer::{train, LossTrace, StepRecord, TrainConfig};
