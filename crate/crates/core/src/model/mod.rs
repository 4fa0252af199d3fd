//! Backbone, vision encoder and modality completion.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod padding;
pub mod params;
pub mod unimoco;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{AdapterConfig, AdapterTarget, MissingImageMode, ModelConfig, PaddingConfig};
pub use padding::pad_prompt;
pub use params::{ParamId, ParamStore};
pub use unimoco::{Embedding, Provenance, UniMoCo, VisualTokens};
