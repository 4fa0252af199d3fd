//! Synthetic multi-modal pair corpus and its manifest format.

pub mod manifest;
pub mod synth;
pub mod types;

pub use manifest::{read_manifest, write_manifest};
pub use synth::{gen_corpus, CorpusSpec, World};
pub use types::{ModalInput, ModalityCombo, PairRecord, PatchGrid, Split, TaskTag};
