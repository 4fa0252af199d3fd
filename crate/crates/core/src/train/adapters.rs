use crate::error::Result;
use crate::model::{AdapterConfig, UniMoCo};

/// Copy of `model` with zero-initialized low-rank adapters on the targeted
/// block linears. Only adapter factors stay trainable.
pub fn apply_low_rank_adapters(model: &UniMoCo, cfg: &AdapterConfig) -> Result<UniMoCo> {
    let mut adapted = model.clone();
    adapted.add_adapters(cfg)?;
    Ok(adapted)
}
