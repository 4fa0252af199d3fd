use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::corpus::{ModalInput, PairRecord};
use crate::error::{Error, Result};
use crate::model::UniMoCo;
use crate::numerics::{Tape, Tensor, Var};

/// Distance used to align an input's embedding with its image-dropped copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    /// `H(softmax(E/t), softmax(E′/t))` over embedding dimensions.
    CrossEntropy,
    Mse,
    Cosine,
}

impl std::str::FromStr for AuxKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(Self::CrossEntropy),
            "mse" => Ok(Self::Mse),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!("unknown auxiliary loss `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    pub aux_temp: f64,
    /// Treat the real-modality embedding as a fixed teacher.
    pub stop_grad_target: bool,
    pub aux_kind: AuxKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            alpha: 0.2,
            aux_temp: 0.1,
            stop_grad_target: true,
            aux_kind: AuxKind::CrossEntropy,
        }
    }
}

impl LossConfig {
    pub const KEYS: &'static [&'static str] = &[
        "loss.tau",
        "loss.alpha",
        "loss.aux_temp",
        "loss.stop_grad_target",
        "loss.aux_kind",
        "ablation.alpha",
    ];

    /// Reads `loss.*`; `ablation.alpha` overrides `loss.alpha`.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let mut c = Self {
            tau: cfg.get_or("loss.tau", d.tau)?,
            alpha: cfg.get_or("loss.alpha", d.alpha)?,
            aux_temp: cfg.get_or("loss.aux_temp", d.aux_temp)?,
            stop_grad_target: cfg.get_or("loss.stop_grad_target", d.stop_grad_target)?,
            aux_kind: cfg.get_or("loss.aux_kind", d.aux_kind)?,
        };
        if let Some(a) = cfg.get("ablation.alpha")? {
            c.alpha = a;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.aux_temp > 0.0 && self.aux_temp.is_finite()) {
            return Err(Error::Config(format!("aux_temp must be > 0, got {}", self.aux_temp)));
        }
        Ok(())
    }
}

/// Mean in-batch InfoNCE; row `i` of `targets` is the positive for row `i`
/// of `queries`.
pub fn info_nce(tape: &mut Tape, queries: Var, targets: Var, tau: f64) -> Result<Var> {
    tape.info_nce(queries, targets, tau)
}

/// `l1 + alpha · l2`; `alpha = 0` returns `l1` itself.
pub fn composite_loss(tape: &mut Tape, l1: Var, l2: Var, alpha: f64) -> Result<Var> {
    if alpha == 0.0 {
        return Ok(l1);
    }
    let weighted = tape.scale(l2, alpha);
    tape.add(l1, weighted)
}

/// Query and target embeddings `[B, d]` for a batch of pairs.
pub fn embed_pairs(tape: &mut Tape, model: &UniMoCo, batch: &[&PairRecord]) -> Result<(Var, Var)> {
    let mut inputs: Vec<&ModalInput> = batch.iter().map(|r| &r.query).collect();
    inputs.extend(batch.iter().map(|r| &r.target));
    let all = model.embed_batch(tape, &inputs)?;
    let b = batch.len();
    let q = tape.select_rows(all, &(0..b).collect::<Vec<_>>())?;
    let c = tape.select_rows(all, &(b..2 * b).collect::<Vec<_>>())?;
    Ok((q, c))
}

/// Auxiliary alignment loss given the batch's query and target embeddings.
/// Each side that carries an image contributes a term between its embedding
/// and the embedding of the same input with the image dropped; sides without
/// an image contribute nothing. The sum is divided by the batch size.
pub fn aux_loss_from(
    tape: &mut Tape,
    model: &UniMoCo,
    batch: &[&PairRecord],
    queries: Var,
    targets: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("auxiliary loss on an empty batch"));
    }
    let mut q_rows = Vec::new();
    let mut c_rows = Vec::new();
    let mut dropped = Vec::new();
    for (i, r) in batch.iter().enumerate() {
        if r.query.has_image() {
            q_rows.push(i);
            dropped.push(r.query.drop_image());
        }
    }
    for (i, r) in batch.iter().enumerate() {
        if r.target.has_image() {
            c_rows.push(i);
            dropped.push(r.target.drop_image());
        }
    }
    if dropped.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut parts = Vec::new();
    if !q_rows.is_empty() {
        parts.push(tape.select_rows(queries, &q_rows)?);
    }
    if !c_rows.is_empty() {
        parts.push(tape.select_rows(targets, &c_rows)?);
    }
    let e = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let refs: Vec<&ModalInput> = dropped.iter().collect();
    let e_prime = model.embed_batch(tape, &refs)?;
    let total = match cfg.aux_kind {
        AuxKind::CrossEntropy => tape.row_cross_entropy(e, e_prime, cfg.aux_temp, cfg.stop_grad_target)?,
        AuxKind::Mse => tape.row_mse(e, e_prime, cfg.stop_grad_target)?,
        AuxKind::Cosine => tape.row_cosine_distance(e, e_prime, cfg.stop_grad_target)?,
    };
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// Auxiliary loss for a batch, embedding the originals itself.
pub fn aux_loss(tape: &mut Tape, model: &UniMoCo, batch: &[&PairRecord], cfg: &LossConfig) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("auxiliary loss on an empty batch"));
    }
    let (q, c) = embed_pairs(tape, model, batch)?;
    aux_loss_from(tape, model, batch, q, c, cfg)
}

/// Loss terms of one step.
pub struct StepLosses {
    pub l1: Var,
    /// Absent when `alpha = 0`: the auxiliary term is then never computed.
    pub l2: Option<Var>,
    pub total: Var,
}

/// Full objective on one batch.
pub fn batch_loss(tape: &mut Tape, model: &UniMoCo, batch: &[&PairRecord], cfg: &LossConfig) -> Result<StepLosses> {
    let (q, c) = embed_pairs(tape, model, batch)?;
    let l1 = info_nce(tape, q, c, cfg.tau)?;
    if cfg.alpha == 0.0 {
        return Ok(StepLosses { l1, l2: None, total: l1 });
    }
    let l2 = aux_loss_from(tape, model, batch, q, c, cfg)?;
    let total = composite_loss(tape, l1, l2, cfg.alpha)?;
    Ok(StepLosses { l1, l2: Some(l2), total })
}
