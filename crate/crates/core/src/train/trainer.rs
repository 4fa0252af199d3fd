use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::loss::{batch_loss, LossConfig};
use super::optim::Adam;
use crate::config::KvConfig;
use crate::corpus::PairRecord;
use crate::error::{Error, Result};
use crate::model::UniMoCo;
use crate::numerics::Tape;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 300,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "train.batch_size",
        "train.steps",
        "train.lr",
        "train.beta1",
        "train.beta2",
        "train.adam_eps",
    ];

    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            batch_size: cfg.get_or("train.batch_size", d.batch_size)?,
            steps: cfg.get_or("train.steps", d.steps)?,
            lr: cfg.get_or("train.lr", d.lr)?,
            beta1: cfg.get_or("train.beta1", d.beta1)?,
            beta2: cfg.get_or("train.beta2", d.beta2)?,
            adam_eps: cfg.get_or("train.adam_eps", d.adam_eps)?,
            seed: cfg.require("seed")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l1: f64,
    pub l2: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub steps: Vec<StepRecord>,
}

impl LossTrace {
    /// Mean InfoNCE over `steps[range]`.
    pub fn mean_l1(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.steps[range];
        s.iter().map(|r| r.l1).sum::<f64>() / s.len() as f64
    }

    /// Two columns: step and total loss.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# step loss\n");
        for r in &self.steps {
            writeln!(out, "{} {}", r.step, r.total).expect("string write");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Trains `model` in place. On a non-finite loss or gradient the run stops
/// with [`Error::NonFiniteLoss`] and `model` keeps the weights of the last
/// finite step.
pub fn train(
    corpus: &[PairRecord],
    model: &mut UniMoCo,
    tc: &TrainConfig,
    lc: &LossConfig,
) -> Result<LossTrace> {
    tc.validate()?;
    lc.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if tc.batch_size > corpus.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds corpus size {}",
            tc.batch_size,
            corpus.len()
        )));
    }
    let mut rng = stream(tc.seed, "train.batches");
    let mut opt = Adam::new(tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
    let mut trace = LossTrace::default();
    for step in 0..tc.steps {
        let idx = sample(&mut rng, corpus.len(), tc.batch_size);
        let batch: Vec<&PairRecord> = idx.iter().map(|i| &corpus[i]).collect();
        let mut tape = Tape::new();
        // Validated inputs only turn degenerate once activations blow up.
        let losses = match batch_loss(&mut tape, model, &batch, lc) {
            Err(Error::Degenerate(_)) => return Err(Error::NonFiniteLoss { step }),
            r => r?,
        };
        let record = StepRecord {
            step,
            l1: tape.value(losses.l1).item(),
            l2: losses.l2.map(|v| tape.value(v).item()),
            total: tape.value(losses.total).item(),
        };
        if !record.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = tape.backward(losses.total)?;
        if opt.step(model.params_mut(), &grads).is_err() {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.steps.push(record);
    }
    Ok(trace)
}
