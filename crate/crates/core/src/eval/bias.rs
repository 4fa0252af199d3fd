use std::fmt::Write as _;

use serde::Serialize;

use super::report::evaluate;
use crate::corpus::{CorpusSpec, ModalityCombo, PairRecord, World};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, UniMoCo};
use crate::train::{train, LossConfig, TrainConfig};

/// A model variant trained in every cell of the experiment.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub name: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasCell {
    pub architecture: String,
    /// Combination holding half of the training pairs.
    pub dominant: String,
    pub eval_combo: String,
    /// Mean P@1 over the seeds that trained; `None` if every seed failed.
    pub p_at_1: Option<f64>,
    pub per_seed: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<BiasCell>,
    pub failures: Vec<String>,
}

fn population_std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

impl BiasReport {
    pub fn architectures(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.architecture) {
                out.push(c.architecture.clone());
            }
        }
        out
    }

    pub fn cell(&self, arch: &str, dominant: ModalityCombo, eval: ModalityCombo) -> Option<&BiasCell> {
        self.cells.iter().find(|c| {
            c.architecture == arch && c.dominant == dominant.tag() && c.eval_combo == eval.tag()
        })
    }

    /// Row of seed-mean P@1 for one training variant, in combination order.
    pub fn row(&self, arch: &str, dominant: ModalityCombo) -> Option<Vec<f64>> {
        ModalityCombo::ALL
            .iter()
            .map(|&e| self.cell(arch, dominant, e).and_then(|c| c.p_at_1))
            .collect()
    }

    /// Standard deviation of one variant's row across evaluation combinations.
    pub fn cross_combo_std(&self, arch: &str, dominant: ModalityCombo) -> Option<f64> {
        self.row(arch, dominant).map(|r| population_std(&r))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            let mut v = serde_json::to_value(c).expect("serializable");
            v["kind"] = "cell".into();
            writeln!(out, "{v}").expect("string write");
        }
        for arch in self.architectures() {
            for d in ModalityCombo::ALL {
                let v = serde_json::json!({
                    "kind": "spread",
                    "architecture": arch,
                    "dominant": d.tag(),
                    "cross_combo_std": self.cross_combo_std(&arch, d),
                });
                writeln!(out, "{v}").expect("string write");
            }
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        for arch in self.architectures() {
            writeln!(out, "{arch}").expect("string write");
            writeln!(out, "  {:<10} {:>7} {:>7} {:>7} {:>7}", "dominant", "TI_T", "T_TI", "TI_TI", "std").expect("string write");
            for d in ModalityCombo::ALL {
                let cells: Vec<String> = ModalityCombo::ALL
                    .iter()
                    .map(|&e| match self.cell(&arch, d, e).and_then(|c| c.p_at_1) {
                        Some(v) => format!("{v:>7.4}"),
                        None => format!("{:>7}", "failed"),
                    })
                    .collect();
                let std = self
                    .cross_combo_std(&arch, d)
                    .map_or(format!("{:>7}", "-"), |s| format!("{s:>7.4}"));
                writeln!(out, "  {:<10} {} {std}", d.tag(), cells.join(" ")).expect("string write");
            }
        }
        out
    }
}

/// Trains every architecture on three skewed corpora (one combination holds
/// half of `total` pairs, the others a quarter each) for every seed, and
/// scores each on one balanced evaluation set. Architectures share corpora,
/// batches and initialization per seed. A cell whose training fails is
/// recorded and the experiment continues.
pub fn bias_experiment(
    base: &CorpusSpec,
    total: usize,
    architectures: &[Architecture],
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<BiasReport> {
    if seeds.is_empty() || architectures.is_empty() {
        return Err(Error::Config("bias experiment needs seeds and architectures".into()));
    }
    let eval: Vec<PairRecord> = World::new(base)?.gen_eval_corpus()?;
    let mut corpora = Vec::new();
    for d in ModalityCombo::ALL {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let spec = CorpusSpec { seed, ..base.skewed(d, total)? };
            per_seed.push(World::new(&spec)?.gen_corpus()?);
        }
        corpora.push(per_seed);
    }
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for arch in architectures {
        for (di, d) in ModalityCombo::ALL.into_iter().enumerate() {
            let mut scores: Vec<Option<[f64; 3]>> = Vec::new();
            for (si, &seed) in seeds.iter().enumerate() {
                let run = || -> Result<[f64; 3]> {
                    let mut model = UniMoCo::new(arch.model.clone(), seed)?;
                    let tc = TrainConfig { seed, ..train_cfg.clone() };
                    train(&corpora[di][si], &mut model, &tc, &arch.loss)?;
                    let report = evaluate(&eval, &model)?;
                    let mut row = [0.0; 3];
                    for e in ModalityCombo::ALL {
                        row[e.index()] = report
                            .combo(e)
                            .ok_or_else(|| Error::Degenerate(format!("no {e} buckets")))?;
                    }
                    Ok(row)
                };
                match run() {
                    Ok(row) => scores.push(Some(row)),
                    Err(e) => {
                        failures.push(format!("{} dominant={} seed={seed}: {e}", arch.name, d.tag()));
                        scores.push(None);
                    }
                }
            }
            for e in ModalityCombo::ALL {
                let per_seed: Vec<Option<f64>> = scores.iter().map(|s| s.map(|r| r[e.index()])).collect();
                let ok: Vec<f64> = per_seed.iter().flatten().copied().collect();
                cells.push(BiasCell {
                    architecture: arch.name.clone(),
                    dominant: d.tag().to_string(),
                    eval_combo: e.tag().to_string(),
                    p_at_1: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
                    per_seed,
                });
            }
        }
    }
    Ok(BiasReport {
        seeds: seeds.to_vec(),
        cells,
        failures,
    })
}
