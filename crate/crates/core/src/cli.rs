//! Command implementations behind the `unimoco` binary.
//!
//! Every command reads one flat config file. Outputs land in the output
//! directory under fixed names:
//!
//! | command    | writes                                 |
//! |------------|----------------------------------------|
//! | `gen-data` | `train.jsonl`, `eval.jsonl`            |
//! | `train`    | `model.ckpt`, `loss_trace.txt`         |
//! | `eval`     | `scores.jsonl`                         |
//! | `bias`     | `bias.jsonl`                           |

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::KvConfig;
use crate::corpus::{read_manifest, write_manifest, CorpusSpec, ModalityCombo, PairRecord, World};
use crate::error::{Error, Result};
use crate::eval::{bias_experiment, evaluate, Architecture};
use crate::model::{load_checkpoint, save_checkpoint, AdapterConfig, MissingImageMode, ModelConfig, UniMoCo};
use crate::numerics::gradcheck::op_suite;
use crate::numerics::{GradCheckCase, GradCheckOptions, GradCheckReport};
use crate::train::check::pipeline_grad_check;
use crate::train::{apply_low_rank_adapters, train, LossConfig, TrainConfig};

pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const EVAL_MANIFEST: &str = "eval.jsonl";
pub const CHECKPOINT: &str = "model.ckpt";
pub const LOSS_TRACE: &str = "loss_trace.txt";
pub const SCORES: &str = "scores.jsonl";
pub const BIAS: &str = "bias.jsonl";

const RUN_KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "adapter.enabled",
    "adapter.rank",
    "adapter.scaling",
    "adapter.target",
    "train.init_checkpoint",
    "bias.total",
    "bias.seeds",
];

/// Everything one run needs, parsed from a single config file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub adapter: Option<AdapterConfig>,
    /// Starting weights for training, typically with adapters.
    pub init_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub bias_total: usize,
    pub bias_seeds: Vec<u64>,
}

impl RunConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut known: Vec<&str> = RUN_KEYS.to_vec();
        known.extend_from_slice(CorpusSpec::KEYS);
        known.extend_from_slice(ModelConfig::KEYS);
        known.extend_from_slice(LossConfig::KEYS);
        known.extend_from_slice(TrainConfig::KEYS);
        kv.reject_unknown(&known)?;
        let corpus = CorpusSpec::from_config(kv)?;
        let model = ModelConfig::from_config(kv, corpus.vocab_size, corpus.patches, corpus.patch_dim)?;
        let adapter = if kv.get_or("adapter.enabled", false)? {
            let d = AdapterConfig::default();
            Some(AdapterConfig {
                rank: kv.get_or("adapter.rank", d.rank)?,
                scaling: kv.get_or("adapter.scaling", d.scaling)?,
                target: kv.get_or("adapter.target", d.target)?,
            })
        } else {
            None
        };
        let seed: u64 = kv.require("seed")?;
        Ok(Self {
            loss: LossConfig::from_config(kv)?,
            train: TrainConfig::from_config(kv)?,
            init_checkpoint: kv.get::<String>("train.init_checkpoint")?.map(PathBuf::from),
            out_dir: PathBuf::from(kv.get_or("out_dir", "out".to_string())?),
            bias_total: kv.get_or("bias.total", corpus.total())?,
            bias_seeds: kv
                .get_list("bias.seeds")?
                .unwrap_or_else(|| vec![seed, seed + 1, seed + 2]),
            corpus,
            model,
            adapter,
        })
    }

    /// Loads `path`, applying `--seed` and `--out` overrides.
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut kv = KvConfig::load(path)?;
        if let Some(s) = seed {
            kv.set("seed", s);
        }
        if let Some(o) = out {
            kv.set("out_dir", o.display());
        }
        Self::from_kv(&kv)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn out<W: Write>(w: &mut W, text: impl std::fmt::Display) {
    // Reporting to a closed stdout is not worth failing a finished command.
    let _ = writeln!(w, "{text}");
}

fn tallies(records: &[PairRecord]) -> String {
    ModalityCombo::ALL
        .iter()
        .map(|&c| format!("{c}={}", records.iter().filter(|r| r.combo == c).count()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn cmd_gen_data<W: Write>(cfg: &RunConfig, w: &mut W) -> Result<()> {
    let world = World::new(&cfg.corpus)?;
    let train_set = world.gen_corpus()?;
    let eval_set = world.gen_eval_corpus()?;
    create_dir(&cfg.out_dir)?;
    write_manifest(&train_set, &cfg.out_dir.join(TRAIN_MANIFEST))?;
    write_manifest(&eval_set, &cfg.out_dir.join(EVAL_MANIFEST))?;
    out(w, format!("train {} pairs: {}", train_set.len(), tallies(&train_set)));
    out(w, format!("eval {} pairs: {}", eval_set.len(), tallies(&eval_set)));
    Ok(())
}

/// Trains on `train.jsonl`. On divergence the last finite weights are still
/// written before the error is returned.
pub fn cmd_train<W: Write>(cfg: &RunConfig, w: &mut W) -> Result<()> {
    let corpus = read_manifest(&cfg.out_dir.join(TRAIN_MANIFEST))?;
    let base = match &cfg.init_checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => UniMoCo::new(cfg.model.clone(), cfg.train.seed)?,
    };
    let mut model = match &cfg.adapter {
        Some(a) => apply_low_rank_adapters(&base, a)?,
        None => base,
    };
    out(
        w,
        format!(
            "training {} trainable parameters on {} pairs for {} steps",
            model.params().trainable_count(),
            corpus.len(),
            cfg.train.steps
        ),
    );
    let result = train(&corpus, &mut model, &cfg.train, &cfg.loss);
    save_checkpoint(&model, &cfg.out_dir.join(CHECKPOINT))?;
    let trace = result?;
    trace.write(&cfg.out_dir.join(LOSS_TRACE))?;
    if let (Some(first), Some(last)) = (trace.steps.first(), trace.steps.last()) {
        out(w, format!("loss {:.4} -> {:.4}", first.total, last.total));
    }
    Ok(())
}

/// Field-level differences between two model configs, ignoring adapters.
fn config_mismatch(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let a = serde_json::to_value(ModelConfig { adapters: None, ..expected.clone() }).expect("serializable");
    let b = serde_json::to_value(ModelConfig { adapters: None, ..found.clone() }).expect("serializable");
    let (a, b) = (a.as_object().expect("object"), b.as_object().expect("object"));
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: config {v} vs checkpoint {}", b[k]))
        .collect()
}

pub fn cmd_eval<W: Write>(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, w: &mut W) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let diffs = config_mismatch(&cfg.model, model.config());
    if !diffs.is_empty() {
        return Err(Error::Config(format!(
            "model config does not match checkpoint {}: {}",
            checkpoint.display(),
            diffs.join("; ")
        )));
    }
    let records = read_manifest(manifest)?;
    let report = evaluate(&records, &model)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(SCORES);
    std::fs::write(&path, report.to_jsonl()).map_err(|e| Error::io(&path, e))?;
    out(w, report.table());
    Ok(())
}

/// The two architectures of the bias experiment: the configured model and
/// the same model with missing images zero-filled and no auxiliary loss.
pub fn bias_architectures(cfg: &RunConfig) -> Vec<Architecture> {
    let completion = ModelConfig {
        missing_image: MissingImageMode::Complete,
        ..cfg.model.clone()
    };
    let baseline = ModelConfig {
        missing_image: MissingImageMode::ZeroFill,
        ..cfg.model.clone()
    };
    vec![
        Architecture {
            name: "completion".into(),
            model: completion,
            loss: cfg.loss.clone(),
        },
        Architecture {
            name: "zero_fill".into(),
            model: baseline,
            loss: LossConfig { alpha: 0.0, ..cfg.loss.clone() },
        },
    ]
}

pub fn cmd_bias<W: Write>(cfg: &RunConfig, w: &mut W) -> Result<()> {
    for d in ModalityCombo::ALL {
        let s = cfg.corpus.skewed(d, cfg.bias_total)?;
        let counts: Vec<String> = ModalityCombo::ALL
            .iter()
            .map(|c| format!("{c}={}", s.counts[c]))
            .collect();
        let expected = |c: ModalityCombo| if c == d { cfg.bias_total / 2 } else { cfg.bias_total / 4 };
        if ModalityCombo::ALL.iter().any(|&c| s.counts[&c] != expected(c)) {
            return Err(Error::Config(format!("skewed variant {d} has tallies {}", counts.join(" "))));
        }
        out(w, format!("variant {d}: {}", counts.join(" ")));
    }
    let report = bias_experiment(
        &cfg.corpus,
        cfg.bias_total,
        &bias_architectures(cfg),
        &cfg.train,
        &cfg.bias_seeds,
    )?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(BIAS);
    std::fs::write(&path, report.to_jsonl()).map_err(|e| Error::io(&path, e))?;
    out(w, report.table());
    for f in &report.failures {
        out(w, format!("failed cell: {f}"));
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Degenerate(format!("{} bias cells failed", report.failures.len())))
    }
}

/// Runs every op check and the pipeline check, over every coordinate, on
/// seeds 1 to 3. Returns the
/// names of failing checks.
pub fn cmd_gradcheck<W: Write>(w: &mut W) -> Result<Vec<String>> {
    let cases: Vec<(u64, GradCheckCase)> = (1..=3)
        .flat_map(|seed| op_suite(seed, 3).into_iter().map(move |c| (seed, c)))
        .collect();
    run_gradcheck(&cases, &[1, 2, 3], w)
}

pub fn run_gradcheck<W: Write>(
    cases: &[(u64, GradCheckCase)],
    pipeline_seeds: &[u64],
    w: &mut W,
) -> Result<Vec<String>> {
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut log = |r: GradCheckReport, w: &mut W| {
        let status = if r.passed { "ok" } else { "FAIL" };
        out(w, format!("{status:<4} {:<44} max rel err {:.2e}", r.name, r.max_rel_error));
        if !r.passed {
            failed.push(r.name);
        }
    };
    for (seed, case) in cases {
        log(case.run(&GradCheckOptions { seed: *seed, ..GradCheckOptions::default() })?, w);
    }
    for &seed in pipeline_seeds {
        let opts = GradCheckOptions {
            tolerance: 1e-3,
            seed,
            ..GradCheckOptions::default()
        };
        log(pipeline_grad_check(seed, &opts)?, w);
    }
    out(w, format!("{} failures in {:.1}s", failed.len(), start.elapsed().as_secs_f64()));
    Ok(failed)
}
