use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::retrieval::{precision_at_1, CandidateIndex};
use crate::corpus::{ModalInput, ModalityCombo, PairRecord, Split, TaskTag};
use crate::error::{Error, Result};
use crate::model::{Embedding, UniMoCo};

/// One candidate pool: every target sharing task, split and combination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketScore {
    pub task: String,
    pub split: String,
    pub combo: String,
    pub n_queries: usize,
    pub n_candidates: usize,
    pub p_at_1: f64,
    /// A single-candidate pool; reported but left out of every aggregate.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub buckets: Vec<BucketScore>,
    pub per_task: BTreeMap<String, f64>,
    pub per_combo: BTreeMap<String, f64>,
    pub ind: Option<f64>,
    pub ood: Option<f64>,
    pub overall: f64,
    pub n_queries: usize,
}

fn weighted<'a>(it: impl Iterator<Item = &'a BucketScore>) -> Option<f64> {
    let (hits, n) = it
        .filter(|b| !b.degenerate)
        .fold((0.0, 0usize), |(h, n), b| (h + b.p_at_1 * b.n_queries as f64, n + b.n_queries));
    (n > 0).then(|| hits / n as f64)
}

impl ScoreReport {
    fn from_buckets(buckets: Vec<BucketScore>) -> Result<Self> {
        let n_queries = buckets.iter().map(|b| b.n_queries).sum();
        let overall = weighted(buckets.iter()).ok_or_else(|| {
            Error::Degenerate("every evaluation bucket has a single candidate".into())
        })?;
        let mut per_task = BTreeMap::new();
        for t in TaskTag::ALL {
            if let Some(v) = weighted(buckets.iter().filter(|b| b.task == t.tag())) {
                per_task.insert(t.tag().to_string(), v);
            }
        }
        let mut per_combo = BTreeMap::new();
        for c in ModalityCombo::ALL {
            if let Some(v) = weighted(buckets.iter().filter(|b| b.combo == c.tag())) {
                per_combo.insert(c.tag().to_string(), v);
            }
        }
        Ok(Self {
            ind: weighted(buckets.iter().filter(|b| b.split == Split::Ind.tag())),
            ood: weighted(buckets.iter().filter(|b| b.split == Split::Ood.tag())),
            buckets,
            per_task,
            per_combo,
            overall,
            n_queries,
        })
    }

    pub fn combo(&self, c: ModalityCombo) -> Option<f64> {
        self.per_combo.get(c.tag()).copied()
    }

    pub fn bucket(&self, task: TaskTag, split: Split, combo: ModalityCombo) -> Option<&BucketScore> {
        self.buckets
            .iter()
            .find(|b| b.task == task.tag() && b.split == split.tag() && b.combo == combo.tag())
    }

    /// Query-weighted P@1 over the non-degenerate buckets of one split and
    /// combination.
    pub fn split_combo(&self, split: Split, combo: ModalityCombo) -> Option<f64> {
        weighted(
            self.buckets
                .iter()
                .filter(|b| b.split == split.tag() && b.combo == combo.tag()),
        )
    }

    /// One JSON object per bucket, then a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for b in &self.buckets {
            let mut v = serde_json::to_value(b).expect("serializable");
            v["kind"] = "bucket".into();
            writeln!(out, "{v}").expect("string write");
        }
        let summary = serde_json::json!({
            "kind": "summary",
            "per_task": self.per_task,
            "per_combo": self.per_combo,
            "ind": self.ind,
            "ood": self.ood,
            "overall": self.overall,
            "n_queries": self.n_queries,
        });
        writeln!(out, "{summary}").expect("string write");
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<15} {:<5} {:<6} {:>7} {:>6} {:>7}", "task", "split", "combo", "queries", "pool", "P@1")
            .expect("string write");
        for b in &self.buckets {
            writeln!(
                out,
                "{:<15} {:<5} {:<6} {:>7} {:>6} {:>7.4}{}",
                b.task,
                b.split,
                b.combo,
                b.n_queries,
                b.n_candidates,
                b.p_at_1,
                if b.degenerate { "  (degenerate)" } else { "" }
            )
            .expect("string write");
        }
        for (k, v) in &self.per_combo {
            writeln!(out, "combo {k:<9} {v:.4}").expect("string write");
        }
        for (k, v) in &self.per_task {
            writeln!(out, "task  {k:<15} {v:.4}").expect("string write");
        }
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        writeln!(out, "IND {}  OOD {}  overall {:.4}  ({} queries)", opt(self.ind), opt(self.ood), self.overall, self.n_queries)
            .expect("string write");
        out
    }
}

/// Scores given embeddings: `queries[i]` and `targets[i]` belong to
/// `records[i]`. Each query is matched against the targets of its bucket.
pub fn score_embeddings(records: &[PairRecord], queries: &[Embedding], targets: &[Embedding]) -> Result<ScoreReport> {
    if records.is_empty() {
        return Err(Error::contract("evaluation corpus is empty"));
    }
    if queries.len() != records.len() || targets.len() != records.len() {
        return Err(Error::contract("one query and one target embedding per record"));
    }
    let mut pools: BTreeMap<(TaskTag, Split, ModalityCombo), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        pools.entry((r.task, r.split, r.combo)).or_default().push(i);
    }
    let mut buckets = Vec::new();
    for ((task, split, combo), members) in pools {
        let index = CandidateIndex::new(
            members.iter().map(|&i| targets[i].clone()).collect(),
            members.clone(),
        )?;
        let predictions: Vec<usize> = members.iter().map(|&i| index.best(&queries[i])).collect();
        buckets.push(BucketScore {
            task: task.tag().to_string(),
            split: split.tag().to_string(),
            combo: combo.tag().to_string(),
            n_queries: members.len(),
            n_candidates: members.len(),
            p_at_1: precision_at_1(&predictions, &members)?,
            degenerate: members.len() == 1,
        });
    }
    ScoreReport::from_buckets(buckets)
}

pub fn evaluate(records: &[PairRecord], model: &UniMoCo) -> Result<ScoreReport> {
    let queries: Vec<ModalInput> = records.iter().map(|r| r.query.clone()).collect();
    let targets: Vec<ModalInput> = records.iter().map(|r| r.target.clone()).collect();
    let q = model.embed_all(&queries)?;
    let t = model.embed_all(&targets)?;
    score_embeddings(records, &q, &t)
}
