use crate::corpus::ModalInput;
use crate::error::{Error, Result};
use crate::model::{Embedding, UniMoCo};

/// Candidate embeddings with their record ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateIndex {
    embeddings: Vec<Embedding>,
    ids: Vec<usize>,
}

impl CandidateIndex {
    pub fn new(embeddings: Vec<Embedding>, ids: Vec<usize>) -> Result<Self> {
        if embeddings.len() != ids.len() {
            return Err(Error::contract(format!(
                "{} embeddings for {} ids",
                embeddings.len(),
                ids.len()
            )));
        }
        if embeddings.is_empty() {
            return Err(Error::contract("empty candidate index"));
        }
        for (i, e) in embeddings.iter().enumerate() {
            let n = e.dot(e).sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::contract(format!("candidate {i} has norm {n}")));
            }
        }
        Ok(Self { embeddings, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    /// Id of the most similar candidate; equal similarities go to the lowest
    /// position.
    pub fn best(&self, query: &Embedding) -> usize {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (i, e) in self.embeddings.iter().enumerate() {
            let s = query.dot(e);
            if s > best_sim {
                best = i;
                best_sim = s;
            }
        }
        self.ids[best]
    }
}

/// One embedding per target, ids `0..n` in input order.
pub fn build_index(targets: &[ModalInput], model: &UniMoCo) -> Result<CandidateIndex> {
    if targets.is_empty() {
        return Err(Error::contract("cannot index an empty target list"));
    }
    let embeddings = model.embed_all(targets)?;
    CandidateIndex::new(embeddings, (0..targets.len()).collect())
}

/// Id of the best candidate for `query`.
pub fn match_query(query: &ModalInput, index: &CandidateIndex, model: &UniMoCo) -> Result<usize> {
    Ok(index.best(&model.embed(query)?))
}

pub fn precision_at_1(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} gold ids",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::contract("precision of an empty prediction list"));
    }
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}
