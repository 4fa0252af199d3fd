use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::config::{AdapterConfig, MissingImageMode, ModelConfig};
use super::layers::{Linear, LinearRole, Stack};
use super::padding::pad_prompt;
use super::params::{Init, ParamId, ParamStore};
use crate::corpus::{ModalInput, PatchGrid};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Where a block of visual tokens came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Pseudo,
}

/// Visual tokens for one input, `rows × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens {
    pub tokens: Tensor,
    pub provenance: Provenance,
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone)]
struct VisionEncoder {
    patch_embed: Linear,
    pos: ParamId,
    stack: Stack,
    /// `V × P` pooling over the patch axis; absent when `P = V`.
    pool: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Projector {
    fc1: Linear,
    fc2: Linear,
}

impl Projector {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

#[derive(Debug, Clone)]
struct TextModel {
    tok_emb: ParamId,
    pos: ParamId,
    stack: Stack,
}

#[derive(Debug, Clone)]
struct AuxEncoder {
    input: Linear,
    pos: ParamId,
    stack: Stack,
}

/// Backbone, vision encoder, projector and the completion module
/// (padding, text-to-visual language model, auxiliary vision encoder).
#[derive(Debug)]
pub struct UniMoCo {
    cfg: ModelConfig,
    seed: u64,
    store: ParamStore,
    vision: VisionEncoder,
    projector: Projector,
    t2i: Option<TextModel>,
    aux: Option<AuxEncoder>,
    backbone: TextModel,
    image_calls: AtomicUsize,
    completion_calls: AtomicUsize,
}

impl Clone for UniMoCo {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            seed: self.seed,
            store: self.store.clone(),
            vision: self.vision.clone(),
            projector: self.projector.clone(),
            t2i: self.t2i.clone(),
            aux: self.aux.clone(),
            backbone: self.backbone.clone(),
            image_calls: AtomicUsize::new(0),
            completion_calls: AtomicUsize::new(0),
        }
    }
}

/// How the visual slot of one input is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Image,
    Pseudo,
    Zero,
    Empty,
}

/// Inputs per inference batch in [`UniMoCo::embed_all`].
const INFERENCE_CHUNK: usize = 64;

impl UniMoCo {
    /// Fresh model. Parameter values depend only on `seed` and the parameter
    /// name, so variants that share a component share its initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let adapters = cfg.adapters.clone();
        let cfg = ModelConfig {
            adapters: None,
            ..cfg
        };
        let d = cfg.d_model;
        let hidden = d * cfg.mlp_ratio;
        let mut store = ParamStore::default();
        let s = &mut store;

        let vision = VisionEncoder {
            patch_embed: Linear::new(s, seed, "vision.patch_embed", cfg.patch_dim, d, LinearRole::Other, 1.0),
            pos: s.add(seed, "vision.pos_emb".into(), vec![cfg.patches, d], Init::Normal(0.1)),
            stack: Stack::new(s, seed, "vision", cfg.vision_layers, d, hidden, false),
            pool: (cfg.patches != cfg.visual_tokens).then(|| {
                s.add(
                    seed,
                    "vision.pool".into(),
                    vec![cfg.visual_tokens, cfg.patches],
                    Init::Normal(1.0 / (cfg.patches as f64).sqrt()),
                )
            }),
        };
        let projector = Projector {
            fc1: Linear::new(s, seed, "projector.fc1", d, hidden, LinearRole::Other, 1.0),
            fc2: Linear::new(s, seed, "projector.fc2", hidden, d, LinearRole::Other, 1.0),
        };
        let completion = cfg.completion_enabled();
        let t2i_len = if cfg.use_padding {
            cfg.pad_target_length()
        } else {
            cfg.max_text_len
        };
        let t2i = completion.then(|| TextModel {
            tok_emb: s.add(seed, "t2i.tok_emb".into(), vec![cfg.t2i_vocab(), d], Init::Normal(1.0)),
            pos: s.add(seed, "t2i.pos_emb".into(), vec![t2i_len, d], Init::Normal(0.1)),
            stack: Stack::new(s, seed, "t2i", cfg.t2i_layers, d, hidden, true),
        });
        let aux = (completion && cfg.use_aux_encoder).then(|| AuxEncoder {
            input: Linear::new(s, seed, "aux.input", d, d, LinearRole::Other, 1.0),
            pos: s.add(seed, "aux.pos_emb".into(), vec![t2i_len, d], Init::Normal(0.1)),
            stack: Stack::new(s, seed, "aux", cfg.aux_layers, d, hidden, false),
        });
        let backbone = TextModel {
            tok_emb: s.add(seed, "backbone.tok_emb".into(), vec![cfg.vocab_size + 1, d], Init::Normal(1.0)),
            pos: s.add(seed, "backbone.pos_emb".into(), vec![cfg.max_backbone_len(), d], Init::Normal(0.1)),
            stack: Stack::new(s, seed, "backbone", cfg.backbone_layers, d, hidden, true),
        };
        let mut model = Self {
            cfg,
            seed,
            store,
            vision,
            projector,
            t2i,
            aux,
            backbone,
            image_calls: AtomicUsize::new(0),
            completion_calls: AtomicUsize::new(0),
        };
        if let Some(a) = adapters {
            model.add_adapters(&a)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Inputs routed through the vision encoder since construction.
    pub fn image_calls(&self) -> usize {
        self.image_calls.load(Ordering::Relaxed)
    }

    /// Inputs routed through the completion module since construction.
    pub fn completion_calls(&self) -> usize {
        self.completion_calls.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.image_calls.store(0, Ordering::Relaxed);
        self.completion_calls.store(0, Ordering::Relaxed);
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = self.vision.stack.linears_mut().collect();
        if let Some(t) = &mut self.t2i {
            out.extend(t.stack.linears_mut());
        }
        if let Some(a) = &mut self.aux {
            out.extend(a.stack.linears_mut());
        }
        out.extend(self.backbone.stack.linears_mut());
        out
    }

    /// Adds zero-initialized low-rank adapters to the targeted block linears
    /// and freezes every other parameter.
    pub(crate) fn add_adapters(&mut self, a: &AdapterConfig) -> Result<()> {
        if self.cfg.adapters.is_some() {
            return Err(Error::Config("model already carries adapters".into()));
        }
        if a.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        let seed = self.seed;
        let mut store = std::mem::take(&mut self.store);
        let mut result = Ok(());
        for id in store.ids().collect::<Vec<_>>() {
            store.set_trainable(id, false);
        }
        for lin in self.linears_mut() {
            if !lin.targeted_by(a.target) {
                continue;
            }
            let min_dim = lin.fan_in.min(lin.fan_out);
            if a.rank >= min_dim {
                result = Err(Error::Config(format!(
                    "adapter rank {} must be < {min_dim} for layer {}",
                    a.rank, lin.name
                )));
                break;
            }
            lin.add_lora(&mut store, seed, a.rank, a.scaling);
        }
        self.store = store;
        result?;
        self.cfg.adapters = Some(a.clone());
        Ok(())
    }

    fn check_text(&self, input: &ModalInput) -> Result<()> {
        let len = input.instruction.len() + input.content.len();
        if len == 0 || len > self.cfg.max_text_len {
            return Err(Error::contract(format!(
                "text length {len} outside 1..={}",
                self.cfg.max_text_len
            )));
        }
        if let Some(&bad) = input
            .text()
            .iter()
            .find(|&&t| t as usize >= self.cfg.vocab_size)
        {
            return Err(Error::contract(format!(
                "token {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn check_grid(&self, g: &PatchGrid) -> Result<()> {
        if g.patches() != self.cfg.patches || g.patch_dim() != self.cfg.patch_dim {
            return Err(Error::Dimension {
                op: "encode_image",
                left: vec![g.patches(), g.patch_dim()],
                right: vec![self.cfg.patches, self.cfg.patch_dim],
            });
        }
        Ok(())
    }

    /// Real visual tokens for `grids`, packed `[n·V, d]`.
    pub fn encode_images(&self, tape: &mut Tape, grids: &[&PatchGrid]) -> Result<Var> {
        let c = &self.cfg;
        for g in grids {
            self.check_grid(g)?;
        }
        let n = grids.len();
        let mut data = Vec::with_capacity(n * c.patches * c.patch_dim);
        for g in grids {
            data.extend_from_slice(g.data());
        }
        let x = tape.constant(Tensor::new(vec![n * c.patches, c.patch_dim], data)?);
        let v = &self.vision;
        let x = v.patch_embed.forward(tape, &self.store, x)?;
        let pos = self.store.var(tape, v.pos);
        let x = tape.add_positions(x, pos, n, c.patches)?;
        let mut x = v.stack.forward(tape, &self.store, x, n, c.patches, c.n_heads, c.ln_eps)?;
        if let Some(pool) = v.pool {
            let w = self.store.var(tape, pool);
            x = tape.seq_mix(w, x, n)?;
        }
        self.image_calls.fetch_add(n, Ordering::Relaxed);
        self.projector.forward(tape, &self.store, x)
    }

    /// Length of the pseudo token block for `content`.
    pub fn pseudo_len(&self, content: &[u32]) -> usize {
        if self.cfg.use_padding {
            self.cfg.pad_target_length()
        } else {
            content.len()
        }
    }

    /// Pseudo visual tokens for equally sized completion inputs, packed
    /// `[n·len, d]`, plus `len`.
    pub fn complete_batch(&self, tape: &mut Tape, contents: &[&[u32]]) -> Result<(Var, usize)> {
        let c = &self.cfg;
        let t2i = self
            .t2i
            .as_ref()
            .ok_or_else(|| Error::Config("completion module is disabled".into()))?;
        let padding = c.padding();
        let mut ids = Vec::new();
        let mut len = None;
        for content in contents {
            if let Some(&bad) = content.iter().find(|&&t| t as usize >= c.vocab_size) {
                return Err(Error::contract(format!(
                    "token {bad} outside vocabulary of {}",
                    c.vocab_size
                )));
            }
            let seq = if c.use_padding {
                pad_prompt(content, &padding)?
            } else {
                content.to_vec()
            };
            if seq.is_empty() || *len.get_or_insert(seq.len()) != seq.len() {
                return Err(Error::contract("completion batch needs equal non-zero lengths"));
            }
            ids.extend(seq.iter().map(|&t| t as usize));
        }
        let len = len.ok_or_else(|| Error::contract("empty completion batch"))?;
        let n = contents.len();
        let table = self.store.var(tape, t2i.tok_emb);
        let x = tape.embedding(table, &ids)?;
        let pos = self.store.var(tape, t2i.pos);
        let x = tape.add_positions(x, pos, n, len)?;
        let mut x = t2i.stack.forward(tape, &self.store, x, n, len, c.n_heads, c.ln_eps)?;
        if let Some(aux) = &self.aux {
            x = aux.input.forward(tape, &self.store, x)?;
            let pos = self.store.var(tape, aux.pos);
            x = tape.add_positions(x, pos, n, len)?;
            x = aux.stack.forward(tape, &self.store, x, n, len, c.n_heads, c.ln_eps)?;
        }
        if c.pseudo_through_projector {
            x = self.projector.forward(tape, &self.store, x)?;
        }
        self.completion_calls.fetch_add(n, Ordering::Relaxed);
        Ok((x, len))
    }

    fn slot(&self, input: &ModalInput) -> Slot {
        if input.has_image() {
            return Slot::Image;
        }
        match self.cfg.missing_image {
            MissingImageMode::Complete => Slot::Pseudo,
            MissingImageMode::ZeroFill => Slot::Zero,
            MissingImageMode::TextOnly => Slot::Empty,
        }
    }

    /// Embeddings `[n, d]`, row `i` for `inputs[i]`. Inputs are grouped by
    /// sequence layout; no information crosses between inputs.
    pub fn embed_batch(&self, tape: &mut Tape, inputs: &[&ModalInput]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::contract("embed_batch with no inputs"));
        }
        let mut groups: BTreeMap<(Slot, usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, x) in inputs.iter().enumerate() {
            self.check_text(x)?;
            let slot = self.slot(x);
            let vis = match slot {
                Slot::Image | Slot::Zero => self.cfg.visual_tokens,
                Slot::Pseudo => self.pseudo_len(&x.content),
                Slot::Empty => 0,
            };
            let text = x.instruction.len() + x.content.len() + 1;
            groups.entry((slot, vis, text)).or_default().push(i);
        }
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(inputs.len());
        for ((slot, vis, text), members) in &groups {
            let group: Vec<&ModalInput> = members.iter().map(|&i| inputs[i]).collect();
            parts.push(self.embed_group(tape, &group, *slot, *vis, *text)?);
            order.extend_from_slice(members);
        }
        let out = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        if order.iter().enumerate().all(|(k, &i)| k == i) {
            return Ok(out);
        }
        let mut inverse = vec![0; order.len()];
        for (k, &i) in order.iter().enumerate() {
            inverse[i] = k;
        }
        tape.select_rows(out, &inverse)
    }

    fn embed_group(
        &self,
        tape: &mut Tape,
        group: &[&ModalInput],
        slot: Slot,
        vis: usize,
        text: usize,
    ) -> Result<Var> {
        let c = &self.cfg;
        let n = group.len();
        let visual = match slot {
            Slot::Image => {
                let grids: Vec<&PatchGrid> = group.iter().filter_map(|x| x.image.as_ref()).collect();
                Some(self.encode_images(tape, &grids)?)
            }
            Slot::Pseudo => {
                let contents: Vec<&[u32]> = group.iter().map(|x| x.content.as_slice()).collect();
                Some(self.complete_batch(tape, &contents)?.0)
            }
            Slot::Zero => Some(tape.constant(Tensor::zeros(vec![n * vis, c.d_model]))),
            Slot::Empty => None,
        };
        let eos = c.vocab_size;
        let ids: Vec<usize> = group
            .iter()
            .flat_map(|x| x.text().into_iter().map(|t| t as usize).chain([eos]))
            .collect();
        let table = self.store.var(tape, self.backbone.tok_emb);
        let words = tape.embedding(table, &ids)?;
        let x = match visual {
            Some(v) => tape.concat_seq(&[(v, vis), (words, text)], n)?,
            None => words,
        };
        let len = vis + text;
        let pos = self.store.var(tape, self.backbone.pos);
        let x = tape.add_positions(x, pos, n, len)?;
        let h = self
            .backbone
            .stack
            .forward(tape, &self.store, x, n, len, c.n_heads, c.ln_eps)?;
        let last: Vec<usize> = (0..n).map(|s| s * len + len - 1).collect();
        let h = tape.select_rows(h, &last)?;
        tape.l2_normalize(h)
    }

    /// Real visual tokens for one image.
    pub fn encode_image(&self, grid: &PatchGrid) -> Result<VisualTokens> {
        let mut tape = Tape::inference();
        let v = self.encode_images(&mut tape, &[grid])?;
        Ok(VisualTokens {
            tokens: tape.value(v).clone(),
            provenance: Provenance::Real,
        })
    }

    /// Pseudo visual tokens for one text content.
    pub fn complete_modality(&self, content: &[u32]) -> Result<VisualTokens> {
        let mut tape = Tape::inference();
        let (v, _) = self.complete_batch(&mut tape, &[content])?;
        Ok(VisualTokens {
            tokens: tape.value(v).clone(),
            provenance: Provenance::Pseudo,
        })
    }

    pub fn embed(&self, input: &ModalInput) -> Result<Embedding> {
        Ok(self.embed_all(std::slice::from_ref(input))?.remove(0))
    }

    /// Inference embeddings in input order.
    pub fn embed_all(&self, inputs: &[ModalInput]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::inference();
            let refs: Vec<&ModalInput> = chunk.iter().collect();
            let e = self.embed_batch(&mut tape, &refs)?;
            let t = tape.value(e);
            out.extend((0..t.rows()).map(|r| Embedding(t.row(r).to_vec())));
        }
        Ok(out)
    }
}
