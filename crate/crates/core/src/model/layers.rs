use serde::{Deserialize, Serialize};

use super::config::AdapterTarget;
use super::params::{Init, ParamId, ParamStore};
use crate::error::Result;
use crate::numerics::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinearRole {
    Attention,
    Mlp,
    Other,
}

/// Low-rank update `scale · (x Aᵀ) Bᵀ` with `A: r × in`, `B: out × r`.
#[derive(Debug, Clone)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

/// `y = x W + b`, `W: in × out`, plus an optional adapter.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
    pub role: LinearRole,
    pub lora: Option<Lora>,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        role: LinearRole,
        gain: f64,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        Self {
            name: name.to_string(),
            w: store.add(seed, format!("{name}.weight"), vec![fan_in, fan_out], Init::Normal(std)),
            b: store.add(seed, format!("{name}.bias"), vec![fan_out], Init::Zeros),
            fan_in,
            fan_out,
            role,
            lora: None,
        }
    }

    pub fn targeted_by(&self, target: AdapterTarget) -> bool {
        match (target, self.role) {
            (_, LinearRole::Other) => false,
            (AdapterTarget::All, _) => true,
            (AdapterTarget::Attention, r) => r == LinearRole::Attention,
            (AdapterTarget::Mlp, r) => r == LinearRole::Mlp,
        }
    }

    pub(crate) fn add_lora(&mut self, store: &mut ParamStore, seed: u64, rank: usize, scaling: f64) {
        let std = 1.0 / (self.fan_in as f64).sqrt();
        let a = store.add(
            seed,
            format!("{}.lora_a", self.name),
            vec![rank, self.fan_in],
            Init::Normal(std),
        );
        let b = store.add(seed, format!("{}.lora_b", self.name), vec![self.fan_out, rank], Init::Zeros);
        self.lora = Some(Lora { a, b, scale: scaling });
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.var(tape, self.w);
        let b = store.var(tape, self.b);
        let xw = tape.matmul(x, w)?;
        let mut y = tape.add_row(xw, b)?;
        if let Some(l) = &self.lora {
            let a = store.var(tape, l.a);
            let bm = store.var(tape, l.b);
            let xa = tape.matmul_nt(x, a)?;
            let delta = tape.matmul_nt(xa, bm)?;
            let delta = tape.scale(delta, l.scale);
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub(crate) fn new(store: &mut ParamStore, seed: u64, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(seed, format!("{name}.gamma"), vec![width], Init::Ones),
            beta: store.add(seed, format!("{name}.beta"), vec![width], Init::Zeros),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let g = store.var(tape, self.gamma);
        let b = store.var(tape, self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub(crate) fn new(store: &mut ParamStore, seed: u64, name: &str, d: usize, hidden: usize, depth: usize) -> Self {
        let res_gain = 1.0 / (2.0 * depth as f64).sqrt();
        let lin = |store: &mut ParamStore, part: &str, i, o, role, gain| {
            Linear::new(store, seed, &format!("{name}.{part}"), i, o, role, gain)
        };
        Self {
            ln1: Norm::new(store, seed, &format!("{name}.ln1"), d),
            q: lin(store, "attn.q", d, d, LinearRole::Attention, 1.0),
            k: lin(store, "attn.k", d, d, LinearRole::Attention, 1.0),
            v: lin(store, "attn.v", d, d, LinearRole::Attention, 1.0),
            o: lin(store, "attn.o", d, d, LinearRole::Attention, res_gain),
            ln2: Norm::new(store, seed, &format!("{name}.ln2"), d),
            fc1: lin(store, "mlp.fc1", d, hidden, LinearRole::Mlp, 1.0),
            fc2: lin(store, "mlp.fc2", hidden, d, LinearRole::Mlp, res_gain),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        n_seq: usize,
        len: usize,
        heads: usize,
        causal: bool,
        eps: f64,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x, eps)?;
        let q = self.q.forward(tape, store, h)?;
        let k = self.k.forward(tape, store, h)?;
        let v = self.v.forward(tape, store, h)?;
        let a = tape.attention(q, k, v, n_seq, len, heads, causal)?;
        let a = self.o.forward(tape, store, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x, eps)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }

    fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.fc1, &mut self.fc2]
    }
}

/// Block stack with a final layer norm.
#[derive(Debug, Clone)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub causal: bool,
}

impl Stack {
    pub(crate) fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        layers: usize,
        d: usize,
        hidden: usize,
        causal: bool,
    ) -> Self {
        Self {
            blocks: (0..layers)
                .map(|i| Block::new(store, seed, &format!("{name}.block{i}"), d, hidden, layers))
                .collect(),
            ln_f: Norm::new(store, seed, &format!("{name}.ln_f"), d),
            causal,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mut x: Var,
        n_seq: usize,
        len: usize,
        heads: usize,
        eps: f64,
    ) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, store, x, n_seq, len, heads, self.causal, eps)?;
        }
        self.ln_f.forward(tape, store, x, eps)
    }

    pub(crate) fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.blocks.iter_mut().flat_map(|b| b.linears_mut())
    }
}
