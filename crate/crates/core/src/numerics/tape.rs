//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in execution order, which is already a topological
//! order, so the backward pass is a single reverse sweep. Sequence tensors use a
//! packed layout: `n_seq` sequences of `len` rows each, stacked into an
//! `[n_seq * len, width]` matrix.

use std::collections::HashMap;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: receives the input values and the
/// gradient of the output, returns one gradient buffer per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &[f64]) -> Vec<Vec<f64>> + Send>;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddPositions {
        x: Var,
        pos: Var,
        n_seq: usize,
        len: usize,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_seq: usize,
        len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatSeq {
        parts: Vec<(Var, usize)>,
        n_seq: usize,
    },
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    SeqMix {
        w: Var,
        x: Var,
        n_seq: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    InfoNce {
        q: Var,
        c: Var,
        tau: f64,
        probs: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: Var,
        probs: Vec<f64>,
        log_probs: Vec<f64>,
    },
    RowCrossEntropy {
        e: Var,
        e_prime: Var,
        temp: f64,
        p: Vec<f64>,
        log_q: Vec<f64>,
        stop_grad: bool,
    },
    RowMse {
        e: Var,
        e_prime: Var,
        stop_grad: bool,
    },
    RowCosineDistance {
        e: Var,
        e_prime: Var,
        stop_grad: bool,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for a single forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter key, gradient)` for every parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(key, v)| self.wrt(v).map(|g| (key, g)))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + total.ln()
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn slot_for(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Tape {
    /// Tape that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            recording: true,
        }
    }

    /// Forward-only tape: values are computed but nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|&v| self.needs(v));
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient (when recording).
    pub fn input(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a model parameter once per tape; later calls with the same
    /// key return the cached handle so gradients from every use accumulate.
    pub fn param(&mut self, key: usize, value: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let requires_grad = self.recording && trainable;
        self.nodes.push(Node {
            value: value.clone(),
            op: if requires_grad { Op::Param } else { Op::Leaf },
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    /// Makes later [`Tape::param`] calls with `key` return `v`.
    pub fn bind_param(&mut self, key: usize, v: Var) {
        self.params.insert(key, v);
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension {
                op,
                left: other.to_vec(),
                right: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.data(a), self.data(b), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(Error::Dimension {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Adds rows `0..len` of a position table to every packed sequence.
    pub fn add_positions(&mut self, x: Var, pos: Var, n_seq: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "add_positions")?;
        let (pos_rows, pos_cols) = self.mat_dims(pos, "add_positions")?;
        if rows != n_seq * len || pos_cols != cols || pos_rows < len {
            return Err(Error::Dimension {
                op: "add_positions",
                left: vec![rows, cols],
                right: vec![pos_rows, pos_cols],
            });
        }
        let p = self.data(pos);
        let mut data = self.data(x).to_vec();
        for s in 0..n_seq {
            for t in 0..len {
                let row = &mut data[(s * len + t) * cols..(s * len + t + 1) * cols];
                for (v, pv) in row.iter_mut().zip(&p[t * cols..(t + 1) * cols]) {
                    *v += pv;
                }
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::AddPositions { x, pos, n_seq, len }, &[x, pos]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        self.push(value, Op::Tanh(x), &[x])
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = self.value(x).rows();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.data(x).chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Gathers rows of an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, cols) = self.mat_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for table of {vocab} rows"
            )));
        }
        let t = self.data(table);
        let data = ids
            .iter()
            .flat_map(|&id| t[id * cols..(id + 1) * cols].iter().copied())
            .collect();
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_seq: usize,
        len: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (rows, d) = self.mat_dims(q, "attention")?;
        if rows != n_seq * len || heads == 0 || d % heads != 0 {
            return Err(Error::Dimension {
                op: "attention",
                left: vec![rows, d],
                right: vec![n_seq, len, heads],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; n_seq * heads * len * len];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; len];
        for s in 0..n_seq {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &qd[(s * len + i) * d + off..(s * len + i) * d + off + dh];
                    let visible = if causal { i + 1 } else { len };
                    for (j, sc) in scores[..visible].iter_mut().enumerate() {
                        let kj = &kd[(s * len + j) * d + off..(s * len + j) * d + off + dh];
                        *sc = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut scores[..visible]);
                    let p_row = &mut probs[((s * heads + h) * len + i) * len..][..len];
                    p_row[..visible].copy_from_slice(&scores[..visible]);
                    let o = &mut out[(s * len + i) * d + off..(s * len + i) * d + off + dh];
                    for (j, &p) in scores[..visible].iter().enumerate() {
                        let vj = &vd[(s * len + j) * d + off..(s * len + j) * d + off + dh];
                        for (ov, vv) in o.iter_mut().zip(vj) {
                            *ov += p * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                n_seq,
                len,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Concatenates packed sequences along the sequence axis: each output
    /// sequence is the matching sequence of every part, in part order.
    pub fn concat_seq(&mut self, parts: &[(Var, usize)], n_seq: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_seq with no parts"))?;
        let cols = self.value(first.0).cols();
        for &(p, len) in parts {
            let (rows, c) = self.mat_dims(p, "concat_seq")?;
            if c != cols || rows != n_seq * len {
                return Err(Error::Dimension {
                    op: "concat_seq",
                    left: vec![rows, c],
                    right: vec![n_seq * len, cols],
                });
            }
        }
        let total: usize = parts.iter().map(|&(_, l)| l).sum();
        let mut data = Vec::with_capacity(n_seq * total * cols);
        for s in 0..n_seq {
            for &(p, len) in parts {
                data.extend_from_slice(&self.data(p)[s * len * cols..(s + 1) * len * cols]);
            }
        }
        let value = Tensor::new(vec![n_seq * total, cols], data)?;
        let inputs: Vec<Var> = parts.iter().map(|&(p, _)| p).collect();
        Ok(self.push(
            value,
            Op::ConcatSeq {
                parts: parts.to_vec(),
                n_seq,
            },
            &inputs,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows with no parts"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: vec![r, c],
                    right: vec![r, cols],
                });
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "select_rows")?;
        if idx.is_empty() {
            return Err(Error::contract("select_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "row {bad} out of range for {rows} rows"
            )));
        }
        let xd = self.data(x);
        let data = idx
            .iter()
            .flat_map(|&i| xd[i * cols..(i + 1) * cols].iter().copied())
            .collect();
        let value = Tensor::new(vec![idx.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Mixes positions within each packed sequence: `out_s = w · x_s` for
    /// `w: [out_len, in_len]`.
    pub fn seq_mix(&mut self, w: Var, x: Var, n_seq: usize) -> Result<Var> {
        let (out_len, in_len) = self.mat_dims(w, "seq_mix")?;
        let (rows, cols) = self.mat_dims(x, "seq_mix")?;
        if rows != n_seq * in_len {
            return Err(Error::Dimension {
                op: "seq_mix",
                left: vec![out_len, in_len],
                right: vec![rows, cols],
            });
        }
        let mut data = vec![0.0; n_seq * out_len * cols];
        for s in 0..n_seq {
            gemm_nn(
                out_len,
                in_len,
                cols,
                self.data(w),
                &self.data(x)[s * in_len * cols..(s + 1) * in_len * cols],
                &mut data[s * out_len * cols..(s + 1) * out_len * cols],
            );
        }
        let value = Tensor::new(vec![n_seq * out_len, cols], data)?;
        Ok(self.push(value, Op::SeqMix { w, x, n_seq }, &[w, x]))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(self.value(x).numel());
        for (i, row) in self.data(x).chunks(cols).enumerate() {
            let n = dot(row, row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {n}, cannot normalize"
                )));
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::L2Normalize { x, norms }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Mean in-batch InfoNCE over unit-norm rows; row `i` of `c` is the
    /// positive for row `i` of `q`.
    pub fn info_nce(&mut self, q: Var, c: Var, tau: f64) -> Result<Var> {
        self.same_shape(q, c, "info_nce")?;
        if !(tau > 0.0) {
            return Err(Error::contract(format!("temperature must be > 0, got {tau}")));
        }
        let (b, d) = self.mat_dims(q, "info_nce")?;
        for (name, v) in [("query", q), ("target", c)] {
            for (i, row) in self.data(v).chunks(d).enumerate() {
                let n = dot(row, row).sqrt();
                if (n - 1.0).abs() > 1e-3 {
                    return Err(Error::contract(format!(
                        "{name} row {i} has norm {n}, expected unit norm"
                    )));
                }
            }
        }
        let mut logits = vec![0.0; b * b];
        gemm_nt(b, d, b, self.data(q), self.data(c), &mut logits);
        for v in logits.iter_mut() {
            *v /= tau;
        }
        let mut total = 0.0;
        for i in 0..b {
            let row = &logits[i * b..(i + 1) * b];
            total += log_sum_exp(row) - row[i];
        }
        let loss = total / b as f64;
        let mut probs = logits;
        for row in probs.chunks_mut(b) {
            softmax_in_place(row);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::InfoNce { q, c, tau, probs },
            &[q, c],
        ))
    }

    /// `−Σ target[i] · log softmax(logits)[i]` for vectors.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.same_shape(logits, target, "softmax_cross_entropy")?;
        let t = self.data(target);
        if t.iter().any(|&v| v < 0.0) {
            return Err(Error::contract("target distribution has negative entries"));
        }
        let mass: f64 = t.iter().sum();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "target distribution sums to {mass}, expected 1"
            )));
        }
        let z = self.data(logits);
        let lse = log_sum_exp(z);
        let log_probs: Vec<f64> = z.iter().map(|v| v - lse).collect();
        let h = -t.iter().zip(&log_probs).map(|(a, b)| a * b).sum::<f64>();
        let probs = log_probs.iter().map(|v| v.exp()).collect();
        Ok(self.push(
            Tensor::scalar(h),
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
                log_probs,
            },
            &[logits, target],
        ))
    }

    /// `Σ_rows H(softmax(e/temp), softmax(e′/temp))`.
    pub fn row_cross_entropy(
        &mut self,
        e: Var,
        e_prime: Var,
        temp: f64,
        stop_grad: bool,
    ) -> Result<Var> {
        self.same_shape(e, e_prime, "row_cross_entropy")?;
        if !(temp > 0.0) {
            return Err(Error::contract(format!("temperature must be > 0, got {temp}")));
        }
        let cols = self.value(e).cols();
        let mut p: Vec<f64> = self.data(e).iter().map(|v| v / temp).collect();
        for row in p.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let mut log_q: Vec<f64> = self.data(e_prime).iter().map(|v| v / temp).collect();
        for row in log_q.chunks_mut(cols) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let h = -p.iter().zip(&log_q).map(|(a, b)| a * b).sum::<f64>();
        let inputs: &[Var] = if stop_grad { &[e_prime] } else { &[e, e_prime] };
        Ok(self.push(
            Tensor::scalar(h),
            Op::RowCrossEntropy {
                e,
                e_prime,
                temp,
                p,
                log_q,
                stop_grad,
            },
            inputs,
        ))
    }

    /// `Σ_rows mean_k (e_k − e′_k)²`.
    pub fn row_mse(&mut self, e: Var, e_prime: Var, stop_grad: bool) -> Result<Var> {
        self.same_shape(e, e_prime, "row_mse")?;
        let cols = self.value(e).cols() as f64;
        let total = self
            .data(e)
            .iter()
            .zip(self.data(e_prime))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / cols;
        let inputs: &[Var] = if stop_grad { &[e_prime] } else { &[e, e_prime] };
        Ok(self.push(
            Tensor::scalar(total),
            Op::RowMse {
                e,
                e_prime,
                stop_grad,
            },
            inputs,
        ))
    }

    /// `Σ_rows (1 − cos(e, e′))`.
    pub fn row_cosine_distance(&mut self, e: Var, e_prime: Var, stop_grad: bool) -> Result<Var> {
        self.same_shape(e, e_prime, "row_cosine_distance")?;
        let cols = self.value(e).cols();
        let mut total = 0.0;
        for (a, b) in self.data(e).chunks(cols).zip(self.data(e_prime).chunks(cols)) {
            let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Degenerate("zero-norm row in cosine distance".into()));
            }
            total += 1.0 - dot(a, b) / (na * nb);
        }
        let inputs: &[Var] = if stop_grad { &[e_prime] } else { &[e, e_prime] };
        Ok(self.push(
            Tensor::scalar(total),
            Op::RowCosineDistance {
                e,
                e_prime,
                stop_grad,
            },
            inputs,
        ))
    }

    /// Records an externally computed value with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        self.backward_with_seed(out, vec![1.0])
    }

    /// Backpropagates `seed` as the gradient of `out`.
    pub fn backward_with_seed(&self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::Dimension {
                op: "backward",
                left: self.shape(out).to_vec(),
                right: vec![seed.len()],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<(usize, Var)> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort_unstable();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if need(*a) {
                    let ga = slot_for(&mut grads[a.0], m * k);
                    gemm_nt(m, n, k, g, self.data(*b), ga);
                }
                if need(*b) {
                    let gb = slot_for(&mut grads[b.0], k * n);
                    gemm_tn(k, m, n, self.data(*a), g, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if need(*a) {
                    let ga = slot_for(&mut grads[a.0], m * k);
                    gemm_nn(m, n, k, g, self.data(*b), ga);
                }
                if need(*b) {
                    let gb = slot_for(&mut grads[b.0], n * k);
                    gemm_tn(n, m, k, g, self.data(*a), gb);
                }
            }
            Op::Add(a, b) => {
                if need(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if need(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::AddRow(x, bias) => {
                if need(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if need(*bias) {
                    let cols = self.value(*bias).numel();
                    let gb = slot_for(&mut grads[bias.0], cols);
                    for row in g.chunks(cols) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
            }
            Op::AddPositions { x, pos, n_seq, len } => {
                if need(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if need(*pos) {
                    let cols = self.value(*pos).cols();
                    let gp = slot_for(&mut grads[pos.0], self.value(*pos).numel());
                    for s in 0..*n_seq {
                        for t in 0..*len {
                            let src = &g[(s * len + t) * cols..(s * len + t + 1) * cols];
                            for (a, b) in gp[t * cols..(t + 1) * cols].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let d: Vec<f64> = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if need(*b) {
                    let d: Vec<f64> = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::Scale(x, f) => {
                let d: Vec<f64> = g.iter().map(|v| v * f).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Gelu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gv, &v)| {
                        let u = GELU_C * (v + GELU_K * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Tanh(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gamma).numel();
                if need(*gamma) {
                    let gg = slot_for(&mut grads[gamma.0], cols);
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if need(*beta) {
                    let gb = slot_for(&mut grads[beta.0], cols);
                    for grow in g.chunks(cols) {
                        for (a, b) in gb.iter_mut().zip(grow) {
                            *a += b;
                        }
                    }
                }
                if need(*x) {
                    let gam = self.data(*gamma);
                    let mut dx = Vec::with_capacity(g.len());
                    let n = cols as f64;
                    for ((grow, hrow), r) in g.chunks(cols).zip(xhat.chunks(cols)).zip(rstd) {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..cols {
                            let dh = grow[j] * gam[j];
                            mean_d += dh;
                            mean_dh += dh * hrow[j];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        for j in 0..cols {
                            let dh = grow[j] * gam[j];
                            dx.push(r * (dh - mean_d - hrow[j] * mean_dh));
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Embedding { table, ids } => {
                let cols = self.value(*table).cols();
                let gt = slot_for(&mut grads[table.0], self.value(*table).numel());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        gt[id * cols + j] += g[r * cols + j];
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_seq,
                len,
                heads,
                probs,
            } => {
                let (n_seq, len, heads) = (*n_seq, *len, *heads);
                let d = self.value(*q).cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; len];
                for s in 0..n_seq {
                    for h in 0..heads {
                        let off = h * dh;
                        let row_at = |t: usize| (s * len + t) * d + off;
                        for i in 0..len {
                            let p_row = &probs[((s * heads + h) * len + i) * len..][..len];
                            let go = &g[row_at(i)..row_at(i) + dh];
                            let mut weighted = 0.0;
                            for j in 0..len {
                                if p_row[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vd[row_at(j)..row_at(j) + dh];
                                dp[j] = dot(go, vj);
                                weighted += p_row[j] * dp[j];
                                for (a, b) in dv[row_at(j)..row_at(j) + dh].iter_mut().zip(go) {
                                    *a += p_row[j] * b;
                                }
                            }
                            for j in 0..len {
                                if p_row[j] == 0.0 {
                                    continue;
                                }
                                let ds = p_row[j] * (dp[j] - weighted) * scale;
                                let (qi, kj) = (row_at(i), row_at(j));
                                for t in 0..dh {
                                    dq[qi + t] += ds * kd[kj + t];
                                    dk[kj + t] += ds * qd[qi + t];
                                }
                            }
                        }
                    }
                }
                if need(*q) {
                    accumulate(&mut grads[q.0], &dq);
                }
                if need(*k) {
                    accumulate(&mut grads[k.0], &dk);
                }
                if need(*v) {
                    accumulate(&mut grads[v.0], &dv);
                }
            }
            Op::ConcatSeq { parts, n_seq } => {
                let cols = node.value.cols();
                let total: usize = parts.iter().map(|&(_, l)| l).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if need(p) {
                        let gp = slot_for(&mut grads[p.0], n_seq * len * cols);
                        for s in 0..*n_seq {
                            let src = &g[(s * total + offset) * cols..(s * total + offset + len) * cols];
                            for (a, b) in gp[s * len * cols..(s + 1) * len * cols].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if need(p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SelectRows { x, idx } => {
                let cols = self.value(*x).cols();
                let gx = slot_for(&mut grads[x.0], self.value(*x).numel());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        gx[i * cols + j] += g[r * cols + j];
                    }
                }
            }
            Op::SeqMix { w, x, n_seq } => {
                let (out_len, in_len) = (self.value(*w).rows(), self.value(*w).cols());
                let cols = self.value(*x).cols();
                if need(*w) {
                    let gw = slot_for(&mut grads[w.0], out_len * in_len);
                    for s in 0..*n_seq {
                        gemm_nt(
                            out_len,
                            cols,
                            in_len,
                            &g[s * out_len * cols..(s + 1) * out_len * cols],
                            &self.data(*x)[s * in_len * cols..(s + 1) * in_len * cols],
                            gw,
                        );
                    }
                }
                if need(*x) {
                    let gx = slot_for(&mut grads[x.0], n_seq * in_len * cols);
                    for s in 0..*n_seq {
                        gemm_tn(
                            in_len,
                            out_len,
                            cols,
                            self.data(*w),
                            &g[s * out_len * cols..(s + 1) * out_len * cols],
                            &mut gx[s * in_len * cols..(s + 1) * in_len * cols],
                        );
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let cols = self.value(*x).cols();
                let y = node.value.data();
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, yrow), n) in g.chunks(cols).zip(y.chunks(cols)).zip(norms) {
                    let proj = dot(grow, yrow);
                    dx.extend(grow.iter().zip(yrow).map(|(gv, yv)| (gv - yv * proj) / n));
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).numel()];
                accumulate(&mut grads[x.0], &d);
            }
            Op::InfoNce { q, c, tau, probs } => {
                let (b, d) = (self.value(*q).rows(), self.value(*q).cols());
                let mut ds = probs.clone();
                for i in 0..b {
                    ds[i * b + i] -= 1.0;
                }
                let f = g[0] / (b as f64 * tau);
                ds.iter_mut().for_each(|v| *v *= f);
                if need(*q) {
                    let gq = slot_for(&mut grads[q.0], b * d);
                    gemm_nn(b, b, d, &ds, self.data(*c), gq);
                }
                if need(*c) {
                    let gc = slot_for(&mut grads[c.0], b * d);
                    gemm_tn(b, b, d, &ds, self.data(*q), gc);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
                log_probs,
            } => {
                if need(*logits) {
                    let mass: f64 = self.data(*target).iter().sum();
                    let d: Vec<f64> = probs
                        .iter()
                        .zip(self.data(*target))
                        .map(|(p, t)| g[0] * (p * mass - t))
                        .collect();
                    accumulate(&mut grads[logits.0], &d);
                }
                if need(*target) {
                    let d: Vec<f64> = log_probs.iter().map(|lp| -g[0] * lp).collect();
                    accumulate(&mut grads[target.0], &d);
                }
            }
            Op::RowCrossEntropy {
                e,
                e_prime,
                temp,
                p,
                log_q,
                stop_grad,
            } => {
                let cols = self.value(*e).cols();
                let f = g[0] / temp;
                if need(*e_prime) {
                    let d: Vec<f64> = p
                        .chunks(cols)
                        .zip(log_q.chunks(cols))
                        .flat_map(|(pr, lq)| {
                            let mass: f64 = pr.iter().sum();
                            pr.iter()
                                .zip(lq)
                                .map(move |(pv, lqv)| f * (lqv.exp() * mass - pv))
                                .collect::<Vec<_>>()
                        })
                        .collect();
                    accumulate(&mut grads[e_prime.0], &d);
                }
                if !stop_grad && need(*e) {
                    let d: Vec<f64> = p
                        .chunks(cols)
                        .zip(log_q.chunks(cols))
                        .flat_map(|(pr, lq)| {
                            // dH/dp_k = −log q_k, pushed through the softmax Jacobian.
                            let mean: f64 = pr.iter().zip(lq).map(|(pv, l)| -pv * l).sum();
                            pr.iter()
                                .zip(lq)
                                .map(move |(pv, l)| f * pv * (-l - mean))
                                .collect::<Vec<_>>()
                        })
                        .collect();
                    accumulate(&mut grads[e.0], &d);
                }
            }
            Op::RowMse {
                e,
                e_prime,
                stop_grad,
            } => {
                let cols = self.value(*e).cols() as f64;
                let diff: Vec<f64> = self
                    .data(*e)
                    .iter()
                    .zip(self.data(*e_prime))
                    .map(|(a, b)| 2.0 * g[0] * (a - b) / cols)
                    .collect();
                if !stop_grad && need(*e) {
                    accumulate(&mut grads[e.0], &diff);
                }
                if need(*e_prime) {
                    let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                    accumulate(&mut grads[e_prime.0], &neg);
                }
            }
            Op::RowCosineDistance {
                e,
                e_prime,
                stop_grad,
            } => {
                let cols = self.value(*e).cols();
                let mut de = Vec::with_capacity(g.len());
                let mut dep = Vec::with_capacity(g.len());
                for (a, b) in self
                    .data(*e)
                    .chunks(cols)
                    .zip(self.data(*e_prime).chunks(cols))
                {
                    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
                    let cos = dot(a, b) / (na * nb);
                    for j in 0..cols {
                        de.push(-g[0] * (b[j] / (na * nb) - cos * a[j] / (na * na)));
                        dep.push(-g[0] * (a[j] / (na * nb) - cos * b[j] / (nb * nb)));
                    }
                }
                if !stop_grad && need(*e) {
                    accumulate(&mut grads[e.0], &de);
                }
                if need(*e_prime) {
                    accumulate(&mut grads[e_prime.0], &dep);
                }
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let deltas = backward(&values, g);
                for (&v, d) in inputs.iter().zip(deltas) {
                    if need(v) {
                        accumulate(&mut grads[v.0], &d);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_subexpression_accumulates() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.5, -2.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::inference();
        let i = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(vec![2, 3]));
        let b = tape.input(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn param_is_registered_once() {
        let mut tape = Tape::new();
        let w = Tensor::vector(vec![1.0, 2.0]);
        let a = tape.param(7, &w, true);
        let b = tape.param(7, &w, true);
        assert_eq!(a, b);
        let m = tape.mul(a, b).unwrap();
        let s = tape.sum(m);
        let grads = tape.backward(s).unwrap();
        let got: Vec<_> = grads.params().collect();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].1, &[2.0, 4.0]);
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(0, &Tensor::vector(vec![1.0]), false);
        let x = tape.input(Tensor::vector(vec![3.0]));
        let y = tape.mul(w, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.wrt(w).is_none());
        assert_eq!(grads.wrt(x).unwrap(), &[1.0]);
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::inference();
        let x = tape.input(Tensor::vector(vec![1.0]));
        let y = tape.scale(x, 2.0);
        let grads = tape.backward(y).unwrap();
        assert!(grads.wrt(x).is_none());
    }

    #[test]
    fn info_nce_single_pair_is_exactly_zero() {
        let mut tape = Tape::new();
        let q = tape.input(Tensor::matrix(1, 3, vec![0.6, 0.8, 0.0]).unwrap());
        let c = tape.input(Tensor::matrix(1, 3, vec![0.0, 0.0, 1.0]).unwrap());
        let l = tape.info_nce(q, c, 0.02).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn info_nce_rejects_non_unit_rows() {
        let mut tape = Tape::new();
        let q = tape.input(Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap());
        let c = tape.input(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.info_nce(q, c, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_cross_entropy_cases() {
        let mut tape = Tape::inference();
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let t = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let h = tape.softmax_cross_entropy(z, t).unwrap();
        assert!((tape.value(h).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let z = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let t = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let h = tape.softmax_cross_entropy(z, t).unwrap();
        let v = tape.value(h).item();
        assert!(v.is_finite() && v.abs() < 1e-12, "{v}");

        let t = tape.constant(Tensor::vector(vec![0.7, 0.7]));
        assert!(matches!(
            tape.softmax_cross_entropy(z, t),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(matches!(tape.l2_normalize(x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn concat_seq_interleaves_sequences() {
        let mut tape = Tape::inference();
        let a = tape.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(4, 1, vec![10.0, 11.0, 20.0, 21.0]).unwrap());
        let c = tape.concat_seq(&[(a, 1), (b, 2)], 2).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 10.0, 11.0, 2.0, 20.0, 21.0]);
    }

    #[test]
    fn causal_attention_first_row_sees_only_itself() {
        let mut tape = Tape::inference();
        let q = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let o = tape.attention(q, q, v, 1, 2, 1, true).unwrap();
        assert_eq!(&tape.value(o).data()[..2], &[5.0, 6.0]);
    }
}
