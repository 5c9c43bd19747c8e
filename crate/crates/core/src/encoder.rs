//! Post-norm transformer encoder in siamese and crossed wiring, plus token pooling.
//!
//! In siamese mode each branch attends only to itself. In crossed mode the
//! queries of a branch come from its own previous-layer states while keys and
//! values are taken from both branches (own rows first, then the other
//! branch), under the combined padding mask. Both branches always use the
//! same parameters.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::params::{uniform, BoundParams, ParamStore};
use crate::tape::{Tape, Var, MASK_NEG};
use crate::tensor::{Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMode {
    Siamese,
    Crossed,
}

/// Which layers of a crossed encoder attend across branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossWiring {
    #[default]
    EveryLayer,
    LastLayer,
}

impl fmt::Display for CrossWiring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrossWiring::EveryLayer => "every",
            CrossWiring::LastLayer => "last",
        })
    }
}

impl FromStr for CrossWiring {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "every" => Ok(CrossWiring::EveryLayer),
            "last" => Ok(CrossWiring::LastLayer),
            _ => Err(format!("unknown cross wiring {s:?} (expected every|last)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub mode: EncoderMode,
    pub cross: CrossWiring,
}

impl EncoderConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.dim == 0 || self.ffn_dim == 0 {
            return Err("hidden and feed-forward dims must be positive".into());
        }
        if self.layers == 0 {
            return Err("layers must be >= 1".into());
        }
        if self.heads == 0 {
            return Err("heads must be >= 1".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(format!("hidden dim {} not divisible by {} heads", self.dim, self.heads));
        }
        Ok(())
    }

    fn crosses_at(&self, layer: usize) -> bool {
        self.mode == EncoderMode::Crossed
            && match self.cross {
                CrossWiring::EveryLayer => true,
                CrossWiring::LastLayer => layer + 1 == self.layers,
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    FirstToken,
    MeanToken,
    MeanUsefulToken,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::FirstToken => "first",
            Pooling::MeanToken => "mean",
            Pooling::MeanUsefulToken => "mean-useful",
        })
    }
}

impl FromStr for Pooling {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "first" => Ok(Pooling::FirstToken),
            "mean" => Ok(Pooling::MeanToken),
            "mean-useful" => Ok(Pooling::MeanUsefulToken),
            _ => Err(format!("unknown pooling {s:?} (expected first|mean|mean-useful)")),
        }
    }
}

/// Per-token contextual states of one branch, `L x d`.
#[derive(Debug, Clone)]
pub struct TokenStates {
    pub states: Var,
    pub mask: Vec<u8>,
}

fn layer_key(layer: usize, name: &str) -> String {
    format!("encoder.{layer}.{name}")
}

/// Adds embedding tables and encoder weights to `store`.
///
/// Attention and feed-forward weights are uniform in `[-1/sqrt(d), 1/sqrt(d)]`,
/// biases start at zero and layer-norm gains at one.
pub fn init_params(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    vocab_size: usize,
    seq_len: usize,
    rng: &mut ChaCha8Rng,
) {
    const EMBED_BOUND: f64 = 0.05;
    let d = cfg.dim;
    store.insert("embed.token", uniform(rng, &[vocab_size, d], EMBED_BOUND));
    store.insert("embed.segment", uniform(rng, &[2, d], EMBED_BOUND));
    store.insert("embed.position", uniform(rng, &[seq_len, d], EMBED_BOUND));
    let bound = 1.0 / (d as f64).sqrt();
    for l in 0..cfg.layers {
        for proj in ["query", "key", "value", "output"] {
            store.insert(layer_key(l, &format!("attn.{proj}.weight")), uniform(rng, &[d, d], bound));
            store.insert(layer_key(l, &format!("attn.{proj}.bias")), Tensor::zeros(&[d]));
        }
        store.insert(layer_key(l, "ffn.inner.weight"), uniform(rng, &[d, cfg.ffn_dim], bound));
        store.insert(layer_key(l, "ffn.inner.bias"), Tensor::zeros(&[cfg.ffn_dim]));
        store.insert(layer_key(l, "ffn.outer.weight"), uniform(rng, &[cfg.ffn_dim, d], bound));
        store.insert(layer_key(l, "ffn.outer.bias"), Tensor::zeros(&[d]));
        for norm in ["attn_norm", "ffn_norm"] {
            store.insert(layer_key(l, &format!("{norm}.gamma")), Tensor::full(&[d], 1.0));
            store.insert(layer_key(l, &format!("{norm}.beta")), Tensor::zeros(&[d]));
        }
    }
}

pub(crate) fn linear(tape: &mut Tape, params: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

struct Projections {
    query: Var,
    key: Var,
    value: Var,
}

fn project(tape: &mut Tape, params: &BoundParams, layer: usize, x: Var) -> Result<Projections> {
    Ok(Projections {
        query: linear(tape, params, &layer_key(layer, "attn.query"), x)?,
        key: linear(tape, params, &layer_key(layer, "attn.key"), x)?,
        value: linear(tape, params, &layer_key(layer, "attn.value"), x)?,
    })
}

/// Multi-head scaled dot-product attention; masked keys get [`MASK_NEG`].
fn attend(tape: &mut Tape, heads: usize, query: Var, keys: Var, values: Var, key_mask: &[u8]) -> Result<Var> {
    let (rows, d) = tape.value(query).dims2().expect("matrix");
    let key_rows = tape.shape(keys)[0];
    if key_mask.len() != key_rows {
        return Err(TensorError::Shape {
            op: "attention mask",
            left: vec![key_rows],
            right: vec![key_mask.len()],
        });
    }
    let head_dim = d / heads;
    let bias_row: Vec<f64> = key_mask.iter().map(|&m| if m == 1 { 0.0 } else { MASK_NEG }).collect();
    let bias = tape.constant(Tensor::new(vec![rows, key_rows], bias_row.repeat(rows))?);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice(query, 1, lo, hi)?;
        let kh = tape.slice(keys, 1, lo, hi)?;
        let vh = tape.slice(values, 1, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let scores = tape.add(scores, bias)?;
        let weights = tape.softmax_rows(scores)?;
        contexts.push(tape.matmul(weights, vh)?);
    }
    if contexts.len() == 1 {
        Ok(contexts[0])
    } else {
        tape.concat(&contexts, 1)
    }
}

/// Output projection, residual + norm, feed-forward, residual + norm.
fn finish_layer(tape: &mut Tape, params: &BoundParams, layer: usize, input: Var, context: Var) -> Result<Var> {
    let attn = linear(tape, params, &layer_key(layer, "attn.output"), context)?;
    let res = tape.add(input, attn)?;
    let x1 = layer_norm(tape, params, &layer_key(layer, "attn_norm"), res)?;
    let inner = linear(tape, params, &layer_key(layer, "ffn.inner"), x1)?;
    let inner = tape.gelu(inner)?;
    let outer = linear(tape, params, &layer_key(layer, "ffn.outer"), inner)?;
    let res = tape.add(x1, outer)?;
    layer_norm(tape, params, &layer_key(layer, "ffn_norm"), res)
}

fn layer_norm(tape: &mut Tape, params: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let gamma = params.get(&format!("{prefix}.gamma"))?;
    let beta = params.get(&format!("{prefix}.beta"))?;
    tape.layer_norm_rows(x, gamma, beta, LAYER_NORM_EPS)
}

fn check_input(tape: &Tape, cfg: &EncoderConfig, x: Var, mask: &[u8]) -> Result<()> {
    match tape.value(x).dims2() {
        Some((rows, d)) if d == cfg.dim && rows == mask.len() => Ok(()),
        _ => Err(TensorError::Shape {
            op: "encoder input",
            left: tape.shape(x).to_vec(),
            right: vec![mask.len(), cfg.dim],
        }),
    }
}

fn self_layer(tape: &mut Tape, cfg: &EncoderConfig, params: &BoundParams, layer: usize, x: Var, mask: &[u8]) -> Result<Var> {
    let p = project(tape, params, layer, x)?;
    let ctx = attend(tape, cfg.heads, p.query, p.key, p.value, mask)?;
    finish_layer(tape, params, layer, x, ctx)
}

/// Encodes one branch on its own (the siamese path).
pub fn encode_single(tape: &mut Tape, cfg: &EncoderConfig, params: &BoundParams, embedded: Var, mask: &[u8]) -> Result<TokenStates> {
    check_input(tape, cfg, embedded, mask)?;
    let mut h = embedded;
    for l in 0..cfg.layers {
        h = self_layer(tape, cfg, params, l, h, mask)?;
    }
    Ok(TokenStates {
        states: h,
        mask: mask.to_vec(),
    })
}

/// Both branches through the same weights, never attending to each other.
pub fn encode_siamese(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    params: &BoundParams,
    question: (Var, &[u8]),
    answer: (Var, &[u8]),
) -> Result<(TokenStates, TokenStates)> {
    let q = encode_single(tape, cfg, params, question.0, question.1)?;
    let a = encode_single(tape, cfg, params, answer.0, answer.1)?;
    Ok((q, a))
}

/// Both branches through the same weights, attending over the union of their tokens.
pub fn encode_crossed(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    params: &BoundParams,
    question: (Var, &[u8]),
    answer: (Var, &[u8]),
) -> Result<(TokenStates, TokenStates)> {
    check_input(tape, cfg, question.0, question.1)?;
    check_input(tape, cfg, answer.0, answer.1)?;
    let (qm, am) = (question.1, answer.1);
    let q_mask: Vec<u8> = qm.iter().chain(am).copied().collect();
    let a_mask: Vec<u8> = am.iter().chain(qm).copied().collect();
    let (mut hq, mut ha) = (question.0, answer.0);
    for l in 0..cfg.layers {
        if !cfg.crosses_at(l) {
            hq = self_layer(tape, cfg, params, l, hq, qm)?;
            ha = self_layer(tape, cfg, params, l, ha, am)?;
            continue;
        }
        let pq = project(tape, params, l, hq)?;
        let pa = project(tape, params, l, ha)?;
        let q_keys = tape.concat(&[pq.key, pa.key], 0)?;
        let q_values = tape.concat(&[pq.value, pa.value], 0)?;
        let a_keys = tape.concat(&[pa.key, pq.key], 0)?;
        let a_values = tape.concat(&[pa.value, pq.value], 0)?;
        let q_ctx = attend(tape, cfg.heads, pq.query, q_keys, q_values, &q_mask)?;
        let a_ctx = attend(tape, cfg.heads, pa.query, a_keys, a_values, &a_mask)?;
        let next_q = finish_layer(tape, params, l, hq, q_ctx)?;
        let next_a = finish_layer(tape, params, l, ha, a_ctx)?;
        hq = next_q;
        ha = next_a;
    }
    Ok((
        TokenStates {
            states: hq,
            mask: qm.to_vec(),
        },
        TokenStates {
            states: ha,
            mask: am.to_vec(),
        },
    ))
}

/// Averages the rows of `x` with the given weights, returning a length-`d` vector.
pub(crate) fn weighted_rows(tape: &mut Tape, x: Var, weights: Vec<f64>) -> Result<Var> {
    let d = tape.shape(x)[1];
    let w = tape.constant(Tensor::new(vec![1, weights.len()], weights)?);
    let pooled = tape.matmul(w, x)?;
    tape.reshape(pooled, &[d])
}

/// Mean over rows whose mask is 1.
pub(crate) fn mean_useful(tape: &mut Tape, x: Var, mask: &[u8]) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m == 1).count();
    if count == 0 {
        return Err(TensorError::Invalid {
            op: "pool",
            reason: "mask has no useful positions".into(),
        });
    }
    let w = mask.iter().map(|&m| if m == 1 { 1.0 / count as f64 } else { 0.0 }).collect();
    weighted_rows(tape, x, w)
}

/// Reduces token states to one sentence vector.
pub fn pool(tape: &mut Tape, states: &TokenStates, strategy: Pooling) -> Result<Var> {
    let (rows, d) = tape.value(states.states).dims2().expect("token states are a matrix");
    if rows != states.mask.len() {
        return Err(TensorError::Shape {
            op: "pool",
            left: vec![rows, d],
            right: vec![states.mask.len()],
        });
    }
    match strategy {
        Pooling::FirstToken => {
            let first = tape.slice(states.states, 0, 0, 1)?;
            tape.reshape(first, &[d])
        }
        Pooling::MeanToken => weighted_rows(tape, states.states, vec![1.0 / rows as f64; rows]),
        Pooling::MeanUsefulToken => mean_useful(tape, states.states, &states.mask),
    }
}
