//! Sentence heads applied on top of encoder token states: a multi-scale
//! convolution with max-over-time pooling, and a bidirectional GRU with
//! mean pooling over useful positions.
//!
//! Both heads see padding rows as zeros, so their outputs do not depend on
//! which ids sit in the padded positions.

use rand_chacha::ChaCha8Rng;

use crate::encoder::{linear, mean_useful, TokenStates};
use crate::params::{uniform, BoundParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnHeadConfig {
    pub kernel_sizes: Vec<usize>,
    pub feature_maps: usize,
}

impl CnnHeadConfig {
    pub fn output_dim(&self) -> usize {
        self.kernel_sizes.len() * self.feature_maps
    }

    pub fn validate(&self, seq_len: usize) -> std::result::Result<(), String> {
        if self.kernel_sizes.is_empty() {
            return Err("at least one kernel size is required".into());
        }
        if self.feature_maps == 0 {
            return Err("feature maps must be >= 1".into());
        }
        for (i, &k) in self.kernel_sizes.iter().enumerate() {
            if k == 0 || k > seq_len {
                return Err(format!("kernel size {k} must be in 1..={seq_len}"));
            }
            if self.kernel_sizes[..i].contains(&k) {
                return Err(format!("duplicate kernel size {k}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruHeadConfig {
    /// Hidden size of each direction.
    pub hidden: usize,
}

impl GruHeadConfig {
    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub fn init_cnn_params(store: &mut ParamStore, cfg: &CnnHeadConfig, dim: usize, rng: &mut ChaCha8Rng) {
    for &k in &cfg.kernel_sizes {
        let fan_in = k * dim;
        store.insert(
            format!("cnn.k{k}.weight"),
            uniform(rng, &[fan_in, cfg.feature_maps], fan_in_bound(fan_in)),
        );
        store.insert(format!("cnn.k{k}.bias"), Tensor::zeros(&[cfg.feature_maps]));
    }
}

pub const GRU_GATES: [&str; 3] = ["reset", "update", "candidate"];

pub fn init_gru_params(store: &mut ParamStore, cfg: &GruHeadConfig, dim: usize, rng: &mut ChaCha8Rng) {
    let fan_in = cfg.hidden + dim;
    for dir in ["forward", "backward"] {
        for gate in GRU_GATES {
            store.insert(
                format!("gru.{dir}.{gate}.weight"),
                uniform(rng, &[fan_in, cfg.hidden], fan_in_bound(fan_in)),
            );
            store.insert(format!("gru.{dir}.{gate}.bias"), Tensor::zeros(&[cfg.hidden]));
        }
    }
}

fn zero_padding(tape: &mut Tape, states: &TokenStates) -> Result<Var> {
    let w: Vec<f64> = states.mask.iter().map(|&m| f64::from(m)).collect();
    tape.scale_rows(states.states, &w)
}

/// Multi-scale convolution: for each kernel size, ReLU of every window's
/// linear response, max over positions, concatenated in kernel-size order.
pub fn cnn_head(tape: &mut Tape, cfg: &CnnHeadConfig, params: &BoundParams, states: &TokenStates) -> Result<Var> {
    let x = zero_padding(tape, states)?;
    let rows = tape.shape(x)[0];
    let mut pooled = Vec::with_capacity(cfg.kernel_sizes.len());
    for &k in &cfg.kernel_sizes {
        if k == 0 || k > rows {
            return Err(TensorError::Invalid {
                op: "cnn_head",
                reason: format!("kernel size {k} exceeds sequence length {rows}"),
            });
        }
        let positions = rows - k + 1;
        let windows = if k == 1 {
            x
        } else {
            let shifted = (0..k)
                .map(|o| tape.slice(x, 0, o, o + positions))
                .collect::<Result<Vec<_>>>()?;
            tape.concat(&shifted, 1)?
        };
        let response = linear(tape, params, &format!("cnn.k{k}"), windows)?;
        let activated = tape.relu(response)?;
        pooled.push(tape.max_rows(activated)?);
    }
    if pooled.len() == 1 {
        Ok(pooled[0])
    } else {
        tape.concat(&pooled, 0)
    }
}

/// One GRU scan over the rows of `x` (`L x d`), starting from a zero state.
///
/// Returns the hidden state after each step, indexed by row position (so for
/// a reverse scan element 0 is the state after consuming row 0, which is the
/// last step).
pub fn gru_scan(tape: &mut Tape, params: &BoundParams, prefix: &str, x: Var, hidden: usize, reverse: bool) -> Result<Vec<Var>> {
    let rows = tape.shape(x)[0];
    let w = |gate: &str| params.get(&format!("{prefix}.{gate}.weight"));
    let b = |gate: &str| params.get(&format!("{prefix}.{gate}.bias"));
    let (wr, br) = (w("reset")?, b("reset")?);
    let (wz, bz) = (w("update")?, b("update")?);
    let (wc, bc) = (w("candidate")?, b("candidate")?);

    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut out = vec![None; rows];
    let order: Vec<usize> = if reverse { (0..rows).rev().collect() } else { (0..rows).collect() };
    for t in order {
        let xt = tape.slice(x, 0, t, t + 1)?;
        let hx = tape.concat(&[h, xt], 1)?;
        let r = tape.matmul(hx, wr)?;
        let r = tape.add_bias(r, br)?;
        let r = tape.sigmoid(r)?;
        let z = tape.matmul(hx, wz)?;
        let z = tape.add_bias(z, bz)?;
        let z = tape.sigmoid(z)?;
        let rh = tape.mul(r, h)?;
        let rhx = tape.concat(&[rh, xt], 1)?;
        let cand = tape.matmul(rhx, wc)?;
        let cand = tape.add_bias(cand, bc)?;
        let cand = tape.tanh(cand)?;
        // h_t = (1 - z) * h_{t-1} + z * candidate
        let keep = tape.affine(z, -1.0, 1.0)?;
        let kept = tape.mul(keep, h)?;
        let fresh = tape.mul(z, cand)?;
        h = tape.add(kept, fresh)?;
        out[t] = Some(h);
    }
    Ok(out.into_iter().map(|v| v.expect("every position visited")).collect())
}

/// Forward and backward GRU outputs concatenated per position (`L x 2h`),
/// then averaged over useful positions.
pub fn bigru_head(tape: &mut Tape, cfg: &GruHeadConfig, params: &BoundParams, states: &TokenStates) -> Result<Var> {
    let x = zero_padding(tape, states)?;
    let fwd = gru_scan(tape, params, "gru.forward", x, cfg.hidden, false)?;
    let bwd = gru_scan(tape, params, "gru.backward", x, cfg.hidden, true)?;
    let fwd = tape.concat(&fwd, 0)?;
    let bwd = tape.concat(&bwd, 0)?;
    let per_position = tape.concat(&[fwd, bwd], 1)?;
    mean_useful(tape, per_position, &states.mask)
}
