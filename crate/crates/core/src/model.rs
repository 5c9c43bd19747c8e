//! The four matching architectures, cosine similarity and the margin objective.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, EncoderConfig, EncoderMode, Pooling, TokenStates};
use crate::error::{Error, Result};
use crate::heads::{self, CnnHeadConfig, GruHeadConfig};
use crate::params::{BoundParams, ParamStore};
use crate::tape::{cosine_raw, Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::text::{embed, EmbeddingVars, EncodedSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    SiameseBert,
    CrossedBert,
    CrossedBertMultiScaleCnn,
    CrossedBertBiGru,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::SiameseBert,
        Variant::CrossedBert,
        Variant::CrossedBertMultiScaleCnn,
        Variant::CrossedBertBiGru,
    ];

    pub fn encoder_mode(self) -> EncoderMode {
        match self {
            Variant::SiameseBert => EncoderMode::Siamese,
            _ => EncoderMode::Crossed,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::SiameseBert => "siamese-bert",
            Variant::CrossedBert => "crossed-bert",
            Variant::CrossedBertMultiScaleCnn => "crossed-cnn",
            Variant::CrossedBertBiGru => "crossed-bigru",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| format!("unknown architecture {s:?} (expected siamese-bert|crossed-bert|crossed-cnn|crossed-bigru)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    /// Sentence pooling for the variants without a head.
    pub pooling: Pooling,
    pub cnn: Option<CnnHeadConfig>,
    pub gru: Option<GruHeadConfig>,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Give answer tokens segment id 1 instead of 0.
    pub branch_segments: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.encoder.validate().map_err(Error::Config)?;
        if self.encoder.mode != self.variant.encoder_mode() {
            return bad(format!("{} needs a {:?} encoder", self.variant, self.variant.encoder_mode()));
        }
        if self.seq_len < crate::text::MIN_SEQ_LEN {
            return bad(format!("sequence length {} is below 3", self.seq_len));
        }
        if self.vocab_size <= crate::text::SEP {
            return bad(format!("vocabulary size {} leaves no room for characters", self.vocab_size));
        }
        match (self.variant, &self.cnn, &self.gru) {
            (Variant::CrossedBertMultiScaleCnn, Some(cnn), _) => cnn.validate(self.seq_len).map_err(Error::Config)?,
            (Variant::CrossedBertMultiScaleCnn, None, _) => return bad("crossed-cnn needs a CNN head config".into()),
            (Variant::CrossedBertBiGru, _, Some(gru)) if gru.hidden == 0 => {
                return bad("GRU hidden size must be >= 1".into())
            }
            (Variant::CrossedBertBiGru, _, None) => return bad("crossed-bigru needs a GRU head config".into()),
            _ => {}
        }
        Ok(())
    }

    /// Dimension of the sentence vectors compared by cosine.
    pub fn output_dim(&self) -> usize {
        match self.variant {
            Variant::SiameseBert | Variant::CrossedBert => self.encoder.dim,
            Variant::CrossedBertMultiScaleCnn => self.cnn.as_ref().map_or(0, CnnHeadConfig::output_dim),
            Variant::CrossedBertBiGru => self.gru.as_ref().map_or(0, GruHeadConfig::output_dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin > 0.0 && self.margin <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("margin {} must be in (0, 1]", self.margin)))
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: 0.1 }
    }
}

/// Question and answer sentence vectors on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PooledPair {
    pub q: Var,
    pub a: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Randomly initialized model; all draws come from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = fresh_params(&config, seed);
        Ok(Self { config, params })
    }

    /// Reassembles a model, checking that `params` has exactly the expected names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = fresh_params(&config, 0);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    fn check_seq(&self, seq: &EncodedSequence) -> Result<()> {
        if seq.len() != self.config.seq_len {
            return Err(Error::Input(format!(
                "sequence of length {} given to a model with length {}",
                seq.len(),
                self.config.seq_len
            )));
        }
        Ok(())
    }

    fn embed_branch(&self, tape: &mut Tape, params: &BoundParams, seq: &EncodedSequence, segment: usize) -> Result<Var> {
        self.check_seq(seq)?;
        let vars = EmbeddingVars {
            token: params.get("embed.token")?,
            segment: params.get("embed.segment")?,
            position: params.get("embed.position")?,
        };
        let seq = seq.clone().with_segment(segment);
        Ok(embed(tape, &seq, &vars)?)
    }

    fn answer_segment(&self) -> usize {
        usize::from(self.config.branch_segments)
    }

    fn head(&self, tape: &mut Tape, params: &BoundParams, states: &TokenStates) -> Result<Var> {
        let c = &self.config;
        let out = match c.variant {
            Variant::SiameseBert | Variant::CrossedBert => encoder::pool(tape, states, c.pooling)?,
            Variant::CrossedBertMultiScaleCnn => {
                heads::cnn_head(tape, c.cnn.as_ref().expect("validated"), params, states)?
            }
            Variant::CrossedBertBiGru => heads::bigru_head(tape, c.gru.as_ref().expect("validated"), params, states)?,
        };
        Ok(out)
    }

    /// Sentence vector of one branch for the siamese variant.
    fn siamese_branch(&self, tape: &mut Tape, params: &BoundParams, seq: &EncodedSequence, segment: usize) -> Result<Var> {
        let e = self.embed_branch(tape, params, seq, segment)?;
        let states = encoder::encode_single(tape, &self.config.encoder, params, e, &seq.useful_mask)?;
        self.head(tape, params, &states)
    }

    pub fn forward_pair(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        q: &EncodedSequence,
        a: &EncodedSequence,
    ) -> Result<PooledPair> {
        if self.config.variant == Variant::SiameseBert {
            let qv = self.siamese_branch(tape, params, q, 0)?;
            let av = self.siamese_branch(tape, params, a, self.answer_segment())?;
            return Ok(PooledPair { q: qv, a: av });
        }
        let eq = self.embed_branch(tape, params, q, 0)?;
        let ea = self.embed_branch(tape, params, a, self.answer_segment())?;
        let (sq, sa) = encoder::encode_crossed(
            tape,
            &self.config.encoder,
            params,
            (eq, &q.useful_mask),
            (ea, &a.useful_mask),
        )?;
        Ok(PooledPair {
            q: self.head(tape, params, &sq)?,
            a: self.head(tape, params, &sa)?,
        })
    }

    /// Question and answer vectors without recording gradients.
    pub fn represent_pair(&self, q: &EncodedSequence, a: &EncodedSequence) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let pair = self.forward_pair(&mut tape, &params, q, a)?;
        Ok((tape.value(pair.q).clone(), tape.value(pair.a).clone()))
    }

    pub fn score(&self, q: &EncodedSequence, a: &EncodedSequence) -> Result<f64> {
        let (qv, av) = self.represent_pair(q, a)?;
        Ok(cosine(&qv, &av)?)
    }

    /// Margin loss of one triplet recorded on `tape`.
    pub fn triplet_loss(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        question: &EncodedSequence,
        positive: &EncodedSequence,
        negative: &EncodedSequence,
        loss: &LossConfig,
    ) -> Result<Var> {
        let (sim_pos, sim_neg) = if self.config.variant == Variant::SiameseBert {
            let q = self.siamese_branch(tape, params, question, 0)?;
            let p = self.siamese_branch(tape, params, positive, self.answer_segment())?;
            let n = self.siamese_branch(tape, params, negative, self.answer_segment())?;
            (tape.cosine(q, p)?, tape.cosine(q, n)?)
        } else {
            let pos = self.forward_pair(tape, params, question, positive)?;
            let neg = self.forward_pair(tape, params, question, negative)?;
            (tape.cosine(pos.q, pos.a)?, tape.cosine(neg.q, neg.a)?)
        };
        Ok(margin_loss_on_tape(tape, sim_pos, sim_neg, loss)?)
    }
}

fn fresh_params(config: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    encoder::init_params(&mut store, &config.encoder, config.vocab_size, config.seq_len, &mut rng);
    if let (Variant::CrossedBertMultiScaleCnn, Some(cnn)) = (config.variant, &config.cnn) {
        heads::init_cnn_params(&mut store, cnn, config.encoder.dim, &mut rng);
    }
    if let (Variant::CrossedBertBiGru, Some(gru)) = (config.variant, &config.gru) {
        heads::init_gru_params(&mut store, gru, config.encoder.dim, &mut rng);
    }
    store
}

/// `(q.a) / (|q||a| + 1e-12)`, clamped to `[-1, 1]`.
pub fn cosine(q: &Tensor, a: &Tensor) -> std::result::Result<f64, TensorError> {
    if q.shape() != a.shape() {
        return Err(TensorError::Shape {
            op: "cosine",
            left: q.shape().to_vec(),
            right: a.shape().to_vec(),
        });
    }
    Ok(cosine_raw(q.data(), a.data()).clamp(-1.0, 1.0))
}

/// `max{0, M - sim_pos + sim_neg}`.
pub fn margin_loss(sim_pos: f64, sim_neg: f64, cfg: &LossConfig) -> f64 {
    (cfg.margin - sim_pos + sim_neg).max(0.0)
}

/// Tape form of [`margin_loss`]; at the hinge point the gradient is zero.
pub fn margin_loss_on_tape(tape: &mut Tape, sim_pos: Var, sim_neg: Var, cfg: &LossConfig) -> std::result::Result<Var, TensorError> {
    let gap = tape.affine(sim_pos, -1.0, cfg.margin)?;
    let raw = tape.add(gap, sim_neg)?;
    tape.relu(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let v = |x: &[f64]| Tensor::vector(x.to_vec());
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((c - 1.0 / (2f64.sqrt() + 1e-12)).abs() < 1e-15);
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((cosine(&v(&[3.0, -4.0, 0.5]), &v(&[3.0, -4.0, 0.5])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert!(cosine(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn margin_examples() {
        let cfg = LossConfig { margin: 0.1 };
        assert_eq!(margin_loss(0.8, 0.3, &cfg), 0.0);
        assert!((margin_loss(0.5, 0.45, &cfg) - 0.05).abs() < 1e-15);
        assert!((margin_loss(0.4, 0.4, &cfg) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn loss_config_range() {
        assert!(LossConfig { margin: 0.0 }.validate().is_err());
        assert!(LossConfig { margin: 1.5 }.validate().is_err());
        assert!(LossConfig { margin: 1.0 }.validate().is_ok());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }
}
