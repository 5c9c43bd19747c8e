//! Binary checkpoint format.
//!
//! ```text
//! "QAMC" | u32 version | u32 len, config text | [u8; 32] vocab hash
//! u32 count, count x record
//! u8 has_optimizer [u64 step, u32 count, count x record (first), u32 count, count x record (second)]
//! record = u32 path_len, path | u32 rank, rank x u32 dim | f32 payload
//! ```
//!
//! Integers and floats are little-endian. The vocabulary itself lives next to
//! the checkpoint in `<checkpoint>.vocab.txt`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::{key_values_to_text, model_config_entries, model_config_from_entries, parse_key_values};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::ParamStore;
use crate::tensor::{Tensor, MAX_RANK};
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"QAMC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab_hash: [u8; 32],
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub seed: u64,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn new(model: &Model, vocab: &Vocabulary, optimizer: Option<OptimizerState>, seed: u64, epoch: u64) -> Self {
        Self {
            config: model.config.clone(),
            vocab_hash: vocab.content_hash(),
            params: model.params.clone(),
            optimizer,
            seed,
            epoch,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.config.clone(), self.params.clone())
    }

    pub fn verify_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.content_hash();
        if found != self.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: hex(&self.vocab_hash),
                found: hex(&found),
            });
        }
        Ok(())
    }

    fn config_text(&self) -> String {
        let mut entries = model_config_entries(&self.config);
        entries.insert("seed".into(), self.seed.to_string());
        entries.insert("epoch".into(), self.epoch.to_string());
        if let Some(opt) = &self.optimizer {
            let c = opt.config;
            entries.insert("adam.lr".into(), c.lr.to_string());
            entries.insert("adam.beta1".into(), c.beta1.to_string());
            entries.insert("adam.beta2".into(), c.beta2.to_string());
            entries.insert("adam.eps".into(), c.eps.to_string());
            entries.insert("adam.weight_decay".into(), c.weight_decay.to_string());
        }
        key_values_to_text(&entries)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION as usize);
        put_bytes(&mut out, self.config_text().as_bytes());
        out.extend_from_slice(&self.vocab_hash);
        put_records(&mut out, self.params.iter().map(|(k, t)| (k, t.shape().to_vec(), t.data())));
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for moments in [&opt.first, &opt.second] {
                    put_records(
                        &mut out,
                        moments.iter().map(|(k, v)| (k.as_str(), vec![v.len()], v.as_slice())),
                    );
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let text = std::str::from_utf8(r.sized()?).map_err(|_| corrupt("config text is not UTF-8"))?;
        let entries = parse_key_values(text)?;
        let config = model_config_from_entries(&entries)?;
        let num = |k: &str| -> Result<u64> {
            entries
                .get(k)
                .ok_or_else(|| corrupt(&format!("missing key {k}")))?
                .parse()
                .map_err(|_| corrupt(&format!("bad value for {k}")))
        };
        let seed = num("seed")?;
        let epoch = num("epoch")?;
        let mut vocab_hash = [0u8; 32];
        vocab_hash.copy_from_slice(r.take(32)?);

        let mut params = ParamStore::new();
        for (path, shape, data) in r.records()? {
            params.insert(path, Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?);
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let flat = |recs: Vec<(String, Vec<usize>, Vec<f64>)>| -> BTreeMap<String, Vec<f64>> {
                    recs.into_iter().map(|(k, _, v)| (k, v)).collect()
                };
                let first = flat(r.records()?);
                let second = flat(r.records()?);
                let f = |k: &str| -> Result<f64> {
                    entries
                        .get(k)
                        .ok_or_else(|| corrupt(&format!("missing key {k}")))?
                        .parse()
                        .map_err(|_| corrupt(&format!("bad value for {k}")))
                };
                let cfg = AdamWConfig {
                    lr: f("adam.lr")?,
                    beta1: f("adam.beta1")?,
                    beta2: f("adam.beta2")?,
                    eps: f("adam.eps")?,
                    weight_decay: f("adam.weight_decay")?,
                };
                cfg.validate()?;
                Some(OptimizerState {
                    config: cfg,
                    step,
                    first,
                    second,
                })
            }
            b => return Err(corrupt(&format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(corrupt(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Self {
            config,
            vocab_hash,
            params,
            optimizer,
            seed,
            epoch,
        };
        // shape and name check against the declared config
        ckpt.model()?;
        if let Some(opt) = &ckpt.optimizer {
            for (name, t) in ckpt.params.iter() {
                let ok = |m: &BTreeMap<String, Vec<f64>>| m.get(name).is_some_and(|v| v.len() == t.numel());
                if !ok(&opt.first) || !ok(&opt.second) {
                    return Err(corrupt(&format!("optimizer moments do not match parameter {name}")));
                }
            }
        }
        Ok(ckpt)
    }
}

fn corrupt(reason: &str) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {reason}"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("length fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len());
    out.extend_from_slice(bytes);
}

fn put_records<'a, I>(out: &mut Vec<u8>, records: I)
where
    I: Iterator<Item = (&'a str, Vec<usize>, &'a [f64])>,
{
    let records: Vec<_> = records.collect();
    put_u32(out, records.len());
    for (path, shape, data) in records {
        put_bytes(out, path.as_bytes());
        put_u32(out, shape.len());
        shape.iter().for_each(|&d| put_u32(out, d));
        data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes()));
    }
}

/// Path, dims and values of one stored tensor.
type Record = (String, Vec<usize>, Vec<f64>);

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            corrupt(&format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn sized(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }

    fn records(&mut self) -> Result<Vec<Record>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let path = String::from_utf8(self.sized()?.to_vec()).map_err(|_| corrupt("parameter path is not UTF-8"))?;
            let rank = self.u32()?;
            if rank == 0 || rank > MAX_RANK {
                return Err(corrupt(&format!("parameter {path} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt(&format!("parameter {path} is too large")))?;
            let raw = self.take(n.checked_mul(4).ok_or_else(|| corrupt("payload too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            out.push((path, shape, data));
        }
        Ok(out)
    }
}

/// Where the vocabulary of a checkpoint is stored.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".vocab.txt");
    PathBuf::from(name)
}

/// Writes the checkpoint and its vocabulary, each atomically.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    ckpt.verify_vocab(vocab)?;
    let vpath = vocab_path(path);
    write_atomic(&vpath, vocab.to_text().as_bytes()).map_err(|e| Error::io(&vpath, e))?;
    write_atomic(path, &ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint without its vocabulary.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Reads a checkpoint and the vocabulary stored beside it, checking the hash.
pub fn load_with_vocab(path: &Path) -> Result<(Checkpoint, Vocabulary)> {
    let ckpt = load_checkpoint(path)?;
    let vpath = vocab_path(path);
    let text = std::fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
    let vocab = Vocabulary::from_text(&text)?;
    ckpt.verify_vocab(&vocab)?;
    Ok((ckpt, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::tiny_config;
    use crate::model::Variant;

    fn sample() -> (Checkpoint, Vocabulary) {
        let vocab = Vocabulary::build(&["问答匹配", "医疗"]).unwrap();
        let model = Model::new(tiny_config(Variant::CrossedBertBiGru, vocab.len()), 3).unwrap();
        let opt = OptimizerState::new(AdamWConfig::default(), &model.params);
        (Checkpoint::new(&model, &vocab, Some(opt), 3, 2), vocab)
    }

    #[test]
    fn bytes_round_trip_after_rounding() {
        let (mut ckpt, _) = sample();
        ckpt.params.round_to_f32();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let (ckpt, _) = sample();
        let bytes = ckpt.to_bytes();
        for cut in (0..bytes.len()).step_by(97) {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn version_and_magic_are_checked() {
        let (ckpt, _) = sample();
        let mut bytes = ckpt.to_bytes();
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn foreign_vocabulary_is_rejected() {
        let (ckpt, _) = sample();
        let other = Vocabulary::build(&["别的"]).unwrap();
        assert!(matches!(ckpt.verify_vocab(&other), Err(Error::VocabMismatch { .. })));
    }
}
