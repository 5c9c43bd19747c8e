//! Run configuration and its canonical `key=value` text form.
//!
//! Canonical text is one `key=value` line per field in lexical key order.
//! Parsing rejects unknown keys and malformed values; any subset of keys may
//! be given, the rest keep their defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::encoder::{CrossWiring, EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::heads::{CnnHeadConfig, GruHeadConfig};
use crate::model::{LossConfig, ModelConfig, Variant};
use crate::optim::AdamWConfig;
use crate::train::TrainConfig;

/// Every tunable of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: Variant,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width; four times `hidden` when unset.
    pub ffn: Option<usize>,
    pub max_len: usize,
    pub kernel_sizes: Vec<usize>,
    pub feature_maps: usize,
    pub gru_hidden: usize,
    pub pooling: Pooling,
    pub cross: CrossWiring,
    pub branch_segments: bool,
    pub lr: f64,
    pub margin: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub resample_negatives: bool,
    pub pool_size: usize,
    pub pool_seed: u64,
    pub dev_eval: bool,
    pub data_dir: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            arch: Variant::CrossedBert,
            hidden: 32,
            layers: 2,
            heads: 2,
            ffn: None,
            max_len: 32,
            kernel_sizes: vec![2, 3],
            feature_maps: 16,
            gru_hidden: 16,
            pooling: Pooling::MeanUsefulToken,
            cross: CrossWiring::EveryLayer,
            branch_segments: false,
            lr: opt.lr,
            margin: LossConfig::default().margin,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            adam_eps: opt.eps,
            epochs: 10,
            batch: 16,
            seed: 0,
            train_fraction: 1.0,
            resample_negatives: true,
            pool_size: 100,
            pool_seed: 0,
            dev_eval: false,
            data_dir: None,
            checkpoint_out: None,
            metrics_out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}={value}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse(key, s)).collect()
}

fn join_list(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Splits `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {}", i + 1, k.trim())));
        }
    }
    Ok(out)
}

pub fn key_values_to_text(entries: &BTreeMap<String, String>) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "arch" => self.arch = value.parse().map_err(Error::Config)?,
            "hidden" => self.hidden = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn" => self.ffn = if value == "auto" { None } else { Some(parse(key, value)?) },
            "max_len" => self.max_len = parse(key, value)?,
            "kernel_sizes" => self.kernel_sizes = parse_list(key, value)?,
            "feature_maps" => self.feature_maps = parse(key, value)?,
            "gru_hidden" => self.gru_hidden = parse(key, value)?,
            "pooling" => self.pooling = value.parse().map_err(Error::Config)?,
            "cross" => self.cross = value.parse().map_err(Error::Config)?,
            "branch_segments" => self.branch_segments = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "resample_negatives" => self.resample_negatives = parse(key, value)?,
            "pool_size" => self.pool_size = parse(key, value)?,
            "pool_seed" => self.pool_seed = parse(key, value)?,
            "dev_eval" => self.dev_eval = parse(key, value)?,
            "data_dir" => self.data_dir = path(value),
            "checkpoint_out" => self.checkpoint_out = path(value),
            "metrics_out" => self.metrics_out = path(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> BTreeMap<String, String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(String::new, |p| p.display().to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("arch", self.arch.to_string()),
            ("hidden", self.hidden.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn", self.ffn.map_or_else(|| "auto".into(), |f| f.to_string())),
            ("max_len", self.max_len.to_string()),
            ("kernel_sizes", join_list(&self.kernel_sizes)),
            ("feature_maps", self.feature_maps.to_string()),
            ("gru_hidden", self.gru_hidden.to_string()),
            ("pooling", self.pooling.to_string()),
            ("cross", self.cross.to_string()),
            ("branch_segments", self.branch_segments.to_string()),
            ("lr", self.lr.to_string()),
            ("margin", self.margin.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("resample_negatives", self.resample_negatives.to_string()),
            ("pool_size", self.pool_size.to_string()),
            ("pool_seed", self.pool_seed.to_string()),
            ("dev_eval", self.dev_eval.to_string()),
            ("data_dir", path(&self.data_dir)),
            ("checkpoint_out", path(&self.checkpoint_out)),
            ("metrics_out", path(&self.metrics_out)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        key_values_to_text(&self.entries())
    }

    /// Defaults overridden by every key present in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant: self.arch,
            encoder: EncoderConfig {
                dim: self.hidden,
                layers: self.layers,
                heads: self.heads,
                ffn_dim: self.ffn.unwrap_or(4 * self.hidden),
                mode: self.arch.encoder_mode(),
                cross: self.cross,
            },
            pooling: self.pooling,
            cnn: (self.arch == Variant::CrossedBertMultiScaleCnn).then(|| CnnHeadConfig {
                kernel_sizes: self.kernel_sizes.clone(),
                feature_maps: self.feature_maps,
            }),
            gru: (self.arch == Variant::CrossedBertBiGru).then_some(GruHeadConfig { hidden: self.gru_hidden }),
            seq_len: self.max_len,
            vocab_size,
            branch_segments: self.branch_segments,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            loss: LossConfig { margin: self.margin },
            epochs: self.epochs,
            batch_size: self.batch,
            seed: self.seed,
            train_fraction: self.train_fraction,
            resample_negatives: self.resample_negatives,
            dev_pool_size: self.dev_eval.then_some(self.pool_size),
            pool_seed: self.pool_seed,
        }
    }

    /// Checks every module constraint that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        // any vocabulary has at least one character beyond the reserved ids
        self.model_config(crate::text::SEP + 2).validate()?;
        self.train_config().validate()?;
        if self.pool_size == 0 {
            return Err(Error::Config("pool size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Model-shape keys stored in checkpoints.
pub fn model_config_entries(cfg: &ModelConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("arch", cfg.variant.to_string());
    put("hidden", cfg.encoder.dim.to_string());
    put("layers", cfg.encoder.layers.to_string());
    put("heads", cfg.encoder.heads.to_string());
    put("ffn", cfg.encoder.ffn_dim.to_string());
    put("cross", cfg.encoder.cross.to_string());
    put("pooling", cfg.pooling.to_string());
    put("max_len", cfg.seq_len.to_string());
    put("vocab_size", cfg.vocab_size.to_string());
    put("branch_segments", cfg.branch_segments.to_string());
    if let Some(cnn) = &cfg.cnn {
        put("kernel_sizes", join_list(&cnn.kernel_sizes));
        put("feature_maps", cnn.feature_maps.to_string());
    }
    if let Some(gru) = &cfg.gru {
        put("gru_hidden", gru.hidden.to_string());
    }
    m
}

/// Inverse of [`model_config_entries`]; the result is validated.
pub fn model_config_from_entries(entries: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| {
        entries
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("missing key {k}")))
    };
    let variant: Variant = get("arch")?.parse().map_err(Error::Config)?;
    let cfg = ModelConfig {
        variant,
        encoder: EncoderConfig {
            dim: parse("hidden", get("hidden")?)?,
            layers: parse("layers", get("layers")?)?,
            heads: parse("heads", get("heads")?)?,
            ffn_dim: parse("ffn", get("ffn")?)?,
            mode: variant.encoder_mode(),
            cross: get("cross")?.parse().map_err(Error::Config)?,
        },
        pooling: get("pooling")?.parse().map_err(Error::Config)?,
        cnn: match variant {
            Variant::CrossedBertMultiScaleCnn => Some(CnnHeadConfig {
                kernel_sizes: parse_list("kernel_sizes", get("kernel_sizes")?)?,
                feature_maps: parse("feature_maps", get("feature_maps")?)?,
            }),
            _ => None,
        },
        gru: match variant {
            Variant::CrossedBertBiGru => Some(GruHeadConfig {
                hidden: parse("gru_hidden", get("gru_hidden")?)?,
            }),
            _ => None,
        },
        seq_len: parse("max_len", get("max_len")?)?,
        vocab_size: parse("vocab_size", get("vocab_size")?)?,
        branch_segments: parse("branch_segments", get("branch_segments")?)?,
    };
    cfg.validate()?;
    Ok(cfg)
}
