//! Triplet sampling and the mini-batch AdamW training loop.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{AnswerId, DataError, Dataset, QuestionId};
use crate::error::{Error, Result};
use crate::eval::{build_pools, evaluate};
use crate::model::{LossConfig, Model};
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::params::GradStore;
use crate::tape::Tape;
use crate::tensor::TensorError;
use crate::text::{encode, EncodedSequence, Vocabulary};

/// RNG streams carved out of the run seed.
const SUBSAMPLE_STREAM: u64 = 1;
const TRIPLET_STREAM_BASE: u64 = 1 << 32;

/// (question, relevant answer, irrelevant answer)
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub question: QuestionId,
    pub positive: AnswerId,
    pub negative: AnswerId,
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(q={}, pos={}, neg={})", self.question, self.positive, self.negative)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One triplet per (question, linked answer) with a uniformly drawn unlinked
/// negative, shuffled. Deterministic in `(run_seed, epoch)`.
pub fn sample_triplets(dataset: &Dataset, questions: &[QuestionId], run_seed: u64, epoch: u64) -> std::result::Result<Vec<Triplet>, DataError> {
    let all: Vec<AnswerId> = dataset.answers().keys().copied().collect();
    let mut rng = stream_rng(run_seed, TRIPLET_STREAM_BASE + epoch);
    let mut out = Vec::new();
    for &q in questions {
        let linked = dataset.answers_of(q);
        if linked.len() >= all.len() {
            return Err(DataError::NoNegative(q));
        }
        for &positive in linked {
            // rejection sampling is uniform over the unlinked answers
            let negative = loop {
                let cand = all[rng.gen_range(0..all.len())];
                if !dataset.is_linked(q, cand) {
                    break cand;
                }
            };
            out.push(Triplet {
                question: q,
                positive,
                negative,
            });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Uniform subsample of `round(fraction * n)` questions (at least one when
/// `n > 0`), returned in ascending id order.
pub fn subsample_questions(questions: &[QuestionId], fraction: f64, seed: u64) -> Vec<QuestionId> {
    if questions.is_empty() {
        return Vec::new();
    }
    let keep = ((questions.len() as f64 * fraction).round() as usize).clamp(1, questions.len());
    let mut rng = stream_rng(seed, SUBSAMPLE_STREAM);
    let mut picked: Vec<QuestionId> = questions.choose_multiple(&mut rng, keep).copied().collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_fraction: f64,
    /// Draw fresh negatives every epoch; otherwise reuse the first epoch's triplets.
    pub resample_negatives: bool,
    /// Pool size for the per-epoch dev ACC@1, if enabled.
    pub dev_pool_size: Option<usize>,
    pub pool_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            epochs: 10,
            batch_size: 16,
            seed: 0,
            train_fraction: 1.0,
            resample_negatives: true,
            dev_pool_size: None,
            pool_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!("train fraction {} must be in (0, 1]", self.train_fraction)));
        }
        if self.dev_pool_size == Some(0) {
            return Err(Error::Config("dev pool size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_acc1: Option<f64>,
}

impl fmt::Display for EpochRecord {
    /// `epoch<TAB>mean_loss<TAB>dev_acc@1`, with `-` when dev accuracy was not computed.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t", self.epoch, self.mean_loss)?;
        match self.dev_acc1 {
            Some(a) => write!(f, "{a:.6}"),
            None => f.write_str("-"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub log: Vec<EpochRecord>,
    pub epochs_run: usize,
}

/// Encoded texts for every question and answer of a dataset.
pub struct EncodedCorpus {
    questions: HashMap<QuestionId, EncodedSequence>,
    answers: HashMap<AnswerId, EncodedSequence>,
}

impl EncodedCorpus {
    pub fn new(dataset: &Dataset, vocab: &Vocabulary, seq_len: usize) -> Result<Self> {
        let questions = dataset
            .questions()
            .iter()
            .map(|(&id, t)| Ok((id, encode(t, vocab, seq_len)?)))
            .collect::<Result<_>>()?;
        let answers = dataset
            .answers()
            .iter()
            .map(|(&id, a)| Ok((id, encode(&a.text, vocab, seq_len)?)))
            .collect::<Result<_>>()?;
        Ok(Self { questions, answers })
    }

    pub fn triplet(&self, t: &Triplet) -> Result<(&EncodedSequence, &EncodedSequence, &EncodedSequence)> {
        let missing = |what: &str, id: u64| Error::Input(format!("triplet {t} references unknown {what} {id}"));
        Ok((
            self.questions.get(&t.question).ok_or_else(|| missing("question", t.question))?,
            self.answers.get(&t.positive).ok_or_else(|| missing("answer", t.positive))?,
            self.answers.get(&t.negative).ok_or_else(|| missing("answer", t.negative))?,
        ))
    }
}

/// Loss and parameter gradients of a single triplet.
pub fn triplet_gradients(model: &Model, corpus: &EncodedCorpus, triplet: &Triplet, loss: &LossConfig, epoch: usize) -> Result<(f64, GradStore)> {
    let (q, p, n) = corpus.triplet(triplet)?;
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape, true);
    let non_finite = || Error::NonFiniteLoss {
        epoch,
        triplet: triplet.to_string(),
    };
    let out = model
        .triplet_loss(&mut tape, &params, q, p, n, loss)
        .map_err(|e| match e {
            Error::Tensor(TensorError::NonFinite { .. }) => non_finite(),
            other => other,
        })?;
    let value = tape.value(out).data()[0];
    if !value.is_finite() {
        return Err(non_finite());
    }
    tape.backward(out).map_err(|e| match e {
        TensorError::NonFinite { .. } => non_finite(),
        other => other.into(),
    })?;
    Ok((value, params.gradients(&tape)))
}

/// Mean triplet loss at the current parameters, without updating them.
pub fn mean_loss(model: &Model, corpus: &EncodedCorpus, triplets: &[Triplet], loss: &LossConfig) -> Result<f64> {
    let values = triplets
        .par_iter()
        .map(|t| {
            let (q, p, n) = corpus.triplet(t)?;
            let mut tape = Tape::new();
            let params = model.params.bind(&mut tape, false);
            let out = model.triplet_loss(&mut tape, &params, q, p, n, loss)?;
            Ok(tape.value(out).data()[0])
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.is_empty() {
        return Ok(0.0);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Trains `model` on the train split. `on_epoch` sees each record as it is produced.
pub fn train<F>(dataset: &Dataset, vocab: &Vocabulary, mut model: Model, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    model.config.validate()?;
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary size {} differs from vocabulary with {} entries",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    let corpus = EncodedCorpus::new(dataset, vocab, model.config.seq_len)?;
    let questions = subsample_questions(&dataset.splits().train, cfg.train_fraction, cfg.seed);
    let dev_pools = match cfg.dev_pool_size {
        Some(size) if !dataset.splits().dev.is_empty() => {
            Some(build_pools(dataset, &dataset.splits().dev, size, cfg.pool_seed)?)
        }
        _ => None,
    };

    let mut state = OptimizerState::new(cfg.optimizer, &model.params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut fixed: Option<Vec<Triplet>> = None;
    for epoch in 1..=cfg.epochs {
        let triplets = match (&fixed, cfg.resample_negatives) {
            (Some(t), false) => t.clone(),
            _ => {
                let t = sample_triplets(dataset, &questions, cfg.seed, epoch as u64)?;
                if !cfg.resample_negatives {
                    fixed = Some(t.clone());
                }
                t
            }
        };
        if triplets.is_empty() {
            continue;
        }
        let mut loss_sum = 0.0;
        for batch in triplets.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|t| triplet_gradients(&model, &corpus, t, &cfg.loss, epoch))
                .collect::<Result<Vec<_>>>()?;
            let mut total: GradStore = GradStore::new();
            for (loss, grads) in results {
                loss_sum += loss;
                for (name, g) in grads {
                    let slot = total.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                    slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            total.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
            adamw_step(&mut model.params, &total, &mut state)?;
        }
        let dev_acc1 = match &dev_pools {
            Some(pools) => evaluate(&model, vocab, dataset, pools, &[1])?.acc(1),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / triplets.len() as f64,
            dev_acc1,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        model,
        optimizer: state,
        log,
        epochs_run: cfg.epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Answer, Splits};
    use std::collections::BTreeMap;

    fn two_question_dataset() -> Dataset {
        let questions = BTreeMap::from([(1, "腹痛".to_string()), (2, "头晕".to_string())]);
        let answers = BTreeMap::from([
            (1, Answer { text: "胃炎".into(), question: 1 }),
            (2, Answer { text: "贫血".into(), question: 2 }),
        ]);
        let splits = Splits {
            train: vec![1, 2],
            ..Splits::default()
        };
        Dataset::new(questions, answers, splits).unwrap()
    }

    #[test]
    fn only_possible_negative_is_forced() {
        let ds = two_question_dataset();
        for epoch in 0..5 {
            let t = sample_triplets(&ds, &[1], 3, epoch).unwrap();
            assert_eq!(t, vec![Triplet { question: 1, positive: 1, negative: 2 }]);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let ds = two_question_dataset();
        assert_eq!(sample_triplets(&ds, &[1, 2], 9, 4).unwrap(), sample_triplets(&ds, &[1, 2], 9, 4).unwrap());
    }

    #[test]
    fn question_without_negative_is_an_error() {
        let questions = BTreeMap::from([(1, "a".to_string())]);
        let answers = BTreeMap::from([(1, Answer { text: "b".into(), question: 1 })]);
        let ds = Dataset::new(questions, answers, Splits { train: vec![1], ..Splits::default() }).unwrap();
        assert!(matches!(sample_triplets(&ds, &[1], 0, 0), Err(DataError::NoNegative(1))));
    }

    #[test]
    fn subsample_sizes() {
        let qs: Vec<u64> = (1..=10).collect();
        assert_eq!(subsample_questions(&qs, 0.8, 1).len(), 8);
        assert_eq!(subsample_questions(&qs, 1.0, 1), qs);
        assert_eq!(subsample_questions(&qs, 0.01, 1).len(), 1);
        assert_eq!(subsample_questions(&qs, 0.5, 4), subsample_questions(&qs, 0.5, 4));
    }

    #[test]
    fn record_format() {
        let r = EpochRecord {
            epoch: 3,
            mean_loss: 0.05,
            dev_acc1: None,
        };
        assert_eq!(r.to_string(), "3\t0.050000\t-");
        let r = EpochRecord {
            dev_acc1: Some(0.5),
            ..r
        };
        assert_eq!(r.to_string(), "3\t0.050000\t0.500000");
    }
}
