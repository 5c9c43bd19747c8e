//! Candidate-pool ranking and top-K accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{AnswerId, Dataset, QuestionId};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::text::{encode, Vocabulary};

/// One question with its candidate answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPool {
    pub question: QuestionId,
    pub candidates: Vec<AnswerId>,
    pub relevant: BTreeSet<AnswerId>,
}

impl EvalPool {
    pub fn new(question: QuestionId, candidates: Vec<AnswerId>, relevant: BTreeSet<AnswerId>) -> Result<Self> {
        let unique: BTreeSet<_> = candidates.iter().copied().collect();
        if unique.len() != candidates.len() {
            return Err(Error::Input(format!("pool for question {question} has duplicate candidates")));
        }
        if candidates.is_empty() {
            return Err(Error::Input(format!("pool for question {question} is empty")));
        }
        if relevant.is_empty() {
            return Err(Error::Input(format!("pool for question {question} has no relevant answer")));
        }
        if let Some(r) = relevant.iter().find(|r| !unique.contains(r)) {
            return Err(Error::Input(format!(
                "relevant answer {r} of question {question} is not a candidate"
            )));
        }
        Ok(Self {
            question,
            candidates,
            relevant,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Sorts ids by score descending, ties by ascending id.
pub fn sort_by_score(mut scored: Vec<(AnswerId, f64)>) -> Vec<AnswerId> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(id, _)| id).collect()
}

/// Ranks the candidates of `pool` by `score`, best first.
pub fn rank_pool<F>(pool: &EvalPool, mut score: F) -> Result<Vec<AnswerId>>
where
    F: FnMut(AnswerId) -> Result<f64>,
{
    if pool.is_empty() {
        return Err(Error::Input(format!("pool for question {} is empty", pool.question)));
    }
    let scored = pool
        .candidates
        .iter()
        .map(|&id| Ok((id, score(id)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(sort_by_score(scored))
}

/// Ranks a pool by model cosine similarity.
pub fn rank_pool_with_model(pool: &EvalPool, model: &Model, vocab: &Vocabulary, dataset: &Dataset) -> Result<Vec<AnswerId>> {
    let len = model.config.seq_len;
    let q_text = dataset
        .question_text(pool.question)
        .ok_or_else(|| Error::Input(format!("unknown question {}", pool.question)))?;
    let q = encode(q_text, vocab, len)?;
    rank_pool(pool, |id| {
        let text = dataset
            .answer_text(id)
            .ok_or_else(|| Error::Input(format!("unknown answer {id}")))?;
        model.score(&q, &encode(text, vocab, len)?)
    })
}

fn check_k(pools: &[EvalPool], k: usize) -> Result<()> {
    let max = pools.iter().map(EvalPool::len).max().unwrap_or(0);
    if k == 0 || k > max {
        return Err(Error::Input(format!("K = {k} outside 1..={max}")));
    }
    Ok(())
}

/// Number of pools whose top-`k` holds at least one relevant answer.
pub fn hits_at_k(pools: &[EvalPool], rankings: &[Vec<AnswerId>], k: usize) -> Result<usize> {
    if pools.len() != rankings.len() {
        return Err(Error::Input(format!(
            "{} pools but {} rankings",
            pools.len(),
            rankings.len()
        )));
    }
    check_k(pools, k)?;
    Ok(pools
        .iter()
        .zip(rankings)
        .filter(|(p, r)| r.iter().take(k).any(|id| p.relevant.contains(id)))
        .count())
}

/// Fraction of pools with a relevant answer in the top `k`.
pub fn acc_at_k(pools: &[EvalPool], rankings: &[Vec<AnswerId>], k: usize) -> Result<f64> {
    if pools.is_empty() {
        return Err(Error::Input("no pools to evaluate".into()));
    }
    Ok(hits_at_k(pools, rankings, k)? as f64 / pools.len() as f64)
}

/// Pools of size `pool_size` for `questions`: every linked answer plus
/// distractors drawn uniformly from the other questions' answers.
pub fn build_pools(dataset: &Dataset, questions: &[QuestionId], pool_size: usize, seed: u64) -> Result<Vec<EvalPool>> {
    let all: Vec<AnswerId> = dataset.answers().keys().copied().collect();
    if pool_size == 0 || pool_size > all.len() {
        return Err(Error::Input(format!(
            "pool size {pool_size} must be in 1..={} (answers in dataset)",
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = Vec::with_capacity(questions.len());
    for &q in questions {
        let linked = dataset.answers_of(q);
        if linked.is_empty() {
            return Err(Error::Input(format!("question {q} has no linked answers")));
        }
        if linked.len() > pool_size {
            return Err(Error::Input(format!(
                "question {q} has {} answers, more than pool size {pool_size}",
                linked.len()
            )));
        }
        let others: Vec<AnswerId> = all.iter().copied().filter(|a| !dataset.is_linked(q, *a)).collect();
        let need = pool_size - linked.len();
        if need > others.len() {
            return Err(Error::Input(format!(
                "question {q} has only {} possible distractors, needs {need}",
                others.len()
            )));
        }
        let mut candidates = linked.to_vec();
        candidates.extend(rand::seq::index::sample(&mut rng, others.len(), need).into_iter().map(|i| others[i]));
        candidates.shuffle(&mut rng);
        pools.push(EvalPool::new(q, candidates, linked.iter().copied().collect())?);
    }
    Ok(pools)
}

/// Reads `question_id,candidate_id,label` rows; pools keep file order.
pub fn read_pools_csv(path: &Path) -> Result<Vec<EvalPool>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["question_id", "candidate_id", "label"] {
        return Err(Error::Input(format!(
            "{}: expected header question_id,candidate_id,label",
            path.display()
        )));
    }
    let mut order = Vec::new();
    let mut grouped: BTreeMap<QuestionId, (Vec<AnswerId>, BTreeSet<AnswerId>)> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let bad = |msg: String| Error::Input(format!("{} row {row}: {msg}", path.display()));
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        let parse = |s: &str| s.trim().parse::<u64>().map_err(|_| bad(format!("bad id {s:?}")));
        let q = parse(&rec[0])?;
        let c = parse(&rec[1])?;
        let label = match rec[2].trim() {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("label {other:?} is not 0 or 1"))),
        };
        let entry = grouped.entry(q).or_insert_with(|| {
            order.push(q);
            Default::default()
        });
        entry.0.push(c);
        if label {
            entry.1.insert(c);
        }
    }
    order
        .into_iter()
        .map(|q| {
            let (cands, rel) = grouped.remove(&q).expect("grouped");
            EvalPool::new(q, cands, rel)
        })
        .collect()
}

pub fn write_pools_csv(pools: &[EvalPool], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Input(e.to_string());
    w.write_record(["question_id", "candidate_id", "label"]).map_err(csv_err)?;
    for p in pools {
        for c in &p.candidates {
            let label = if p.relevant.contains(c) { "1" } else { "0" };
            w.write_record([p.question.to_string(), c.to_string(), label.to_string()])
                .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    crate::data::write_atomic(path, &bytes).map_err(|e| Error::io(path, e))
}

/// Accuracy table for a set of pools.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: Vec<(usize, f64)>,
    pub rankings: Vec<Vec<AnswerId>>,
}

impl EvalReport {
    pub fn acc(&self, k: usize) -> Option<f64> {
        self.accuracy.iter().find(|(kk, _)| *kk == k).map(|(_, a)| *a)
    }

    /// `K<TAB>acc` lines followed by an `N<TAB>count` footer.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, acc) in &self.accuracy {
            let _ = writeln!(out, "{k}\t{acc:.6}");
        }
        let _ = writeln!(out, "N\t{}", self.n);
        out
    }
}

/// Scores every pool with `model` (pools in parallel) and tabulates ACC@K.
pub fn evaluate(model: &Model, vocab: &Vocabulary, dataset: &Dataset, pools: &[EvalPool], ks: &[usize]) -> Result<EvalReport> {
    let rankings = pools
        .par_iter()
        .map(|p| rank_pool_with_model(p, model, vocab, dataset))
        .collect::<Result<Vec<_>>>()?;
    let accuracy = ks
        .iter()
        .map(|&k| Ok((k, acc_at_k(pools, &rankings, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        n: pools.len(),
        accuracy,
        rankings,
    })
}
