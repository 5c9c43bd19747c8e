//! Question/answer datasets: CSV ingest, writer and a synthetic generator.
//!
//! Directory layout:
//!
//! ```text
//! questions.csv   question_id,content
//! answers.csv     ans_id,question_id,content
//! train.txt       one question id per line (also dev.txt, test.txt)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type QuestionId = u64;
pub type AnswerId = u64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{file} row {row}: malformed: {reason}")]
    Malformed { file: String, row: u64, reason: String },
    #[error("{file} row {row}: unknown question id {question}")]
    DanglingReference { file: String, row: u64, question: QuestionId },
    #[error("{file} row {row}: duplicate id {id}")]
    DuplicateId { file: String, row: u64, id: u64 },
    #[error("question {id} appears in both {first} and {second} splits")]
    SplitOverlap { id: QuestionId, first: String, second: String },
    #[error("question {0} is in a split but has no linked answer")]
    NoAnswers(QuestionId),
    #[error("question {0} has no possible negative answer")]
    NoNegative(QuestionId),
    #[error("synthetic corpus: {0}")]
    Infeasible(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Answer {
    pub text: String,
    pub question: QuestionId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown split {s:?} (expected train|dev|test)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<QuestionId>,
    pub dev: Vec<QuestionId>,
    pub test: Vec<QuestionId>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[QuestionId] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    questions: BTreeMap<QuestionId, String>,
    answers: BTreeMap<AnswerId, Answer>,
    splits: Splits,
    links: BTreeMap<QuestionId, Vec<AnswerId>>,
}

/// Per-split counts and mean character lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSummary {
    pub questions: usize,
    pub answers: usize,
    pub mean_question_chars: f64,
    pub mean_answer_chars: f64,
}

impl Dataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        questions: BTreeMap<QuestionId, String>,
        answers: BTreeMap<AnswerId, Answer>,
        splits: Splits,
    ) -> Result<Self, DataError> {
        let mut links: BTreeMap<QuestionId, Vec<AnswerId>> = BTreeMap::new();
        for (&id, a) in &answers {
            if !questions.contains_key(&a.question) {
                return Err(DataError::DanglingReference {
                    file: "answers".into(),
                    row: id,
                    question: a.question,
                });
            }
            links.entry(a.question).or_default().push(id);
        }
        let mut seen: BTreeMap<QuestionId, Split> = BTreeMap::new();
        for split in Split::ALL {
            for &q in splits.get(split) {
                if !questions.contains_key(&q) {
                    return Err(DataError::DanglingReference {
                        file: format!("{}.txt", split.name()),
                        row: q,
                        question: q,
                    });
                }
                if let Some(prev) = seen.insert(q, split) {
                    return Err(DataError::SplitOverlap {
                        id: q,
                        first: prev.name().into(),
                        second: split.name().into(),
                    });
                }
                if !links.contains_key(&q) {
                    return Err(DataError::NoAnswers(q));
                }
            }
        }
        Ok(Self {
            questions,
            answers,
            splits,
            links,
        })
    }

    pub fn questions(&self) -> &BTreeMap<QuestionId, String> {
        &self.questions
    }

    pub fn answers(&self) -> &BTreeMap<AnswerId, Answer> {
        &self.answers
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn question_text(&self, id: QuestionId) -> Option<&str> {
        self.questions.get(&id).map(String::as_str)
    }

    pub fn answer_text(&self, id: AnswerId) -> Option<&str> {
        self.answers.get(&id).map(|a| a.text.as_str())
    }

    /// Answers linked to `question`, ascending by id.
    pub fn answers_of(&self, question: QuestionId) -> &[AnswerId] {
        self.links.get(&question).map_or(&[], Vec::as_slice)
    }

    pub fn is_linked(&self, question: QuestionId, answer: AnswerId) -> bool {
        self.answers.get(&answer).is_some_and(|a| a.question == question)
    }

    /// Every question and answer text, for vocabulary construction.
    pub fn texts(&self) -> Vec<&str> {
        self.questions
            .values()
            .map(String::as_str)
            .chain(self.answers.values().map(|a| a.text.as_str()))
            .collect()
    }

    pub fn summary(&self, split: Split) -> SplitSummary {
        let qs = self.splits.get(split);
        let answer_ids: Vec<AnswerId> = qs.iter().flat_map(|q| self.answers_of(*q).iter().copied()).collect();
        let mean = |lens: Vec<usize>| {
            if lens.is_empty() {
                0.0
            } else {
                lens.iter().sum::<usize>() as f64 / lens.len() as f64
            }
        };
        SplitSummary {
            questions: qs.len(),
            answers: answer_ids.len(),
            mean_question_chars: mean(qs.iter().map(|q| self.questions[q].chars().count()).collect()),
            mean_answer_chars: mean(answer_ids.iter().map(|a| self.answers[a].text.chars().count()).collect()),
        }
    }
}

fn require(path: &Path) -> Result<(), DataError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(DataError::MissingFile(path.to_path_buf()))
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>, DataError> {
    require(path)?;
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })
}

fn check_header(reader: &mut csv::Reader<fs::File>, file: &str, expected: &[&str]) -> Result<(), DataError> {
    let header = reader.headers().map_err(|e| DataError::Malformed {
        file: file.into(),
        row: 1,
        reason: e.to_string(),
    })?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(DataError::Malformed {
            file: file.into(),
            row: 1,
            reason: format!("expected header {}, found {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn parse_id(file: &str, row: u64, field: &str, value: &str) -> Result<u64, DataError> {
    value.trim().parse().map_err(|_| DataError::Malformed {
        file: file.into(),
        row,
        reason: format!("{field} {value:?} is not a non-negative integer"),
    })
}

fn records(
    reader: &mut csv::Reader<fs::File>,
    file: &str,
    width: usize,
) -> Result<Vec<(u64, csv::StringRecord)>, DataError> {
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // header is row 1
        let fallback_row = i as u64 + 2;
        let rec = rec.map_err(|e| DataError::Malformed {
            file: file.into(),
            row: e.position().map_or(fallback_row, |p| p.line()),
            reason: e.to_string(),
        })?;
        let row = rec.position().map_or(fallback_row, |p| p.line());
        if rec.len() != width {
            return Err(DataError::Malformed {
                file: file.into(),
                row,
                reason: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        out.push((row, rec));
    }
    Ok(out)
}

fn read_split(path: &Path) -> Result<Vec<QuestionId>, DataError> {
    require(path)?;
    let file = path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned());
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut ids = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = i as u64 + 1;
        let id = parse_id(&file, row, "question id", line)?;
        if !seen.insert(id) {
            return Err(DataError::DuplicateId { file, row, id });
        }
        ids.push(id);
    }
    Ok(ids)
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let q_path = dir.join("questions.csv");
    let mut reader = csv_reader(&q_path)?;
    check_header(&mut reader, "questions.csv", &["question_id", "content"])?;
    let mut questions = BTreeMap::new();
    for (row, rec) in records(&mut reader, "questions.csv", 2)? {
        let id = parse_id("questions.csv", row, "question_id", &rec[0])?;
        if questions.insert(id, rec[1].to_string()).is_some() {
            return Err(DataError::DuplicateId {
                file: "questions.csv".into(),
                row,
                id,
            });
        }
    }

    let a_path = dir.join("answers.csv");
    let mut reader = csv_reader(&a_path)?;
    check_header(&mut reader, "answers.csv", &["ans_id", "question_id", "content"])?;
    let mut answers = BTreeMap::new();
    for (row, rec) in records(&mut reader, "answers.csv", 3)? {
        let id = parse_id("answers.csv", row, "ans_id", &rec[0])?;
        let question = parse_id("answers.csv", row, "question_id", &rec[1])?;
        if !questions.contains_key(&question) {
            return Err(DataError::DanglingReference {
                file: "answers.csv".into(),
                row,
                question,
            });
        }
        let answer = Answer {
            text: rec[2].to_string(),
            question,
        };
        if answers.insert(id, answer).is_some() {
            return Err(DataError::DuplicateId {
                file: "answers.csv".into(),
                row,
                id,
            });
        }
    }

    let splits = Splits {
        train: read_split(&dir.join("train.txt"))?,
        dev: read_split(&dir.join("dev.txt"))?,
        test: read_split(&dir.join("test.txt"))?,
    };
    Dataset::new(questions, answers, splits)
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

/// Writes a dataset in the layout read by [`load_dataset`].
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let to_io = |e: csv::Error| std::io::Error::other(e.to_string());

    let q = csv_bytes(
        &["question_id", "content"],
        dataset.questions.iter().map(|(id, t)| vec![id.to_string(), t.clone()]),
    )
    .map_err(to_io)
    .map_err(io(dir))?;
    let path = dir.join("questions.csv");
    write_atomic(&path, &q).map_err(io(&path))?;

    let a = csv_bytes(
        &["ans_id", "question_id", "content"],
        dataset
            .answers
            .iter()
            .map(|(id, a)| vec![id.to_string(), a.question.to_string(), a.text.clone()]),
    )
    .map_err(to_io)
    .map_err(io(dir))?;
    let path = dir.join("answers.csv");
    write_atomic(&path, &a).map_err(io(&path))?;

    for split in Split::ALL {
        let body: String = dataset.splits.get(split).iter().map(|id| format!("{id}\n")).collect();
        let path = dir.join(format!("{}.txt", split.name()));
        write_atomic(&path, body.as_bytes()).map_err(io(&path))?;
    }
    Ok(())
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_questions: usize,
    pub answers_per_question: usize,
    /// Size of the character alphabet texts are drawn from.
    pub vocab_chars: usize,
    pub seed: u64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl SyntheticSpec {
    pub fn new(n_questions: usize, answers_per_question: usize, vocab_chars: usize, seed: u64) -> Self {
        Self {
            n_questions,
            answers_per_question,
            vocab_chars,
            seed,
            dev_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

/// Characters in each question's topic cluster.
pub const CLUSTER_SIZE: usize = 3;
const MIN_VOCAB_CHARS: usize = 10;
const ALPHABET_START: u32 = 0x4E00;

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Each question gets its own cluster of [`CLUSTER_SIZE`] characters; the
/// question and all of its answers repeat those characters among random
/// filler, so lexical overlap identifies the relevant answers.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    let infeasible = |msg: String| Err(DataError::Infeasible(msg));
    if spec.vocab_chars < MIN_VOCAB_CHARS {
        return infeasible(format!("vocab_chars {} is below {MIN_VOCAB_CHARS}", spec.vocab_chars));
    }
    if spec.n_questions == 0 || spec.answers_per_question == 0 {
        return infeasible("need at least one question and one answer per question".into());
    }
    if binomial(spec.vocab_chars, CLUSTER_SIZE) < spec.n_questions as u128 {
        return infeasible(format!(
            "{} questions need more distinct topic clusters than {} characters can form",
            spec.n_questions, spec.vocab_chars
        ));
    }
    let fractions_ok = |f: f64| (0.0..1.0).contains(&f);
    if !fractions_ok(spec.dev_fraction)
        || !fractions_ok(spec.test_fraction)
        || spec.dev_fraction + spec.test_fraction >= 1.0
    {
        return infeasible("dev and test fractions must be in [0, 1) and sum below 1".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let alphabet: Vec<char> = (0..spec.vocab_chars as u32)
        .map(|i| char::from_u32(ALPHABET_START + i).expect("CJK block is contiguous"))
        .collect();

    let mut used = BTreeSet::new();
    let mut clusters = Vec::with_capacity(spec.n_questions);
    while clusters.len() < spec.n_questions {
        let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, alphabet.len(), CLUSTER_SIZE).into_vec();
        idx.sort_unstable();
        if used.insert(idx.clone()) {
            clusters.push(idx.into_iter().map(|i| alphabet[i]).collect::<Vec<_>>());
        }
    }

    let text = |rng: &mut ChaCha8Rng, cluster: &[char], repeats: usize, filler: std::ops::RangeInclusive<usize>| {
        let mut chars: Vec<char> = cluster.iter().flat_map(|&c| std::iter::repeat_n(c, repeats)).collect();
        let n_fill = rng.gen_range(filler);
        chars.extend((0..n_fill).map(|_| alphabet[rng.gen_range(0..alphabet.len())]));
        chars.shuffle(rng);
        chars.into_iter().collect::<String>()
    };

    let mut questions = BTreeMap::new();
    let mut answers = BTreeMap::new();
    let mut next_answer = 1;
    for (i, cluster) in clusters.iter().enumerate() {
        let qid = i as QuestionId + 1;
        questions.insert(qid, text(&mut rng, cluster, 2, 2..=5));
        for _ in 0..spec.answers_per_question {
            let answer = Answer {
                text: text(&mut rng, cluster, 2, 3..=7),
                question: qid,
            };
            answers.insert(next_answer, answer);
            next_answer += 1;
        }
    }

    let mut order: Vec<QuestionId> = questions.keys().copied().collect();
    order.shuffle(&mut rng);
    let n = order.len();
    let n_dev = (n as f64 * spec.dev_fraction).round() as usize;
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let test = order.split_off(n - n_test);
    let dev = order.split_off(n - n_test - n_dev);
    let splits = Splits {
        train: order,
        dev,
        test,
    };
    Dataset::new(questions, answers, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SyntheticSpec::new(30, 2, 40, 7);
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a.questions().len(), 30);
        assert_eq!(a.answers().len(), 60);
        let s = a.splits();
        assert_eq!(s.train.len() + s.dev.len() + s.test.len(), 30);
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        assert_ne!(a, generate_synthetic(&SyntheticSpec::new(30, 2, 40, 8)).unwrap());
    }

    #[test]
    fn synthetic_rejects_infeasible() {
        assert!(generate_synthetic(&SyntheticSpec::new(5, 1, 9, 0)).is_err());
        // C(10, 3) = 120 clusters
        assert!(generate_synthetic(&SyntheticSpec::new(121, 1, 10, 0)).is_err());
        assert!(generate_synthetic(&SyntheticSpec::new(120, 1, 10, 0)).is_ok());
    }

    #[test]
    fn dataset_rejects_split_overlap() {
        let questions = BTreeMap::from([(1, "a".to_string())]);
        let answers = BTreeMap::from([(1, Answer { text: "b".into(), question: 1 })]);
        let splits = Splits {
            train: vec![1],
            dev: vec![1],
            test: vec![],
        };
        assert!(matches!(
            Dataset::new(questions, answers, splits),
            Err(DataError::SplitOverlap { id: 1, .. })
        ));
    }

    #[test]
    fn dataset_requires_answers_for_split_questions() {
        let questions = BTreeMap::from([(1, "a".to_string()), (2, "c".to_string())]);
        let answers = BTreeMap::from([(1, Answer { text: "b".into(), question: 1 })]);
        let splits = Splits {
            train: vec![1, 2],
            ..Splits::default()
        };
        assert!(matches!(Dataset::new(questions, answers, splits), Err(DataError::NoAnswers(2))));
    }
}
