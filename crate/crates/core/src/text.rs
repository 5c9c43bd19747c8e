//! Character vocabulary, fixed-length sequence encoding and input embeddings.

use std::collections::HashMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Smallest usable sequence length: `[CLS]`, `[SEP]` and one content slot.
pub const MIN_SEQ_LEN: usize = 3;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("sequence length {0} is below the minimum of {MIN_SEQ_LEN}")]
    SeqLen(usize),
    #[error("vocabulary line {line}: {reason}")]
    VocabFormat { line: usize, reason: String },
    #[error("embedding lookup: {0}")]
    Lookup(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Character to id table. Ids `0..4` are reserved for `[PAD] [UNK] [CLS] [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<char, usize>,
    chars: Vec<char>,
}

impl Vocabulary {
    /// One id per distinct character in first-seen order.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self, TextError> {
        if corpus.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut vocab = Self {
            ids: HashMap::new(),
            chars: Vec::new(),
        };
        for text in corpus {
            for c in text.as_ref().chars() {
                vocab.insert(c);
            }
        }
        Ok(vocab)
    }

    fn insert(&mut self, c: char) -> usize {
        let next = RESERVED.len() + self.chars.len();
        *self.ids.entry(c).or_insert_with(|| {
            self.chars.push(c);
            next
        })
    }

    /// Number of ids including the reserved ones.
    pub fn len(&self) -> usize {
        RESERVED.len() + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.ids.get(&c).copied().unwrap_or(UNK)
    }

    /// The character for a non-reserved id.
    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED.len()).and_then(|i| self.chars.get(i).copied())
    }

    /// Serialized form: one `id<TAB>entry` line per id, reserved entries first.
    /// Tab, newline, carriage return and backslash are backslash-escaped.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, tok) in RESERVED.iter().enumerate() {
            let _ = writeln!(out, "{id}\t{tok}");
        }
        for (i, c) in self.chars.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}", i + RESERVED.len(), escape(*c));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TextError> {
        let mut vocab = Self {
            ids: HashMap::new(),
            chars: Vec::new(),
        };
        let mut count = 0;
        for (i, line) in text.lines().enumerate() {
            let err = |reason: String| TextError::VocabFormat { line: i + 1, reason };
            let (id, entry) = line.split_once('\t').ok_or_else(|| err("missing tab".into()))?;
            let id: usize = id.parse().map_err(|_| err(format!("bad id {id:?}")))?;
            if id != i {
                return Err(err(format!("expected id {i}, found {id}")));
            }
            if i < RESERVED.len() {
                if entry != RESERVED[i] {
                    return Err(err(format!("expected reserved entry {}", RESERVED[i])));
                }
            } else {
                let c = unescape(entry).ok_or_else(|| err(format!("bad entry {entry:?}")))?;
                if vocab.ids.contains_key(&c) {
                    return Err(err(format!("duplicate character {c:?}")));
                }
                vocab.insert(c);
            }
            count += 1;
        }
        if count < RESERVED.len() {
            return Err(TextError::VocabFormat {
                line: count + 1,
                reason: "reserved entries missing".into(),
            });
        }
        Ok(vocab)
    }

    /// SHA-256 of the serialized vocabulary.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

fn escape(c: char) -> String {
    match c {
        '\t' => "\\t".into(),
        '\n' => "\\n".into(),
        '\r' => "\\r".into(),
        '\\' => "\\\\".into(),
        c => c.to_string(),
    }
}

fn unescape(s: &str) -> Option<char> {
    match s {
        "\\t" => Some('\t'),
        "\\n" => Some('\n'),
        "\\r" => Some('\r'),
        "\\\\" => Some('\\'),
        _ => {
            let mut it = s.chars();
            let c = it.next()?;
            it.next().is_none().then_some(c)
        }
    }
}

/// One sentence as fixed-length id lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub useful_mask: Vec<u8>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn useful_count(&self) -> usize {
        self.useful_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Mask as `0.0`/`1.0` weights.
    pub fn mask_weights(&self) -> Vec<f64> {
        self.useful_mask.iter().map(|&m| f64::from(m)).collect()
    }

    /// Same tokens with every segment id set to `segment`.
    pub fn with_segment(mut self, segment: usize) -> Self {
        self.segment_ids.iter_mut().for_each(|s| *s = segment);
        self
    }
}

/// `[CLS] chars... [SEP] [PAD]...`, truncating content to `len - 2` characters.
pub fn encode(text: &str, vocab: &Vocabulary, len: usize) -> Result<EncodedSequence, TextError> {
    if len < MIN_SEQ_LEN {
        return Err(TextError::SeqLen(len));
    }
    let mut token_ids = Vec::with_capacity(len);
    token_ids.push(CLS);
    token_ids.extend(text.chars().take(len - 2).map(|c| vocab.id(c)));
    token_ids.push(SEP);
    token_ids.resize(len, PAD);
    let useful_mask = token_ids.iter().map(|&t| u8::from(t != PAD)).collect();
    Ok(EncodedSequence {
        token_ids,
        segment_ids: vec![0; len],
        position_ids: (0..len).collect(),
        useful_mask,
    })
}

/// Token, segment and position tables, each `rows x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub token: Tensor,
    pub segment: Tensor,
    pub position: Tensor,
}

/// Embedding tables registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub token: Var,
    pub segment: Var,
    pub position: Var,
}

impl EmbeddingTables {
    pub fn dim(&self) -> usize {
        self.token.shape()[1]
    }

    /// Evaluates [`embed`] on a scratch tape.
    pub fn embed(&self, seq: &EncodedSequence) -> Result<Tensor, TextError> {
        let mut tape = Tape::new();
        let vars = EmbeddingVars {
            token: tape.constant(self.token.clone()),
            segment: tape.constant(self.segment.clone()),
            position: tape.constant(self.position.clone()),
        };
        let out = embed(&mut tape, seq, &vars)?;
        Ok(tape.value(out).clone())
    }
}

/// Row `i` is `token[token_ids[i]] + segment[segment_ids[i]] + position[i]`.
pub fn embed(tape: &mut Tape, seq: &EncodedSequence, tables: &EmbeddingVars) -> Result<Var, TextError> {
    let lookup = |tape: &Tape, table: Var, ids: &[usize], what: &str| -> Result<(), TextError> {
        let rows = tape.shape(table)[0];
        match ids.iter().find(|&&id| id >= rows) {
            Some(id) => Err(TextError::Lookup(format!(
                "{what} id {id} out of range for table with {rows} rows"
            ))),
            None => Ok(()),
        }
    };
    lookup(tape, tables.token, &seq.token_ids, "token")?;
    lookup(tape, tables.segment, &seq.segment_ids, "segment")?;
    lookup(tape, tables.position, &seq.position_ids, "position")?;
    let tok = tape.gather_rows(tables.token, &seq.token_ids)?;
    let seg = tape.gather_rows(tables.segment, &seq.segment_ids)?;
    let pos = tape.gather_rows(tables.position, &seq.position_ids)?;
    let sum = tape.add(tok, seg)?;
    Ok(tape.add(sum, pos)?)
}
