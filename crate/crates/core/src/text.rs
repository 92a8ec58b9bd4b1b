//! Tokenization, vocabulary, labeled TSV corpora and embedding initialization.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use lama_autodiff::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LamaError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MIN_COUNT: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 256;

/// Lowercases, splits on Unicode whitespace and emits every character that is
/// neither alphanumeric nor whitespace as a standalone token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            flush(&mut word, &mut tokens);
            tokens.push(ch.to_lowercase().collect());
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

fn flush(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}

/// [`tokenize`] over raw bytes, rejecting invalid UTF-8.
pub fn tokenize_bytes(bytes: &[u8]) -> Result<Vec<String>> {
    Ok(tokenize(std::str::from_utf8(bytes)?))
}

/// Token ↔ id mapping with `<pad>` = 0 and `<unk>` = 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl Vocab {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// frequency and then lexicographically.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count == 0 {
            return Err(LamaError::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for doc in corpus {
            for tok in doc {
                *counts.entry(tok.as_ref().to_owned()).or_default() += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(LamaError::EmptyCorpus);
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = [PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()]
            .into_iter()
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| LamaError::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| LamaError::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path, min_count: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LamaError::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(LamaError::MalformedLine {
                path: path.into(),
                line: 1,
                reason: "vocabulary must start with <pad> and <unk>".into(),
            });
        }
        let vocab = Self::from_tokens(tokens, min_count);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(LamaError::MalformedLine {
                path: path.into(),
                line: 0,
                reason: "duplicate vocabulary entries".into(),
            });
        }
        Ok(vocab)
    }
}

/// Token ids truncated to `max_len` and padded with `<pad>` up to it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub true_len: usize,
}

pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocab, max_len: usize) -> Encoded {
    assert!(max_len >= 1, "max_len must be at least 1");
    let true_len = tokens.len().min(max_len);
    let mut ids: Vec<usize> = tokens[..true_len]
        .iter()
        .map(|t| vocab.id(t.as_ref()))
        .collect();
    ids.resize(max_len, PAD);
    Encoded { ids, true_len }
}

/// An encoded, labeled document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub ids: Vec<usize>,
    pub true_len: usize,
    pub label: usize,
}

impl Document {
    /// Valid (unpadded) token ids.
    pub fn valid_ids(&self) -> &[usize] {
        &self.ids[..self.true_len]
    }

    /// Copy re-padded (or trimmed past the valid prefix) to `len` positions.
    pub fn padded_to(&self, len: usize) -> Document {
        assert!(len >= self.true_len, "cannot pad below the true length");
        let mut ids = self.ids[..self.true_len].to_vec();
        ids.resize(len, PAD);
        Document {
            ids,
            true_len: self.true_len,
            label: self.label,
        }
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|t| t < self.true_len).collect()
    }
}

/// Class names in id order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn intern(&mut self, name: &str) -> usize {
        match self.id(name) {
            Some(i) => i,
            None => {
                self.names.push(name.to_owned());
                self.names.len() - 1
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<String>,
    pub label: usize,
}

/// Tokenized, labeled corpus.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub labels: LabelMap,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn documents(&self, vocab: &Vocab, max_len: usize) -> Vec<Document> {
        self.examples
            .iter()
            .map(|ex| {
                let Encoded { ids, true_len } = encode(&ex.tokens, vocab, max_len);
                Document {
                    ids,
                    true_len,
                    label: ex.label,
                }
            })
            .collect()
    }

    /// Builds a dataset from in-memory `(label, text)` pairs, assigning label
    /// ids by first appearance.
    pub fn from_pairs<L: AsRef<str>, T: AsRef<str>>(pairs: &[(L, T)], split: Split) -> Self {
        let mut labels = LabelMap::default();
        let examples = pairs
            .iter()
            .map(|(l, t)| Example {
                label: labels.intern(l.as_ref()),
                tokens: tokenize(t.as_ref()),
            })
            .collect();
        Self {
            examples,
            labels,
            split,
        }
    }
}

/// Reads `label<TAB>text` lines. Label ids follow first appearance, or the
/// given `labels` when present (unknown labels are then an error).
pub fn load_dataset(path: &Path, split: Split, labels: Option<&LabelMap>) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| LamaError::io(path, e))?;
    let mut map = labels.cloned().unwrap_or_default();
    let fixed = labels.is_some();
    let mut examples = Vec::new();
    let malformed = |line: usize, reason: String| LamaError::MalformedLine {
        path: path.into(),
        line,
        reason,
    };
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = i + 1;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        if raw.iter().all(|b| b.is_ascii_whitespace()) {
            continue;
        }
        let line = std::str::from_utf8(raw)
            .map_err(|e| malformed(line_no, format!("invalid UTF-8: {e}")))?;
        let Some((label, text)) = line.split_once('\t') else {
            return Err(malformed(line_no, "expected `label<TAB>text`".into()));
        };
        let label = label.trim();
        if label.is_empty() {
            return Err(malformed(line_no, "empty label".into()));
        }
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(malformed(line_no, "text has no tokens".into()));
        }
        let label = if fixed {
            map.id(label).ok_or_else(|| {
                LamaError::LabelMismatch(format!(
                    "{}:{line_no}: label `{label}` unknown to the model",
                    path.display()
                ))
            })?
        } else {
            map.intern(label)
        };
        examples.push(Example { tokens, label });
    }
    Ok(Dataset {
        examples,
        labels: map,
        split,
    })
}

pub enum EmbeddingSource<'a> {
    Random,
    /// Text vectors, one `token v1 … vd` per line; an optional `count dim`
    /// header line is skipped.
    Pretrained(&'a Path),
}

pub struct EmbeddingInit<F> {
    pub matrix: Tensor<F>,
    /// Fraction of non-reserved vocabulary rows copied from the file.
    pub coverage: f64,
}

/// `|V| × d` embedding matrix. Uniform(−0.1, 0.1) fill, `<pad>` row zeroed.
pub fn init_embeddings<F: Scalar, R: Rng + ?Sized>(
    vocab: &Vocab,
    d: usize,
    source: EmbeddingSource<'_>,
    rng: &mut R,
) -> Result<EmbeddingInit<F>> {
    if d == 0 {
        return Err(LamaError::Config("embedding dimension must be positive".into()));
    }
    let mut matrix = Tensor::from_fn(vocab.len(), d, |_, _| F::of(rng.random_range(-0.1..0.1)));
    let mut coverage = 0.0;
    if let EmbeddingSource::Pretrained(path) = source {
        let text = fs::read_to_string(path).map_err(|e| LamaError::io(path, e))?;
        let mut covered = vec![false; vocab.len()];
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                continue;
            }
            if fields.len() != d + 1 {
                return Err(LamaError::Dimension(format!(
                    "{}:{}: expected {d} values, found {}",
                    path.display(),
                    i + 1,
                    fields.len() - 1
                )));
            }
            let Some(id) = vocab.get(fields[0]) else {
                continue;
            };
            if id == PAD || id == UNK {
                continue;
            }
            let row: Vec<F> = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map(F::of).map_err(|e| LamaError::MalformedLine {
                        path: path.into(),
                        line: i + 1,
                        reason: format!("bad float `{f}`: {e}"),
                    })
                })
                .collect::<Result<_>>()?;
            matrix.row_mut(id).copy_from_slice(&row);
            covered[id] = true;
        }
        let real = vocab.len().saturating_sub(2);
        if real > 0 {
            coverage = covered.iter().filter(|&&c| c).count() as f64 / real as f64;
        }
    }
    matrix.row_mut(PAD).fill(F::zero());
    Ok(EmbeddingInit { matrix, coverage })
}
