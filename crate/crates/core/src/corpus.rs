//! Bag-of-words corpora over a fixed vocabulary.
//!
//! Vocabulary files hold one token per line. Corpus files hold one document
//! per line, an optional `label<TAB>` prefix followed by space-separated
//! zero-based `id:count` pairs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty vocabulary")]
    EmptyVocabulary,
    #[error("vocabulary needs at least 2 tokens, found {0}")]
    VocabularyTooSmall(usize),
    #[error("duplicate token '{token}' at line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("line {line}: word id {id} out of range (V={vocab})")]
    IdOutOfRange { line: usize, id: usize, vocab: usize },
    #[error("line {line}: count must be positive, got {count}")]
    NonPositiveCount { line: usize, count: i64 },
    #[error("line {line}: malformed entry '{entry}'")]
    Malformed { line: usize, entry: String },
    #[error("line {line}: word id {id} listed twice")]
    RepeatedId { line: usize, id: usize },
    #[error("corpus has no documents")]
    NoDocuments,
    #[error("document {index} is empty; training documents need N >= 1")]
    EmptyTrainingDocument { index: usize },
    #[error("invalid split manifest: {0}")]
    BadManifest(String),
    #[error("requested {requested} classes but the corpus has {available} labels")]
    NotEnoughClasses { requested: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(CorpusError::EmptyVocabulary);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(CorpusError::DuplicateToken {
                    token: tok.clone(),
                    line: i + 1,
                });
            }
        }
        if tokens.len() < 2 {
            return Err(CorpusError::VocabularyTooSmall(tokens.len()));
        }
        Ok(Self { tokens, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        // A trailing newline does not introduce an empty token, but an
        // entirely blank file is an empty vocabulary.
        if tokens.iter().all(|t| t.is_empty()) {
            return Err(CorpusError::EmptyVocabulary);
        }
        Self::new(tokens)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Placeholder vocabulary `w0, w1, ...` for synthetic corpora.
    pub fn numbered(size: usize) -> Result<Self> {
        Self::new((0..size).map(|i| format!("w{i}")).collect())
    }
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary> {
    Vocabulary::parse(&read_file(path.as_ref())?)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BowDocument {
    entries: Vec<(usize, u32)>,
    label: Option<String>,
}

impl BowDocument {
    /// Builds a document from `(word_id, count)` pairs, sorting by id.
    /// Zero counts are dropped; repeated ids are merged.
    pub fn from_counts(mut entries: Vec<(usize, u32)>, label: Option<String>) -> Self {
        entries.retain(|&(_, c)| c > 0);
        entries.sort_unstable_by_key(|&(id, _)| id);
        let mut merged: Vec<(usize, u32)> = Vec::with_capacity(entries.len());
        for (id, c) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == id => last.1 += c,
                _ => merged.push((id, c)),
            }
        }
        Self { entries: merged, label }
    }

    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    /// Total token count N.
    pub fn len(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dense count vector of length `vocab`.
    pub fn count_vector(&self, vocab: usize) -> Vec<f64> {
        let mut v = vec![0.0; vocab];
        self.scatter_into(&mut v);
        v
    }

    pub(crate) fn scatter_into(&self, row: &mut [f64]) {
        for &(id, c) in &self.entries {
            row[id] = c as f64;
        }
    }

    fn write_line(&self, out: &mut String) {
        if let Some(label) = &self.label {
            out.push_str(label);
            out.push('\t');
        }
        for (i, (id, c)) in self.entries.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{id}:{c}");
        }
        out.push('\n');
    }
}

pub fn count_vector(doc: &BowDocument, vocab: usize) -> Vec<f64> {
    doc.count_vector(vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<BowDocument>,
    pub vocabulary: Vocabulary,
    pub split: Split,
}

/// Non-fatal observations made while loading.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub blank_lines_skipped: usize,
    pub unsorted_documents: usize,
}

impl Corpus {
    pub fn new(documents: Vec<BowDocument>, vocabulary: Vocabulary, split: Split) -> Result<Self> {
        if documents.is_empty() {
            return Err(CorpusError::NoDocuments);
        }
        let v = vocabulary.size();
        for (i, doc) in documents.iter().enumerate() {
            if let Some(&(id, _)) = doc.entries.iter().find(|&&(id, _)| id >= v) {
                return Err(CorpusError::IdOutOfRange {
                    line: i + 1,
                    id,
                    vocab: v,
                });
            }
        }
        Ok(Self {
            documents,
            vocabulary,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.size()
    }

    pub fn total_tokens(&self) -> u64 {
        self.documents.iter().map(BowDocument::len).sum()
    }

    pub fn ensure_trainable(&self) -> Result<()> {
        match self.documents.iter().position(BowDocument::is_empty) {
            Some(index) => Err(CorpusError::EmptyTrainingDocument { index }),
            None => Ok(()),
        }
    }

    /// Dense `[rows.len() x V]` count matrix in row-major order.
    pub fn count_matrix(&self, rows: &[usize]) -> Vec<f64> {
        let v = self.vocab_size();
        let mut out = vec![0.0; rows.len() * v];
        for (r, &d) in rows.iter().enumerate() {
            self.documents[d].scatter_into(&mut out[r * v..(r + 1) * v]);
        }
        out
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let documents = indices.iter().map(|&i| self.documents[i].clone()).collect();
        Corpus::new(documents, self.vocabulary.clone(), split)
    }

    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.documents.iter().filter_map(|d| d.label.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    /// Documents whose label is among the first `n` labels in sorted order.
    /// Nested by construction: the `n`-class subset contains the `n−1`-class one.
    pub fn class_subset(&self, n: usize) -> Result<Self> {
        let labels = self.labels();
        if n == 0 || n > labels.len() {
            return Err(CorpusError::NotEnoughClasses {
                requested: n,
                available: labels.len(),
            });
        }
        let keep = &labels[..n];
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| self.documents[i].label().is_some_and(|l| keep.iter().any(|k| k == l)))
            .collect();
        self.subset(&indices, self.split)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for doc in &self.documents {
            doc.write_line(&mut out);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.serialize()).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn parse_line(line: &str, lineno: usize, vocab: usize) -> Result<(BowDocument, bool)> {
    let (label, body) = match line.split_once('\t') {
        Some((l, b)) => (Some(l.to_string()), b),
        None => (None, line),
    };
    let mut entries = Vec::new();
    for entry in body.split_whitespace() {
        let malformed = || CorpusError::Malformed {
            line: lineno,
            entry: entry.to_string(),
        };
        let (id, count) = entry.split_once(':').ok_or_else(malformed)?;
        let id: usize = id.parse().map_err(|_| malformed())?;
        let count: i64 = count.parse().map_err(|_| malformed())?;
        if id >= vocab {
            return Err(CorpusError::IdOutOfRange {
                line: lineno,
                id,
                vocab,
            });
        }
        if count <= 0 {
            return Err(CorpusError::NonPositiveCount { line: lineno, count });
        }
        let count = u32::try_from(count).map_err(|_| malformed())?;
        entries.push((id, count));
    }
    let sorted = entries.windows(2).all(|w| w[0].0 < w[1].0);
    if !sorted {
        entries.sort_unstable_by_key(|&(id, _)| id);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(CorpusError::RepeatedId {
                line: lineno,
                id: w[0].0,
            });
        }
    }
    Ok((BowDocument { entries, label }, !sorted))
}

pub fn parse_bow(text: &str, vocab: &Vocabulary, split: Split) -> Result<(Corpus, LoadReport)> {
    let mut docs = Vec::new();
    let mut report = LoadReport::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            report.blank_lines_skipped += 1;
            continue;
        }
        let (doc, was_unsorted) = parse_line(line, i + 1, vocab.size())?;
        if was_unsorted {
            report.unsorted_documents += 1;
        }
        docs.push(doc);
    }
    if report.blank_lines_skipped > 0 {
        log::warn!("skipped {} blank line(s)", report.blank_lines_skipped);
    }
    Ok((Corpus::new(docs, vocab.clone(), split)?, report))
}

pub fn load_bow(path: impl AsRef<Path>, vocab: &Vocabulary, split: Split) -> Result<(Corpus, LoadReport)> {
    parse_bow(&read_file(path.as_ref())?, vocab, split)
}

/// Reproducible index split persisted alongside a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    /// Shuffles `0..n` with `seed` and carves off the valid and test fractions.
    pub fn random(n: usize, seed: u64, valid_fraction: f64, test_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&valid_fraction)
            || !(0.0..1.0).contains(&test_fraction)
            || valid_fraction + test_fraction >= 1.0
        {
            return Err(CorpusError::BadManifest(format!(
                "fractions valid={valid_fraction} test={test_fraction} must be in [0,1) and sum below 1"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = crate::seeding::stream(seed, crate::seeding::SPLIT);
        idx.shuffle(&mut rng);
        let n_valid = (n as f64 * valid_fraction).round() as usize;
        let n_test = (n as f64 * test_fraction).round() as usize;
        let valid = idx[..n_valid].to_vec();
        let test = idx[n_valid..n_valid + n_test].to_vec();
        let train = idx[n_valid + n_test..].to_vec();
        if train.is_empty() {
            return Err(CorpusError::BadManifest("training split is empty".into()));
        }
        Ok(Self {
            seed,
            train,
            valid,
            test,
        })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.valid).chain(&self.test) {
            if i >= n {
                return Err(CorpusError::BadManifest(format!(
                    "index {i} outside corpus of {n} documents"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(CorpusError::BadManifest(format!("index {i} appears twice")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = read_file(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| CorpusError::BadManifest(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("manifest serializes");
        fs::write(path, text).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
