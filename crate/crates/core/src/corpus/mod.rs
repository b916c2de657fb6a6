//! Corpus reading, preprocessing, BMES labelling and vocabularies.
//!
//! Corpus files use the bakeoff layout: UTF-8, one sentence per line, words
//! separated by spaces.

mod labels;
mod preprocess;
mod vocab;

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use labels::{bmes_to_words, is_well_formed, labels_for_lengths, word_lengths, words_to_bmes, Label};
pub use preprocess::{
    is_clause_punctuation, normalize_width, replace_runs, split_clauses, token_symbols, Token, CLAUSE_PUNCTUATION,
    LAT, NUM,
};
pub use vocab::{
    bigram_key, build_vocab, sentence_bigrams, SymbolTable, Vocab, VocabSource, BOS, EOS, PAD, PAD_INDEX, RESERVED,
    UNK, UNK_INDEX,
};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("empty word")]
    EmptyWord,
    #[error("{chars} characters but {labels} labels")]
    LengthMismatch { chars: usize, labels: usize },
    #[error("malformed label sequence")]
    MalformedLabels,
    #[error("no corpora given")]
    NoCorpora,
    #[error("corpus has {0} sentences, at least 10 are needed for a dev split")]
    TooSmall(usize),
    #[error("criterion {0} already exists")]
    DuplicateCriterion(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A preprocessed sentence as a list of words, each a list of token symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedSentence {
    words: Vec<Vec<String>>,
}

impl SegmentedSentence {
    /// Normalises and tokenises one segmented line. Returns `None` for blank
    /// lines.
    pub fn parse(line: &str) -> Option<Self> {
        let normalized = normalize_width(line);
        let words: Vec<Vec<String>> = normalized.split_whitespace().map(token_symbols).collect();
        if words.is_empty() {
            None
        } else {
            Some(Self { words })
        }
    }

    pub fn from_words(words: Vec<Vec<String>>) -> Result<Self, CorpusError> {
        if words.is_empty() || words.iter().any(Vec::is_empty) {
            return Err(CorpusError::EmptyWord);
        }
        Ok(Self { words })
    }

    pub fn words(&self) -> &[Vec<String>] {
        &self.words
    }

    /// Words with their tokens concatenated.
    pub fn word_strings(&self) -> Vec<String> {
        self.words.iter().map(|w| w.concat()).collect()
    }

    pub fn tokens(&self) -> Vec<String> {
        self.words.iter().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word_lengths(&self) -> Vec<usize> {
        self.words.iter().map(Vec::len).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        labels_for_lengths(&self.word_lengths()).expect("words are non-empty")
    }

    pub fn to_line(&self) -> String {
        self.word_strings().join(" ")
    }

    pub fn split_clauses(&self) -> Vec<SegmentedSentence> {
        let strings = self.word_strings();
        let mut out = Vec::new();
        let mut current = Vec::new();
        for (w, s) in self.words.iter().zip(&strings) {
            current.push(w.clone());
            if is_clause_punctuation(s) {
                out.push(SegmentedSentence {
                    words: std::mem::take(&mut current),
                });
            }
        }
        if !current.is_empty() {
            out.push(SegmentedSentence { words: current });
        }
        out
    }

    pub fn labeled(&self, criterion: usize) -> LabeledSentence {
        LabeledSentence {
            tokens: self.tokens(),
            labels: self.labels(),
            criterion,
        }
    }
}

/// Token sequence with its gold BMES labels under one criterion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSentence {
    tokens: Vec<String>,
    labels: Vec<Label>,
    criterion: usize,
}

impl LabeledSentence {
    pub fn new(tokens: Vec<String>, labels: Vec<Label>, criterion: usize) -> Result<Self, CorpusError> {
        if tokens.len() != labels.len() {
            return Err(CorpusError::LengthMismatch {
                chars: tokens.len(),
                labels: labels.len(),
            });
        }
        if !is_well_formed(&labels) {
            return Err(CorpusError::MalformedLabels);
        }
        Ok(Self {
            tokens,
            labels,
            criterion,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn criterion(&self) -> usize {
        self.criterion
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> Vec<String> {
        bmes_to_words(&self.tokens, &self.labels)
            .expect("lengths checked")
            .into_iter()
            .map(|w| w.concat())
            .collect()
    }
}

/// A named corpus of raw segmented lines under one criterion.
#[derive(Clone, Debug)]
pub struct RawCorpus {
    pub name: String,
    pub criterion: String,
    pub lines: Vec<String>,
}

impl RawCorpus {
    pub fn read(name: &str, criterion: &str, path: &Path) -> Result<Self, CorpusError> {
        Ok(Self {
            name: name.to_string(),
            criterion: criterion.to_string(),
            lines: read_lines(path)?,
        })
    }

    /// Preprocessed sentences; training and dev data are clause-split.
    pub fn sentences(&self, clause_split: bool) -> Vec<SegmentedSentence> {
        prepare_lines(&self.lines, clause_split)
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text.lines().map(|l| l.trim_start_matches('\u{feff}').to_string()).collect())
}

/// Normalises and tokenises segmented lines, dropping blank ones.
pub fn prepare_lines<S: AsRef<str>>(lines: &[S], clause_split: bool) -> Vec<SegmentedSentence> {
    lines
        .iter()
        .filter_map(|l| SegmentedSentence::parse(l.as_ref()))
        .flat_map(|s| if clause_split { s.split_clauses() } else { vec![s] })
        .collect()
}

/// Seeded random split with `floor(n * ratio)` (at least one) items held out.
/// Both halves keep their original relative order.
pub fn split_train_dev<T>(items: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), CorpusError> {
    let n = items.len();
    if n < 10 {
        return Err(CorpusError::TooSmall(n));
    }
    let dev_n = (((n as f64) * ratio + 1e-9).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_dev = vec![false; n];
    for &i in &order[..dev_n] {
        is_dev[i] = true;
    }
    let mut train = Vec::with_capacity(n - dev_n);
    let mut dev = Vec::with_capacity(dev_n);
    for (item, d) in items.into_iter().zip(is_dev) {
        if d {
            dev.push(item);
        } else {
            train.push(item);
        }
    }
    Ok((train, dev))
}

/// Distinct words (token strings) of a training split.
pub fn training_word_set(sentences: &[SegmentedSentence]) -> HashSet<String> {
    sentences.iter().flat_map(|s| s.word_strings()).collect()
}

/// Size statistics of one corpus split.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub words: usize,
    pub chars: usize,
    pub word_types: usize,
    pub char_types: usize,
    /// Share of word tokens unseen in the training split (test splits only).
    pub oov_rate: Option<f64>,
}

pub fn corpus_stats(sentences: &[SegmentedSentence], training_words: Option<&HashSet<String>>) -> CorpusStats {
    let mut words = 0;
    let mut chars = 0;
    let mut oov = 0;
    let mut word_types = HashSet::new();
    let mut char_types = HashSet::new();
    for s in sentences {
        for (w, toks) in s.word_strings().into_iter().zip(s.words()) {
            words += 1;
            chars += toks.len();
            char_types.extend(toks.iter().cloned());
            if training_words.is_some_and(|t| !t.contains(&w)) {
                oov += 1;
            }
            word_types.insert(w);
        }
    }
    CorpusStats {
        words,
        chars,
        word_types: word_types.len(),
        char_types: char_types.len(),
        oov_rate: training_words.map(|_| if words == 0 { 0.0 } else { oov as f64 / words as f64 }),
    }
}
