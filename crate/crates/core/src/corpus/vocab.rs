use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::preprocess::{LAT, NUM};
use super::{CorpusError, SegmentedSentence};

pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";
pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";

/// Reserved symbols, in index order, at the head of the unigram and bigram
/// tables.
pub const RESERVED: [&str; 6] = [PAD, UNK, BOS, EOS, NUM, LAT];
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// Bigram symbol for an adjacent token pair.
pub fn bigram_key(left: &str, right: &str) -> String {
    let mut s = String::with_capacity(left.len() + right.len());
    s.push_str(left);
    s.push_str(right);
    s
}

/// The `T + 1` boundary-padded bigrams of a token sequence:
/// `(BOS, x1), (x1, x2), ..., (xT, EOS)`.
pub fn sentence_bigrams<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len() + 1);
    let mut prev = BOS;
    for t in tokens {
        out.push(bigram_key(prev, t.as_ref()));
        prev = t.as_ref();
    }
    if !tokens.is_empty() {
        out.push(bigram_key(prev, EOS));
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "SymbolTableRepr", into = "SymbolTableRepr")]
pub struct SymbolTable {
    symbols: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct SymbolTableRepr {
    symbols: Vec<String>,
    counts: Vec<u64>,
}

impl From<SymbolTableRepr> for SymbolTable {
    fn from(r: SymbolTableRepr) -> Self {
        let index = r.symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self {
            symbols: r.symbols,
            counts: r.counts,
            index,
        }
    }
}

impl From<SymbolTable> for SymbolTableRepr {
    fn from(t: SymbolTable) -> Self {
        Self {
            symbols: t.symbols,
            counts: t.counts,
        }
    }
}

impl SymbolTable {
    fn with_reserved() -> Self {
        let mut t = Self::default();
        for r in RESERVED {
            t.push(r.to_string(), 0);
        }
        t
    }

    fn push(&mut self, symbol: String, count: u64) -> usize {
        if let Some(&i) = self.index.get(&symbol) {
            self.counts[i] += count;
            return i;
        }
        let i = self.symbols.len();
        self.index.insert(symbol.clone(), i);
        self.symbols.push(symbol);
        self.counts.push(count);
        i
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn count(&self, index: usize) -> u64 {
        self.counts.get(index).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// `symbol<TAB>index<TAB>frequency` lines.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (i, (s, c)) in self.symbols.iter().zip(&self.counts).enumerate() {
            writeln!(out, "{s}\t{i}\t{c}")?;
        }
        Ok(())
    }
}

/// Symbol inventories for unigrams, bigrams and criteria.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub unigrams: SymbolTable,
    pub bigrams: SymbolTable,
    pub criteria: SymbolTable,
}

impl Vocab {
    /// Unigram index, falling back to UNK.
    pub fn unigram(&self, symbol: &str) -> usize {
        self.unigrams.get(symbol).unwrap_or(UNK_INDEX)
    }

    /// Bigram index, falling back to UNK.
    pub fn bigram(&self, symbol: &str) -> usize {
        self.bigrams.get(symbol).unwrap_or(UNK_INDEX)
    }

    pub fn criterion(&self, name: &str) -> Option<usize> {
        self.criteria.get(name)
    }

    pub fn criterion_names(&self) -> &[String] {
        self.criteria.symbols()
    }

    pub fn num_criteria(&self) -> usize {
        self.criteria.len()
    }

    pub fn add_criterion(&mut self, name: &str) -> Result<usize, CorpusError> {
        if self.criteria.get(name).is_some() {
            return Err(CorpusError::DuplicateCriterion(name.to_string()));
        }
        Ok(self.criteria.push(name.to_string(), 0))
    }

    /// Indices of the sentence's tokens and of its `T + 1` padded bigrams.
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> (Vec<usize>, Vec<usize>) {
        let uni = tokens.iter().map(|t| self.unigram(t.as_ref())).collect();
        let bi = sentence_bigrams(tokens).iter().map(|b| self.bigram(b)).collect();
        (uni, bi)
    }
}

/// One criterion's training sentences, as fed to [`build_vocab`].
pub struct VocabSource<'a> {
    pub criterion: &'a str,
    pub sentences: &'a [SegmentedSentence],
}

/// Builds the vocabulary from preprocessed training data.
///
/// Symbols at or above the frequency thresholds are kept, most frequent
/// first with ties in lexicographic order. Criteria are indexed in order of
/// first appearance.
pub fn build_vocab(
    sources: &[VocabSource<'_>],
    min_count_unigram: u64,
    min_count_bigram: u64,
) -> Result<Vocab, CorpusError> {
    if sources.is_empty() {
        return Err(CorpusError::NoCorpora);
    }
    let mut uni_counts: HashMap<String, u64> = HashMap::new();
    let mut bi_counts: HashMap<String, u64> = HashMap::new();
    let mut criteria = SymbolTable::default();
    for src in sources {
        criteria.push(src.criterion.to_string(), src.sentences.len() as u64);
        for s in src.sentences {
            let tokens = s.tokens();
            for t in &tokens {
                *uni_counts.entry(t.clone()).or_default() += 1;
            }
            for b in sentence_bigrams(&tokens) {
                *bi_counts.entry(b).or_default() += 1;
            }
        }
    }
    Ok(Vocab {
        unigrams: ranked_table(uni_counts, min_count_unigram),
        bigrams: ranked_table(bi_counts, min_count_bigram),
        criteria,
    })
}

fn ranked_table(counts: HashMap<String, u64>, min_count: u64) -> SymbolTable {
    let mut table = SymbolTable::with_reserved();
    let mut entries: Vec<(String, u64)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    for (s, c) in entries {
        table.push(s, c);
    }
    table
}
