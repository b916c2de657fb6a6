use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Position of a character inside its word. The declaration order is the
/// label index order used everywhere (B < M < E < S).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    B,
    M,
    E,
    S,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::B, Label::M, Label::E, Label::S];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_char(self) -> char {
        match self {
            Label::B => 'B',
            Label::M => 'M',
            Label::E => 'E',
            Label::S => 'S',
        }
    }
}

/// BMES labels for words of the given lengths (in tokens).
pub fn labels_for_lengths(lengths: &[usize]) -> Result<Vec<Label>, CorpusError> {
    let mut out = Vec::with_capacity(lengths.iter().sum());
    for &n in lengths {
        match n {
            0 => return Err(CorpusError::EmptyWord),
            1 => out.push(Label::S),
            _ => {
                out.push(Label::B);
                out.extend(std::iter::repeat(Label::M).take(n - 2));
                out.push(Label::E);
            }
        }
    }
    Ok(out)
}

/// BMES labels for words given as strings, one label per character.
pub fn words_to_bmes<S: AsRef<str>>(words: &[S]) -> Result<Vec<Label>, CorpusError> {
    let lengths: Vec<usize> = words.iter().map(|w| w.as_ref().chars().count()).collect();
    labels_for_lengths(&lengths)
}

/// Word lengths encoded by a label sequence.
///
/// Malformed sequences are repaired: a boundary goes before every B and S and
/// after every E and S, and a word still open at the end is closed there.
pub fn word_lengths(labels: &[Label]) -> Vec<usize> {
    let mut lengths = Vec::new();
    let mut current = 0;
    for (i, &l) in labels.iter().enumerate() {
        let opens = matches!(l, Label::B | Label::S);
        let prev_closes = i > 0 && matches!(labels[i - 1], Label::E | Label::S);
        if current > 0 && (opens || prev_closes) {
            lengths.push(current);
            current = 0;
        }
        current += 1;
    }
    if current > 0 {
        lengths.push(current);
    }
    lengths
}

/// Groups `items` into words according to `labels` (see [`word_lengths`]).
pub fn bmes_to_words<T: Clone>(items: &[T], labels: &[Label]) -> Result<Vec<Vec<T>>, CorpusError> {
    if items.len() != labels.len() {
        return Err(CorpusError::LengthMismatch {
            chars: items.len(),
            labels: labels.len(),
        });
    }
    let mut out = Vec::new();
    let mut start = 0;
    for n in word_lengths(labels) {
        out.push(items[start..start + n].to_vec());
        start += n;
    }
    Ok(out)
}

/// Whether the sequence obeys the BMES grammar.
pub fn is_well_formed(labels: &[Label]) -> bool {
    if labels.is_empty() {
        return false;
    }
    let mut inside = false;
    for &l in labels {
        match (inside, l) {
            (false, Label::B) => inside = true,
            (false, Label::S) => {}
            (true, Label::M) => {}
            (true, Label::E) => inside = false,
            _ => return false,
        }
    }
    !inside
}
