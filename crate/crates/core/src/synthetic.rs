//! Deterministic synthetic corpora under three mutually disagreeing
//! criteria.
//!
//! * `A` keeps every digit run as one word and every other character alone.
//! * `B` additionally merges character pairs from a fixed 50-pair dictionary,
//!   greedily from left to right.
//! * `C` does the same with a different 50-pair dictionary that shares most
//!   of its entries with `B`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Size of the default alphabet: every seventh code point from U+4E00.
pub const ALPHABET_SIZE: u32 = 200;

pub fn default_alphabet() -> String {
    (0..ALPHABET_SIZE)
        .map(|i| char::from_u32(0x4E00 + 7 * i).expect("CJK code point"))
        .collect()
}

pub const DICTIONARY_SIZE: usize = 50;

/// Shape of the generated text.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteParams {
    pub alphabet: String,
    /// Entries of `C`'s dictionary that also belong to `B`'s.
    pub shared_pairs: usize,
    pub min_pieces: usize,
    pub max_pieces: usize,
    /// Probability that a piece is a planted dictionary pair.
    pub pair_rate: f64,
    /// Probability that a piece is a digit run.
    pub digit_rate: f64,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            alphabet: default_alphabet(),
            shared_pairs: 45,
            min_pieces: 2,
            max_pieces: 5,
            pair_rate: 0.15,
            digit_rate: 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SynthCriterion {
    A,
    B,
    C,
}

impl SynthCriterion {
    pub const ALL: [SynthCriterion; 3] = [SynthCriterion::A, SynthCriterion::B, SynthCriterion::C];

    pub fn name(self) -> &'static str {
        match self {
            SynthCriterion::A => "A",
            SynthCriterion::B => "B",
            SynthCriterion::C => "C",
        }
    }
}

impl std::str::FromStr for SynthCriterion {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(SynthCriterion::A),
            "B" | "b" => Ok(SynthCriterion::B),
            "C" | "c" => Ok(SynthCriterion::C),
            _ => Err(crate::Error::Config(format!("unknown synthetic criterion {s}"))),
        }
    }
}

/// The generator with its two pair dictionaries.
#[derive(Clone, Debug)]
pub struct SyntheticSuite {
    params: SuiteParams,
    alphabet: Vec<char>,
    dict_b: Vec<(char, char)>,
    dict_c: Vec<(char, char)>,
    set_b: HashSet<(char, char)>,
    set_c: HashSet<(char, char)>,
    /// Pairs the generator plants as units: the union of both dictionaries.
    planted: Vec<(char, char)>,
}

impl Default for SyntheticSuite {
    fn default() -> Self {
        Self::new()
    }
}

impl SyntheticSuite {
    /// The fixed suite; dictionaries never change between releases.
    pub fn new() -> Self {
        Self::with_params(SuiteParams::default())
    }

    pub fn with_params(params: SuiteParams) -> Self {
        let alphabet: Vec<char> = params.alphabet.chars().collect();
        let shared = params.shared_pairs.min(DICTIONARY_SIZE);
        let mut pairs: Vec<(char, char)> = alphabet
            .iter()
            .flat_map(|&a| alphabet.iter().filter(move |&&b| b != a).map(move |&b| (a, b)))
            .collect();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5EED));
        let dict_b: Vec<(char, char)> = pairs[..DICTIONARY_SIZE].to_vec();
        let mut dict_c: Vec<(char, char)> = dict_b[..shared].to_vec();
        dict_c.extend_from_slice(&pairs[DICTIONARY_SIZE..2 * DICTIONARY_SIZE - shared]);
        let set_b: HashSet<_> = dict_b.iter().copied().collect();
        let set_c: HashSet<_> = dict_c.iter().copied().collect();
        let mut planted = dict_b.clone();
        planted.extend(dict_c[shared..].iter().copied());
        Self {
            params,
            alphabet,
            dict_b,
            dict_c,
            set_b,
            set_c,
            planted,
        }
    }

    pub fn dictionary(&self, criterion: SynthCriterion) -> &[(char, char)] {
        match criterion {
            SynthCriterion::A => &[],
            SynthCriterion::B => &self.dict_b,
            SynthCriterion::C => &self.dict_c,
        }
    }

    /// One raw sentence of `min_pieces..=max_pieces` pieces: planted
    /// dictionary pairs, single characters and digit runs of 1 to 4 digits.
    pub fn sentence<R: Rng>(&self, rng: &mut R) -> String {
        let p = &self.params;
        let pieces = rng.gen_range(p.min_pieces..=p.max_pieces);
        let mut out = String::new();
        for _ in 0..pieces {
            let roll: f64 = rng.gen();
            if roll < p.pair_rate {
                let (a, b) = self.planted[rng.gen_range(0..self.planted.len())];
                out.push(a);
                out.push(b);
            } else if roll < 1.0 - p.digit_rate {
                out.push(self.alphabet[rng.gen_range(0..self.alphabet.len())]);
            } else {
                for _ in 0..rng.gen_range(1..=4) {
                    out.push(char::from(b'0' + rng.gen_range(0..10u8)));
                }
            }
        }
        out
    }

    /// Gold words of `text` under a criterion.
    pub fn segment(&self, text: &str, criterion: SynthCriterion) -> Vec<String> {
        let mut units: Vec<String> = Vec::new();
        for c in text.chars().filter(|c| !c.is_whitespace()) {
            match units.last_mut() {
                Some(last) if c.is_ascii_digit() && last.chars().all(|d| d.is_ascii_digit()) => last.push(c),
                _ => units.push(c.to_string()),
            }
        }
        let dict = match criterion {
            SynthCriterion::A => return units,
            SynthCriterion::B => &self.set_b,
            SynthCriterion::C => &self.set_c,
        };
        let single = |u: &str| {
            let mut it = u.chars();
            match (it.next(), it.next()) {
                (Some(c), None) if !c.is_ascii_digit() => Some(c),
                _ => None,
            }
        };
        let mut words = Vec::with_capacity(units.len());
        let mut i = 0;
        while i < units.len() {
            if i + 1 < units.len() {
                if let (Some(a), Some(b)) = (single(&units[i]), single(&units[i + 1])) {
                    if dict.contains(&(a, b)) {
                        words.push(format!("{a}{b}"));
                        i += 2;
                        continue;
                    }
                }
            }
            words.push(units[i].clone());
            i += 1;
        }
        words
    }

    /// `n` raw sentences from a seed.
    pub fn raw_sentences(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sentence(&mut rng)).collect()
    }

    /// `n` space-separated segmented lines under a criterion.
    pub fn corpus(&self, criterion: SynthCriterion, n: usize, seed: u64) -> Vec<String> {
        self.raw_sentences(n, seed)
            .iter()
            .map(|s| self.segment(s, criterion).join(" "))
            .collect()
    }

    /// Raw sentences on which two criteria produce different words.
    pub fn disagreements(&self, first: SynthCriterion, second: SynthCriterion, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let s = self.sentence(&mut rng);
            if self.segment(&s, first) != self.segment(&s, second) {
                out.push(s);
            }
        }
        out
    }
}
