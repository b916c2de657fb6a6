//! Text normalisation applied to every corpus before labelling.

/// Placeholder token for a maximal run of ASCII digits.
pub const NUM: &str = "<NUM>";
/// Placeholder token for a maximal run of ASCII letters.
pub const LAT: &str = "<LAT>";

/// Maps full-width forms U+FF01..=U+FF5E onto ASCII and the ideographic
/// space onto U+0020. Everything else is left alone.
pub fn normalize_width(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{FF01}'..='\u{FF5E}' => char::from_u32(c as u32 - 0xFEE0).unwrap_or(c),
            '\u{3000}' => ' ',
            _ => c,
        })
        .collect()
}

/// One model token and the text it stands for.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    pub symbol: String,
    pub surface: String,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RunKind {
    Digit,
    Latin,
}

fn run_kind(c: char) -> Option<RunKind> {
    if c.is_ascii_digit() {
        Some(RunKind::Digit)
    } else if c.is_ascii_alphabetic() {
        Some(RunKind::Latin)
    } else {
        None
    }
}

/// Splits text into tokens, collapsing each maximal run of ASCII digits into
/// one [`NUM`] and each maximal run of ASCII letters into one [`LAT`].
///
/// Whitespace ends a run and is dropped. The literal placeholders `<NUM>` and
/// `<LAT>` are read back as single tokens, which makes the transformation
/// idempotent on its own output.
pub fn replace_runs(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut run: Option<(RunKind, String)> = None;
    let flush = |run: &mut Option<(RunKind, String)>, out: &mut Vec<Token>| {
        if let Some((kind, surface)) = run.take() {
            let symbol = match kind {
                RunKind::Digit => NUM,
                RunKind::Latin => LAT,
            };
            out.push(Token {
                symbol: symbol.to_string(),
                surface,
            });
        }
    };
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if let Some(special) = [NUM, LAT].into_iter().find(|s| rest.starts_with(s)) {
            flush(&mut run, &mut out);
            out.push(Token {
                symbol: special.to_string(),
                surface: special.to_string(),
            });
            rest = &rest[special.len()..];
            continue;
        }
        rest = &rest[c.len_utf8()..];
        if c.is_whitespace() {
            flush(&mut run, &mut out);
            continue;
        }
        match (run_kind(c), run.as_mut()) {
            (Some(kind), Some((current, surface))) if *current == kind => surface.push(c),
            (Some(kind), _) => {
                flush(&mut run, &mut out);
                run = Some((kind, c.to_string()));
            }
            (None, _) => {
                flush(&mut run, &mut out);
                out.push(Token {
                    symbol: c.to_string(),
                    surface: c.to_string(),
                });
            }
        }
    }
    flush(&mut run, &mut out);
    out
}

/// Symbols of [`replace_runs`], dropping surfaces.
pub fn token_symbols(text: &str) -> Vec<String> {
    replace_runs(text).into_iter().map(|t| t.symbol).collect()
}

/// Words that end a clause.
pub const CLAUSE_PUNCTUATION: [&str; 11] = ["。", "，", "！", "？", "；", "、", ".", ",", "!", "?", ";"];

pub fn is_clause_punctuation(word: &str) -> bool {
    CLAUSE_PUNCTUATION.contains(&word)
}

/// Splits a segmented line after every word that is clause punctuation. The
/// punctuation stays with the clause it ends; empty clauses are dropped.
pub fn split_clauses<S: AsRef<str> + Clone>(words: &[S]) -> Vec<Vec<S>> {
    let mut clauses = Vec::new();
    let mut current = Vec::new();
    for w in words {
        current.push(w.clone());
        if is_clause_punctuation(w.as_ref()) {
            clauses.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        clauses.push(current);
    }
    clauses
}
