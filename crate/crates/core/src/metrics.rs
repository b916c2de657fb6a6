//! Word-level precision/recall/F1 and OOV recall.

use std::collections::HashSet;
use std::io::Write;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("{gold} gold sentences but {pred} predicted")]
    SentenceCount { gold: usize, pred: usize },
    #[error("sentence {index}: gold covers {gold} characters, prediction {pred}")]
    SentenceLength { index: usize, gold: usize, pred: usize },
    #[error("cannot average an empty list")]
    Empty,
}

/// Half-open character intervals of the words of one sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanSet(Vec<(usize, usize)>);

impl SpanSet {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut start = 0;
        SpanSet(
            lengths
                .iter()
                .map(|&n| {
                    let span = (start, start + n);
                    start += n;
                    span
                })
                .collect(),
        )
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of characters covered.
    pub fn extent(&self) -> usize {
        self.0.last().map_or(0, |s| s.1)
    }

    /// Size of the intersection with another tiling. Both lists are sorted, so
    /// this is a linear merge.
    pub fn matches(&self, other: &SpanSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.0.len() && j < other.0.len() {
            let (a, b) = (self.0[i], other.0[j]);
            if a == b {
                n += 1;
                i += 1;
                j += 1;
            } else if a.0 < b.0 || (a.0 == b.0 && a.1 < b.1) {
                i += 1;
            } else {
                j += 1;
            }
        }
        n
    }
}

/// Spans of words given as strings, measured in characters.
pub fn extract_spans<S: AsRef<str>>(words: &[S]) -> SpanSet {
    let lengths: Vec<usize> = words.iter().map(|w| w.as_ref().chars().count()).collect();
    SpanSet::from_lengths(&lengths)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(correct: usize, gold: usize, pred: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, pred);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

fn check_alignment(gold: &[SpanSet], pred: &[SpanSet]) -> Result<(), MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::SentenceCount {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    for (index, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.extent() != p.extent() {
            return Err(MetricsError::SentenceLength {
                index,
                gold: g.extent(),
                pred: p.extent(),
            });
        }
    }
    Ok(())
}

/// Corpus-level micro-averaged scores.
pub fn f1(gold: &[SpanSet], pred: &[SpanSet]) -> Result<Prf, MetricsError> {
    check_alignment(gold, pred)?;
    let correct = gold.iter().zip(pred).map(|(g, p)| g.matches(p)).sum();
    let n_gold = gold.iter().map(SpanSet::len).sum();
    let n_pred = pred.iter().map(SpanSet::len).sum();
    Ok(Prf::from_counts(correct, n_gold, n_pred))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OovRecall {
    pub value: f64,
    /// No gold word was out of vocabulary; `value` is 1.0 by convention.
    pub vacuous: bool,
}

/// Fraction of gold words absent from `training_words` whose exact span is
/// predicted. `gold_words` holds each sentence's words as strings.
pub fn oov_recall(
    gold_words: &[Vec<String>],
    gold: &[SpanSet],
    pred: &[SpanSet],
    training_words: &HashSet<String>,
) -> Result<OovRecall, MetricsError> {
    check_alignment(gold, pred)?;
    let mut total = 0;
    let mut hit = 0;
    for ((words, g), p) in gold_words.iter().zip(gold).zip(pred) {
        let predicted: HashSet<(usize, usize)> = p.spans().iter().copied().collect();
        for (w, span) in words.iter().zip(g.spans()) {
            if !training_words.contains(w) {
                total += 1;
                if predicted.contains(span) {
                    hit += 1;
                }
            }
        }
    }
    Ok(if total == 0 {
        OovRecall {
            value: 1.0,
            vacuous: true,
        }
    } else {
        OovRecall {
            value: hit as f64 / total as f64,
            vacuous: false,
        }
    })
}

/// Unweighted mean.
pub fn macro_average(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriterionScore {
    pub criterion: String,
    pub prf: Prf,
    pub oov: OovRecall,
}

/// Per-criterion scores plus their macro average.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<CriterionScore>,
}

impl EvalReport {
    pub fn macro_f1(&self) -> Result<f64, MetricsError> {
        macro_average(&self.rows.iter().map(|r| r.prf.f1).collect::<Vec<_>>())
    }

    /// Columns `criterion P R F1 OOV-recall`, percentages with two decimals.
    /// A vacuous OOV recall is marked with a trailing `*`. The last row is
    /// the unweighted average named `Avg.`.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "criterion\tP\tR\tF1\tOOV-recall")?;
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        for r in &self.rows {
            let oov = if r.oov.vacuous {
                format!("{}*", pct(r.oov.value))
            } else {
                pct(r.oov.value)
            };
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.criterion,
                pct(r.prf.precision),
                pct(r.prf.recall),
                pct(r.prf.f1),
                oov
            )?;
        }
        if !self.rows.is_empty() {
            let avg = |f: &dyn Fn(&CriterionScore) -> f64| {
                pct(self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64)
            };
            writeln!(
                out,
                "Avg.\t{}\t{}\t{}\t{}",
                avg(&|r| r.prf.precision),
                avg(&|r| r.prf.recall),
                avg(&|r| r.prf.f1),
                avg(&|r| r.oov.value)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn spans(v: &[(usize, usize)]) -> SpanSet {
        SpanSet(v.to_vec())
    }

    #[test]
    fn span_extraction() {
        assert_eq!(extract_spans(&["总", "冠军"]).spans(), &[(0, 1), (1, 3)]);
        assert_eq!(extract_spans(&["总冠军"]).spans(), &[(0, 3)]);
        assert_eq!(extract_spans(&["a", "b", "c"]).spans(), &[(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn worked_examples() {
        let p = f1(&[spans(&[(0, 2), (2, 3)])], &[spans(&[(0, 1), (1, 2), (2, 3)])]).unwrap();
        assert!((p.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.recall - 0.5).abs() < 1e-12);
        assert!((p.f1 - 0.4).abs() < 1e-12);

        let g = spans(&[(0, 1), (1, 3)]);
        assert_eq!(f1(&[g.clone()], &[g.clone()]).unwrap().f1, 1.0);
        assert_eq!(f1(&[g], &[spans(&[(0, 3)])]).unwrap().f1, 0.0);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let g = spans(&[(0, 2)]);
        assert!(matches!(f1(&[g.clone()], &[]), Err(MetricsError::SentenceCount { .. })));
        assert!(matches!(
            f1(&[g], &[spans(&[(0, 3)])]),
            Err(MetricsError::SentenceLength { .. })
        ));
    }

    #[test]
    fn oov_examples() {
        let words = vec![vec!["天气".to_string(), "好".to_string()]];
        let gold = vec![extract_spans(&words[0])];
        let known: HashSet<String> = ["天气", "好"].iter().map(|s| s.to_string()).collect();
        let r = oov_recall(&words, &gold, &gold, &known).unwrap();
        assert_eq!(r, OovRecall { value: 1.0, vacuous: true });

        let only_good: HashSet<String> = ["好".to_string()].into();
        let r = oov_recall(&words, &gold, &gold, &only_good).unwrap();
        assert_eq!(r, OovRecall { value: 1.0, vacuous: false });

        let none = HashSet::new();
        let pred = vec![spans(&[(0, 1), (1, 2), (2, 3)])];
        let r = oov_recall(&words, &gold, &pred, &none).unwrap();
        assert_eq!(r.value, 0.5);
    }

    #[test]
    fn averages() {
        assert_eq!(macro_average(&[96.45]).unwrap(), 96.45);
        let row = [98.07, 96.06, 96.39, 96.41, 95.66, 96.32, 95.57, 97.08];
        let avg = macro_average(&row).unwrap();
        assert!((avg - 96.445).abs() < 1e-9);
        assert!((avg - 96.45).abs() < 0.01);
        assert_eq!(macro_average(&[0.0, 100.0]).unwrap(), 50.0);
        assert!(macro_average(&[]).is_err());
    }

    #[test]
    fn report_layout() {
        let report = EvalReport {
            rows: vec![CriterionScore {
                criterion: "pku".into(),
                prf: Prf::from_counts(3, 4, 4),
                oov: OovRecall { value: 1.0, vacuous: true },
            }],
        };
        let mut buf = Vec::new();
        report.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "criterion\tP\tR\tF1\tOOV-recall");
        assert_eq!(lines[1], "pku\t75.00\t75.00\t75.00\t100.00*");
        assert!(lines[2].starts_with("Avg.\t"));
    }

    fn lengths_strategy() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(1usize..5, 1..10)
    }

    proptest! {
        #[test]
        fn self_f1_is_one(l in lengths_strategy()) {
            let s = SpanSet::from_lengths(&l);
            prop_assert_eq!(f1(&[s.clone()], &[s]).unwrap().f1, 1.0);
        }

        #[test]
        fn swapping_exchanges_precision_and_recall(a in lengths_strategy(), b in lengths_strategy()) {
            let total: usize = a.iter().sum();
            let mut b2 = b;
            let sb: usize = b2.iter().sum();
            // stretch or trim so both tile the same extent
            if sb < total { b2.push(total - sb); } else {
                let mut acc = 0;
                b2 = b2.into_iter().take_while(|n| { acc += n; acc < total }).collect();
                let used: usize = b2.iter().sum();
                b2.push(total - used);
            }
            let (x, y) = (SpanSet::from_lengths(&a), SpanSet::from_lengths(&b2));
            let p = f1(&[x.clone()], &[y.clone()]).unwrap();
            let q = f1(&[y], &[x]).unwrap();
            prop_assert!((p.precision - q.recall).abs() < 1e-12);
            prop_assert!((p.recall - q.precision).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&p.f1));
        }
    }
}
