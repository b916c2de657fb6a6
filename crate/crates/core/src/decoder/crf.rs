//! Linear-chain CRF kernels over plain tensors.
//!
//! `emissions` is `T x L`, `transitions[a][b]` scores moving from label `a`
//! at position `t - 1` to label `b` at position `t`. A sequence is scored by
//! its emissions at every position plus the transitions between neighbours;
//! there are no start or stop scores.

use crate::numeric::{NumericError, Tensor};

fn check_shapes(emissions: &Tensor, transitions: &Tensor) -> Result<(usize, usize), NumericError> {
    let (t, l) = emissions.expect_matrix("crf")?;
    let (l1, l2) = transitions.expect_matrix("crf")?;
    if l1 != l || l2 != l {
        return Err(NumericError::ShapeMismatch {
            op: "crf",
            left: emissions.shape().to_vec(),
            right: transitions.shape().to_vec(),
        });
    }
    if t == 0 {
        return Err(NumericError::Empty("crf"));
    }
    Ok((t, l))
}

fn lse(values: &[f64]) -> f64 {
    crate::numeric::logsumexp(values).expect("non-empty")
}

/// Score of one label sequence.
pub fn sequence_score(emissions: &Tensor, transitions: &Tensor, labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for (t, &y) in labels.iter().enumerate() {
        s += emissions.get(t, y);
        if t > 0 {
            s += transitions.get(labels[t - 1], y);
        }
    }
    s
}

/// Forward log-potentials `alpha[t][y]`.
fn forward(emissions: &Tensor, transitions: &Tensor, t_len: usize, l: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; t_len * l];
    alpha[..l].copy_from_slice(emissions.row(0));
    let mut buf = vec![0.0; l];
    for t in 1..t_len {
        for y in 0..l {
            for (p, b) in buf.iter_mut().enumerate() {
                *b = alpha[(t - 1) * l + p] + transitions.get(p, y);
            }
            alpha[t * l + y] = emissions.get(t, y) + lse(&buf);
        }
    }
    alpha
}

/// Backward log-potentials `beta[t][y]` (scores of positions after `t`).
fn backward(emissions: &Tensor, transitions: &Tensor, t_len: usize, l: usize) -> Vec<f64> {
    let mut beta = vec![0.0; t_len * l];
    let mut buf = vec![0.0; l];
    for t in (0..t_len - 1).rev() {
        for y in 0..l {
            for (n, b) in buf.iter_mut().enumerate() {
                *b = transitions.get(y, n) + emissions.get(t + 1, n) + beta[(t + 1) * l + n];
            }
            beta[t * l + y] = lse(&buf);
        }
    }
    beta
}

/// `log sum_Y exp(score(Y))` over all `L^T` label sequences.
pub fn log_partition(emissions: &Tensor, transitions: &Tensor) -> Result<f64, NumericError> {
    let (t_len, l) = check_shapes(emissions, transitions)?;
    let alpha = forward(emissions, transitions, t_len, l);
    Ok(lse(&alpha[(t_len - 1) * l..]))
}

/// Negative log-likelihood of `gold` and its gradients with respect to the
/// emissions and the transitions (expected minus observed counts).
pub fn nll_with_grads(
    emissions: &Tensor,
    transitions: &Tensor,
    gold: &[usize],
) -> Result<(f64, Vec<f64>, Vec<f64>), NumericError> {
    let (t_len, l) = check_shapes(emissions, transitions)?;
    if gold.len() != t_len {
        return Err(NumericError::LengthMismatch {
            op: "crf_nll",
            expected: t_len,
            actual: gold.len(),
        });
    }
    if let Some(&bad) = gold.iter().find(|&&y| y >= l) {
        return Err(NumericError::OutOfRange {
            op: "crf_nll",
            index: bad,
            len: l,
        });
    }
    let alpha = forward(emissions, transitions, t_len, l);
    let beta = backward(emissions, transitions, t_len, l);
    let log_z = lse(&alpha[(t_len - 1) * l..]);
    let gold_score = sequence_score(emissions, transitions, gold);
    // Clamp rounding noise; the exact value is non-negative.
    let nll = (log_z - gold_score).max(0.0);

    let mut d_em = vec![0.0; t_len * l];
    for t in 0..t_len {
        for y in 0..l {
            d_em[t * l + y] = (alpha[t * l + y] + beta[t * l + y] - log_z).exp();
        }
        d_em[t * l + gold[t]] -= 1.0;
    }
    let mut d_tr = vec![0.0; l * l];
    for t in 1..t_len {
        for a in 0..l {
            for b in 0..l {
                let lp = alpha[(t - 1) * l + a] + transitions.get(a, b) + emissions.get(t, b) + beta[t * l + b] - log_z;
                d_tr[a * l + b] += lp.exp();
            }
        }
        d_tr[gold[t - 1] * l + gold[t]] -= 1.0;
    }
    Ok((nll, d_em, d_tr))
}

/// Highest-scoring label sequence. Among equally scored sequences the
/// lexicographically smallest one wins, so lower label indices are preferred
/// at earlier positions.
pub fn viterbi(emissions: &Tensor, transitions: &Tensor) -> Result<Vec<usize>, NumericError> {
    let (t_len, l) = check_shapes(emissions, transitions)?;
    // suffix[t][y]: best score of positions t.. given label y at t.
    let mut suffix = vec![0.0; t_len * l];
    suffix[(t_len - 1) * l..].copy_from_slice(emissions.row(t_len - 1));
    for t in (0..t_len - 1).rev() {
        for y in 0..l {
            let best = (0..l)
                .map(|n| transitions.get(y, n) + suffix[(t + 1) * l + n])
                .fold(f64::NEG_INFINITY, f64::max);
            suffix[t * l + y] = emissions.get(t, y) + best;
        }
    }
    let argmax = |scores: &mut dyn Iterator<Item = f64>| {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, s) in scores.enumerate() {
            if s > best.1 {
                best = (i, s);
            }
        }
        best.0
    };
    let mut path = Vec::with_capacity(t_len);
    path.push(argmax(&mut suffix[..l].iter().copied()));
    for t in 1..t_len {
        let prev = path[t - 1];
        let next = argmax(&mut (0..l).map(|n| transitions.get(prev, n) + suffix[t * l + n]));
        path.push(next);
    }
    Ok(path)
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Every label sequence of length `t` over `l` labels, in lexicographic order.
    pub(crate) fn all_sequences(t: usize, l: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for _ in 0..t {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..l).map(move |y| {
                        let mut p = prefix.clone();
                        p.push(y);
                        p
                    })
                })
                .collect();
        }
        out
    }

    pub(crate) fn brute_force(emissions: &Tensor, transitions: &Tensor) -> (f64, Vec<usize>) {
        let (t, l) = (emissions.rows(), emissions.cols());
        let seqs = all_sequences(t, l);
        let scores: Vec<f64> = seqs.iter().map(|s| sequence_score(emissions, transitions, s)).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        (log_z, seqs[best].clone())
    }

    fn random_instance(rng: &mut ChaCha8Rng, t: usize) -> (Tensor, Tensor) {
        (Tensor::uniform(&[t, 4], -3.0, 3.0, rng), Tensor::uniform(&[4, 4], -3.0, 3.0, rng))
    }

    #[test]
    fn zero_scores_partition() {
        let z = log_partition(&Tensor::zeros(&[1, 4]), &Tensor::zeros(&[4, 4])).unwrap();
        assert!((z - 4f64.ln()).abs() < 1e-12);
        let z = log_partition(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[4, 4])).unwrap();
        assert!((z - 16f64.ln()).abs() < 1e-12);
        assert!(log_partition(&Tensor::zeros(&[0, 4]), &Tensor::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let t = rng.gen_range(1..=6);
            let (em, tr) = random_instance(&mut rng, t);
            let (log_z, best) = brute_force(&em, &tr);
            assert!((log_partition(&em, &tr).unwrap() - log_z).abs() < 1e-9);
            assert_eq!(viterbi(&em, &tr).unwrap(), best);
        }
    }

    #[test]
    fn probabilities_normalise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 1..=6 {
            let (em, tr) = random_instance(&mut rng, t);
            let log_z = log_partition(&em, &tr).unwrap();
            let total: f64 = all_sequences(t, 4)
                .iter()
                .map(|s| (sequence_score(&em, &tr, s) - log_z).exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nll_examples() {
        let (nll, _, _) = nll_with_grads(&Tensor::zeros(&[1, 4]), &Tensor::zeros(&[4, 4]), &[2]).unwrap();
        assert!((nll - 4f64.ln()).abs() < 1e-12);

        let mut em = Tensor::zeros(&[3, 4]);
        for (t, y) in [0usize, 2, 3].into_iter().enumerate() {
            em.row_mut(t)[y] = 50.0;
        }
        let (nll, _, _) = nll_with_grads(&em, &Tensor::zeros(&[4, 4]), &[0, 2, 3]).unwrap();
        assert!(nll < 1e-12);

        assert!(nll_with_grads(&em, &Tensor::zeros(&[4, 4]), &[0, 2]).is_err());
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let t = rng.gen_range(1..=5);
            let (em, tr) = random_instance(&mut rng, t);
            let gold: Vec<usize> = (0..t).map(|_| rng.gen_range(0..4)).collect();
            let (_, d_em, d_tr) = nll_with_grads(&em, &tr, &gold).unwrap();
            let h = 1e-6;
            let nll = |e: &Tensor, r: &Tensor| nll_with_grads(e, r, &gold).unwrap().0;
            for j in 0..em.len() {
                let (mut p, mut m) = (em.clone(), em.clone());
                p.data_mut()[j] += h;
                m.data_mut()[j] -= h;
                let fd = (nll(&p, &tr) - nll(&m, &tr)) / (2.0 * h);
                assert!((fd - d_em[j]).abs() / fd.abs().max(1.0) < 1e-6);
            }
            for j in 0..tr.len() {
                let (mut p, mut m) = (tr.clone(), tr.clone());
                p.data_mut()[j] += h;
                m.data_mut()[j] -= h;
                let fd = (nll(&em, &p) - nll(&em, &m)) / (2.0 * h);
                assert!((fd - d_tr[j]).abs() / fd.abs().max(1.0) < 1e-6);
            }
        }
    }

    #[test]
    fn viterbi_tie_rule_and_dominance() {
        assert_eq!(viterbi(&Tensor::zeros(&[4, 4]), &Tensor::zeros(&[4, 4])).unwrap(), vec![0; 4]);
        let mut em = Tensor::zeros(&[5, 4]);
        for t in 0..5 {
            em.row_mut(t)[3] = 10.0;
        }
        assert_eq!(viterbi(&em, &Tensor::zeros(&[4, 4])).unwrap(), vec![3; 5]);
    }

    #[test]
    fn zero_transitions_reduce_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let em = Tensor::uniform(&[8, 4], -3.0, 3.0, &mut rng);
        let path = viterbi(&em, &Tensor::zeros(&[4, 4])).unwrap();
        for (t, y) in path.iter().enumerate() {
            let row = em.row(t);
            let best = (0..4).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            assert_eq!(*y, best);
        }
    }

    #[test]
    fn emission_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (em, tr) = random_instance(&mut rng, 5);
        let mut shifted = em.clone();
        shifted.row_mut(2).iter_mut().for_each(|v| *v += 7.5);
        assert_eq!(viterbi(&em, &tr).unwrap(), viterbi(&shifted, &tr).unwrap());
        let gold = [0, 2, 3, 1, 2];
        let a = nll_with_grads(&em, &tr, &gold).unwrap().0;
        let b = nll_with_grads(&shifted, &tr, &gold).unwrap().0;
        assert!((a - b).abs() < 1e-9);
    }
}
