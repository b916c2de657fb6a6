//! Shared label decoders: a linear-chain CRF and a per-position MLP.

pub mod crf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::numeric::{softmax_rows, Graph, NumericError, ParamId, ParamStore, Tensor, Var};
use crate::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    #[default]
    Crf,
    Mlp,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "crf" => Ok(DecoderKind::Crf),
            "mlp" => Ok(DecoderKind::Mlp),
            other => Err(Error::Config(format!("unknown decoder {other}; expected crf or mlp"))),
        }
    }
}

/// Emission projection and label-pair transitions.
#[derive(Clone, Copy, Debug)]
pub struct CrfParams {
    pub w: ParamId,
    pub b: ParamId,
    pub transitions: ParamId,
}

/// `d_h -> d_h -> |L|` with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub enum DecoderParams {
    Crf(CrfParams),
    Mlp(MlpParams),
}

impl DecoderParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        kind: DecoderKind,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self, NumericError> {
        let l = Label::COUNT;
        Ok(match kind {
            DecoderKind::Crf => DecoderParams::Crf(CrfParams {
                w: store.add("decoder.crf.w", Tensor::glorot(d_h, l, rng), false)?,
                b: store.add("decoder.crf.b", Tensor::zeros(&[l]), false)?,
                transitions: store.add("decoder.crf.transitions", Tensor::zeros(&[l, l]), false)?,
            }),
            DecoderKind::Mlp => DecoderParams::Mlp(MlpParams {
                w1: store.add("decoder.mlp.w1", Tensor::glorot(d_h, d_h, rng), false)?,
                b1: store.add("decoder.mlp.b1", Tensor::zeros(&[d_h]), false)?,
                w2: store.add("decoder.mlp.w2", Tensor::glorot(d_h, l, rng), false)?,
                b2: store.add("decoder.mlp.b2", Tensor::zeros(&[l]), false)?,
            }),
        })
    }

    pub fn resolve(store: &ParamStore, kind: DecoderKind) -> Result<Self, Error> {
        let get = |name: &str| crate::model::lookup(store, name);
        Ok(match kind {
            DecoderKind::Crf => DecoderParams::Crf(CrfParams {
                w: get("decoder.crf.w")?,
                b: get("decoder.crf.b")?,
                transitions: get("decoder.crf.transitions")?,
            }),
            DecoderKind::Mlp => DecoderParams::Mlp(MlpParams {
                w1: get("decoder.mlp.w1")?,
                b1: get("decoder.mlp.b1")?,
                w2: get("decoder.mlp.w2")?,
                b2: get("decoder.mlp.b2")?,
            }),
        })
    }

    /// Per-position label scores (`T x |L|`): CRF emissions or MLP logits.
    pub fn scores<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, h: Var) -> Result<Var, NumericError> {
        match self {
            DecoderParams::Crf(p) => {
                let w = g.param(store, p.w);
                let b = g.param(store, p.b);
                g.affine(h, w, b)
            }
            DecoderParams::Mlp(p) => {
                let w1 = g.param(store, p.w1);
                let b1 = g.param(store, p.b1);
                let w2 = g.param(store, p.w2);
                let b2 = g.param(store, p.b2);
                let hidden = g.affine(h, w1, b1)?;
                let hidden = g.relu(hidden);
                g.affine(hidden, w2, b2)
            }
        }
    }

    /// Summed negative log-likelihood of the gold labels.
    pub fn loss<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, scores: Var, gold: &[Label]) -> Result<Var, NumericError> {
        let gold: Vec<usize> = gold.iter().map(|l| l.index()).collect();
        match self {
            DecoderParams::Crf(p) => {
                let tr = g.param(store, p.transitions);
                g.crf_nll(scores, tr, &gold)
            }
            DecoderParams::Mlp(_) => g.softmax_cross_entropy(scores, &gold),
        }
    }

    /// Best label sequence for computed scores.
    pub fn decode(&self, store: &ParamStore, scores: &Tensor) -> Result<Vec<Label>, NumericError> {
        match self {
            DecoderParams::Crf(p) => viterbi_decode(scores, store.get(p.transitions)),
            DecoderParams::Mlp(_) => Ok(mlp_decode(scores)),
        }
    }
}

/// `encoded W + b`, one row of label scores per position.
pub fn emission_scores(encoded: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NumericError> {
    let mut out = crate::numeric::matmul(encoded, w)?;
    if b.len() != out.cols() {
        return Err(NumericError::ShapeMismatch {
            op: "emission_scores",
            left: out.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    for r in 0..out.rows() {
        for (v, bias) in out.row_mut(r).iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(out)
}

fn to_labels(indices: Vec<usize>) -> Vec<Label> {
    indices
        .into_iter()
        .map(|i| Label::from_index(i).expect("label index"))
        .collect()
}

/// Viterbi over the BMES label set; ties go to the lower label in B<M<E<S.
pub fn viterbi_decode(emissions: &Tensor, transitions: &Tensor) -> Result<Vec<Label>, NumericError> {
    crf::viterbi(emissions, transitions).map(to_labels)
}

/// Per-position label probabilities.
pub fn mlp_probabilities(logits: &Tensor) -> Tensor {
    softmax_rows(logits)
}

/// Per-position argmax, lowest label on ties.
pub fn mlp_decode(logits: &Tensor) -> Vec<Label> {
    let probs = mlp_probabilities(logits);
    to_labels(
        (0..probs.rows())
            .map(|r| {
                let row = probs.row(r);
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect(),
    )
}
