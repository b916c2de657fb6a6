//! Input layer: fused unigram/bigram character vectors, the criterion
//! embedding, and sinusoidal positions.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::numeric::{Graph, NumericError, ParamId, ParamStore, Tensor, Var};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Unigram and bigram vector size.
    pub dim: usize,
    pub bigram: bool,
    /// Sinusoidal positions are added to the input; switched off only to
    /// probe permutation behaviour.
    pub positions: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            bigram: true,
            positions: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingParams {
    pub unigram: ParamId,
    pub bigram: ParamId,
    pub criterion: ParamId,
    pub fusion_w: ParamId,
    pub fusion_b: ParamId,
}

pub const UNIGRAM_TABLE: &str = "embedding.unigram";
pub const BIGRAM_TABLE: &str = "embedding.bigram";
pub const CRITERION_TABLE: &str = "embedding.criterion";

impl EmbeddingParams {
    /// Tables start uniform in [-0.1, 0.1]; the fusion layer is Glorot.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        config: &EmbeddingConfig,
        d_model: usize,
        vocab: &Vocab,
        rng: &mut R,
    ) -> Result<Self, NumericError> {
        let d = config.dim;
        Ok(Self {
            unigram: store.add(UNIGRAM_TABLE, Tensor::uniform(&[vocab.unigrams.len(), d], -0.1, 0.1, rng), true)?,
            bigram: store.add(BIGRAM_TABLE, Tensor::uniform(&[vocab.bigrams.len(), d], -0.1, 0.1, rng), true)?,
            criterion: store.add(
                CRITERION_TABLE,
                Tensor::uniform(&[vocab.num_criteria(), d_model], -0.1, 0.1, rng),
                true,
            )?,
            fusion_w: store.add("embedding.fusion.w", Tensor::glorot(3 * d, d_model, rng), false)?,
            fusion_b: store.add("embedding.fusion.b", Tensor::zeros(&[d_model]), false)?,
        })
    }

    pub fn resolve(store: &ParamStore) -> Result<Self, Error> {
        Ok(Self {
            unigram: crate::model::lookup(store, UNIGRAM_TABLE)?,
            bigram: crate::model::lookup(store, BIGRAM_TABLE)?,
            criterion: crate::model::lookup(store, CRITERION_TABLE)?,
            fusion_w: crate::model::lookup(store, "embedding.fusion.w")?,
            fusion_b: crate::model::lookup(store, "embedding.fusion.b")?,
        })
    }
}

/// Vocabulary indices of one sentence under one criterion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub unigrams: Vec<usize>,
    /// `T + 1` boundary-padded bigrams; position `t` uses `t` and `t + 1`.
    pub bigrams: Vec<usize>,
    pub criterion: usize,
}

impl EncodedSentence {
    pub fn new<S: AsRef<str>>(vocab: &Vocab, tokens: &[S], criterion: usize) -> Self {
        let (unigrams, bigrams) = vocab.encode_tokens(tokens);
        Self {
            unigrams,
            bigrams,
            criterion,
        }
    }

    pub fn len(&self) -> usize {
        self.unigrams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unigrams.is_empty()
    }
}

/// Sinusoidal encoding of position `t`.
pub fn positional_encoding(t: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let angle = t as f64 / 10000f64.powf(i2 / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Rows `0..len` of the position table.
pub fn position_table(len: usize, d_model: usize) -> Tensor {
    let data = (0..len).flat_map(|t| positional_encoding(t, d_model)).collect();
    Tensor::new(vec![len, d_model], data).expect("shape")
}

/// Fused representations of every character: `FC(uni_t ++ bi_{t-1,t} ++ bi_{t,t+1})`.
/// With bigrams disabled the bigram slots are zeros.
pub fn fuse_characters<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    params: &EmbeddingParams,
    config: &EmbeddingConfig,
    sentence: &EncodedSentence,
) -> Result<Var, NumericError> {
    let t_len = sentence.len();
    let uni_table = g.param(store, params.unigram);
    let uni = g.gather_rows(uni_table, &sentence.unigrams)?;
    let (left, right) = if config.bigram {
        let bi_table = g.param(store, params.bigram);
        let left = g.gather_rows(bi_table, &sentence.bigrams[..t_len])?;
        let right = g.gather_rows(bi_table, &sentence.bigrams[1..])?;
        (left, right)
    } else {
        let zeros = g.constant(Tensor::zeros(&[t_len, config.dim]));
        (zeros, zeros)
    };
    let cat = g.concat_cols(&[uni, left, right])?;
    let w = g.param(store, params.fusion_w);
    let b = g.param(store, params.fusion_b);
    g.affine(cat, w, b)
}

/// Fused vector of the character at 1-based position `t`.
pub fn fuse_character(
    store: &ParamStore,
    params: &EmbeddingParams,
    config: &EmbeddingConfig,
    sentence: &EncodedSentence,
    t: usize,
) -> Result<Vec<f64>, NumericError> {
    if t == 0 || t > sentence.len() {
        return Err(NumericError::OutOfRange {
            op: "fuse_character",
            index: t,
            len: sentence.len(),
        });
    }
    let mut g = Graph::inference();
    let fused = fuse_characters(&mut g, store, params, config, sentence)?;
    Ok(g.value(fused).row(t - 1).to_vec())
}

/// The `(T + 1) x d_model` input matrix: the criterion embedding on row 0,
/// fused characters on rows `1..=T`, plus positions `0..=T`.
///
/// When `pad_to` exceeds `T`, PAD rows are appended up to `pad_to + 1` rows.
pub fn build_input<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    params: &EmbeddingParams,
    config: &EmbeddingConfig,
    d_model: usize,
    sentence: &EncodedSentence,
    pad_to: Option<usize>,
) -> Result<Var, NumericError> {
    let mut padded;
    let sentence = match pad_to {
        Some(n) if n > sentence.len() => {
            padded = sentence.clone();
            let extra = n - sentence.len();
            padded.unigrams.extend(std::iter::repeat(crate::corpus::PAD_INDEX).take(extra));
            padded.bigrams.extend(std::iter::repeat(crate::corpus::PAD_INDEX).take(extra));
            &padded
        }
        _ => sentence,
    };
    let table = g.param(store, params.criterion);
    if sentence.criterion >= g.value(table).rows() {
        return Err(NumericError::OutOfRange {
            op: "build_input",
            index: sentence.criterion,
            len: g.value(table).rows(),
        });
    }
    let crit = g.gather_rows(table, &[sentence.criterion])?;
    let chars = fuse_characters(g, store, params, config, sentence)?;
    let h = g.concat_rows(&[crit, chars])?;
    if config.positions {
        let pe = g.constant(position_table(sentence.len() + 1, d_model));
        g.add(h, pe)
    } else {
        Ok(h)
    }
}

/// How many vocabulary entries a pre-trained file covered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Coverage {
    pub unigrams_found: usize,
    pub unigrams_total: usize,
    pub bigrams_found: usize,
    pub bigrams_total: usize,
    /// File entries matching no vocabulary symbol.
    pub skipped: usize,
}

/// Loads `symbol v1 ... vd` lines into the unigram and bigram tables.
///
/// An optional first line `count dim` is recognised and skipped. Single-token
/// symbols fill unigram rows and token pairs fill bigram rows; vocabulary
/// entries missing from the file keep their random initialisation.
pub fn load_pretrained(path: &Path, vocab: &Vocab, store: &mut ParamStore, params: &EmbeddingParams) -> Result<Coverage, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dim = store.get(params.unigram).cols();
    let mut coverage = Coverage {
        unigrams_total: vocab.unigrams.len(),
        bigrams_total: vocab.bigrams.len(),
        ..Coverage::default()
    };
    let mut seen_uni = vec![false; vocab.unigrams.len()];
    let mut seen_bi = vec![false; vocab.bigrams.len()];
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if lineno == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok()) {
            continue;
        }
        if fields.len() != dim + 1 {
            return Err(Error::Format(format!(
                "{}:{}: expected {} values, found {}",
                path.display(),
                lineno + 1,
                dim,
                fields.len() - 1
            )));
        }
        let values: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let symbol = fields[0];
        if let Some(i) = vocab.unigrams.get(symbol) {
            store.get_mut(params.unigram).row_mut(i).copy_from_slice(&values);
            if !std::mem::replace(&mut seen_uni[i], true) {
                coverage.unigrams_found += 1;
            }
        } else if let Some(i) = vocab.bigrams.get(symbol) {
            store.get_mut(params.bigram).row_mut(i).copy_from_slice(&values);
            if !std::mem::replace(&mut seen_bi[i], true) {
                coverage.bigrams_found += 1;
            }
        } else {
            coverage.skipped += 1;
        }
    }
    Ok(coverage)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::{build_vocab, prepare_lines, VocabSource};

    fn setup(config: EmbeddingConfig, d_model: usize) -> (Vocab, ParamStore, EmbeddingParams) {
        let sents = prepare_lines(&["天 气 好", "好 天"], false);
        let vocab = build_vocab(
            &[
                VocabSource { criterion: "a", sentences: &sents },
                VocabSource { criterion: "b", sentences: &sents },
            ],
            1,
            1,
        )
        .unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EmbeddingParams::register(&mut store, &config, d_model, &vocab, &mut rng).unwrap();
        (vocab, store, params)
    }

    #[test]
    fn position_examples() {
        let p0 = positional_encoding(0, 6);
        assert_eq!(p0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((positional_encoding(1, 8)[0] - 0.841_471).abs() < 1e-6);
        for t in 0..50 {
            assert!(positional_encoding(t, 16).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let table = position_table(64, 16);
        for a in 0..64 {
            for b in a + 1..64 {
                assert_ne!(table.row(a), table.row(b));
            }
        }
    }

    #[test]
    fn zero_tables_give_zero_fusion() {
        let config = EmbeddingConfig { dim: 4, ..Default::default() };
        let (vocab, mut store, params) = setup(config, 8);
        for id in [params.unigram, params.bigram, params.fusion_w, params.fusion_b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let sent = EncodedSentence::new(&vocab, &["天", "气"], 0);
        assert_eq!(fuse_character(&store, &params, &config, &sent, 1).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn default_width_and_first_bigram() {
        let config = EmbeddingConfig::default();
        let (vocab, store, params) = setup(config, 256);
        let sent = EncodedSentence::new(&vocab, &["天", "气"], 0);
        assert_eq!(fuse_character(&store, &params, &config, &sent, 1).unwrap().len(), 256);
        assert_eq!(sent.bigrams[0], vocab.bigram("<BOS>天"));
        assert_eq!(sent.bigrams.len(), 3);
    }

    #[test]
    fn disabled_bigrams_ignore_bigram_table() {
        let config = EmbeddingConfig { dim: 4, bigram: false, positions: true };
        let (vocab, mut store, params) = setup(config, 8);
        let sent = EncodedSentence::new(&vocab, &["天", "气"], 0);
        let before = fuse_character(&store, &params, &config, &sent, 2).unwrap();
        store.get_mut(params.bigram).data_mut().iter_mut().for_each(|v| *v += 1.0);
        assert_eq!(fuse_character(&store, &params, &config, &sent, 2).unwrap(), before);
    }

    #[test]
    fn criterion_only_changes_row_zero() {
        let config = EmbeddingConfig { dim: 4, ..Default::default() };
        let (vocab, store, params) = setup(config, 8);
        let build = |c: usize| {
            let mut g = Graph::inference();
            let sent = EncodedSentence::new(&vocab, &["天", "气", "好"], c);
            let h = build_input(&mut g, &store, &params, &config, 8, &sent, None).unwrap();
            g.value(h).clone()
        };
        let (a, b) = (build(0), build(1));
        assert_eq!(a.shape(), &[4, 8]);
        assert_ne!(a.row(0), b.row(0));
        for t in 1..4 {
            assert_eq!(a.row(t), b.row(t));
        }
    }

    #[test]
    fn zero_embeddings_leave_positions() {
        let config = EmbeddingConfig { dim: 4, ..Default::default() };
        let (vocab, mut store, params) = setup(config, 8);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::inference();
        let sent = EncodedSentence::new(&vocab, &["天", "气"], 1);
        let h = build_input(&mut g, &store, &params, &config, 8, &sent, None).unwrap();
        assert_eq!(g.value(h), &position_table(3, 8));
    }

    #[test]
    fn unknown_criterion_index_is_an_error() {
        let config = EmbeddingConfig { dim: 4, ..Default::default() };
        let (vocab, store, params) = setup(config, 8);
        let mut g = Graph::inference();
        let sent = EncodedSentence::new(&vocab, &["天"], 5);
        assert!(build_input(&mut g, &store, &params, &config, 8, &sent, None).is_err());
    }

    #[test]
    fn pretrained_file_fills_matching_rows() {
        let config = EmbeddingConfig { dim: 2, ..Default::default() };
        let (vocab, mut store, params) = setup(config, 4);
        let dir = std::env::temp_dir().join(format!("mccws-emb-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("emb.txt");
        std::fs::write(&path, "3 2\n天 0.5 -0.5\n天气 1 2\n雪 9 9\n").unwrap();
        let cov = load_pretrained(&path, &vocab, &mut store, &params).unwrap();
        assert_eq!((cov.unigrams_found, cov.bigrams_found, cov.skipped), (1, 1, 1));
        assert_eq!(store.get(params.unigram).row(vocab.unigram("天")), &[0.5, -0.5]);
        assert_eq!(store.get(params.bigram).row(vocab.bigram("天气")), &[1.0, 2.0]);

        std::fs::write(&path, "天 0.5\n").unwrap();
        assert!(load_pretrained(&path, &vocab, &mut store, &params).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
