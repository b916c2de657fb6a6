//! The assembled segmenter: embeddings, encoder stack and shared decoder
//! over one parameter store.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Vocab};
use crate::decoder::{DecoderKind, DecoderParams};
use crate::embedding::{build_input, EmbeddingConfig, EmbeddingParams, EncodedSentence};
use crate::encoder::{encode, maybe_dropout, Dropout, EncoderConfig, EncoderLayerParams};
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::Error;

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId, Error> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding: EmbeddingConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.encoder.validate()?;
        if self.embedding.dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        Ok(())
    }
}

/// A dropout source that is never constructed; names the type of `None`.
pub type NoDropout<'r> = Option<Dropout<'r, ChaCha8Rng>>;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    embedding: EmbeddingParams,
    layers: Vec<EncoderLayerParams>,
    decoder: DecoderParams,
}

impl Model {
    /// Freshly initialised parameters for `vocab`.
    pub fn new<R: Rng>(config: ModelConfig, vocab: Vocab, rng: &mut R) -> Result<Self, Error> {
        config.validate()?;
        let mut params = ParamStore::new();
        let d_model = config.encoder.d_model;
        let embedding = EmbeddingParams::register(&mut params, &config.embedding, d_model, &vocab, rng)?;
        let layers = (0..config.encoder.num_layers)
            .map(|l| EncoderLayerParams::register(&mut params, &config.encoder, l, rng))
            .collect::<Result<_, _>>()?;
        let decoder = DecoderParams::register(&mut params, config.decoder, d_model, rng)?;
        Ok(Self {
            config,
            vocab,
            params,
            embedding,
            layers,
            decoder,
        })
    }

    /// Reassembles a model around existing parameters, checking that every
    /// expected tensor is present with the right width.
    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: ParamStore) -> Result<Self, Error> {
        config.validate()?;
        let embedding = EmbeddingParams::resolve(&params)?;
        let layers = (0..config.encoder.num_layers)
            .map(|l| EncoderLayerParams::resolve(&params, &config.encoder, l))
            .collect::<Result<_, _>>()?;
        let decoder = DecoderParams::resolve(&params, config.decoder)?;
        let expect = |id: ParamId, rows: usize, cols: usize| {
            let shape = params.get(id).shape();
            if shape != [rows, cols] {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, expected [{rows}, {cols}]",
                    params.name(id),
                    shape
                )));
            }
            Ok(())
        };
        let (d, dm) = (config.embedding.dim, config.encoder.d_model);
        expect(embedding.unigram, vocab.unigrams.len(), d)?;
        expect(embedding.bigram, vocab.bigrams.len(), d)?;
        expect(embedding.criterion, vocab.num_criteria(), dm)?;
        expect(embedding.fusion_w, 3 * d, dm)?;
        Ok(Self {
            config,
            vocab,
            params,
            embedding,
            layers,
            decoder,
        })
    }

    pub fn embedding_params(&self) -> &EmbeddingParams {
        &self.embedding
    }

    pub fn decoder_params(&self) -> &DecoderParams {
        &self.decoder
    }

    pub fn criterion_index(&self, name: &str) -> Result<usize, Error> {
        self.vocab.criterion(name).ok_or_else(|| Error::UnknownCriterion {
            name: name.to_string(),
            known: self.vocab.criterion_names().to_vec(),
        })
    }

    pub fn encode_sentence<S: AsRef<str>>(&self, tokens: &[S], criterion: usize) -> EncodedSentence {
        EncodedSentence::new(&self.vocab, tokens, criterion)
    }

    /// Encoder states of the `T` character positions (the criterion row is
    /// dropped). With `pad_to`, the input is padded and pad keys are masked.
    pub fn hidden<'a, R: Rng + ?Sized>(
        &'a self,
        g: &mut Graph<'a>,
        sentence: &EncodedSentence,
        pad_to: Option<usize>,
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Result<Var, Error> {
        let d_model = self.config.encoder.d_model;
        let h0 = build_input(
            g,
            &self.params,
            &self.embedding,
            &self.config.embedding,
            d_model,
            sentence,
            pad_to,
        )?;
        let h0 = maybe_dropout(g, h0, dropout)?;
        let valid = sentence.len() + 1;
        let h = encode(g, &self.params, &self.layers, &self.config.encoder, h0, valid, dropout)?;
        Ok(g.slice_rows(h, 1, sentence.len())?)
    }

    /// Per-position label scores (`T x 4`).
    pub fn scores<'a, R: Rng + ?Sized>(
        &'a self,
        g: &mut Graph<'a>,
        sentence: &EncodedSentence,
        pad_to: Option<usize>,
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Result<Var, Error> {
        let h = self.hidden(g, sentence, pad_to, dropout)?;
        Ok(self.decoder.scores(g, &self.params, h)?)
    }

    /// Negative log-likelihood of `gold` for one sentence.
    pub fn loss<'a, R: Rng + ?Sized>(
        &'a self,
        g: &mut Graph<'a>,
        sentence: &EncodedSentence,
        gold: &[Label],
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Result<Var, Error> {
        let scores = self.scores(g, sentence, None, dropout)?;
        Ok(self.decoder.loss(g, &self.params, scores, gold)?)
    }

    /// Decoded labels of an encoded sentence; empty input gives no labels.
    pub fn predict_encoded(&self, sentence: &EncodedSentence) -> Result<Vec<Label>, Error> {
        if sentence.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference();
        let scores = self.scores(&mut g, sentence, None, &mut NoDropout::None)?;
        Ok(self.decoder.decode(&self.params, g.value(scores))?)
    }

    pub fn predict<S: AsRef<str>>(&self, tokens: &[S], criterion: usize) -> Result<Vec<Label>, Error> {
        if criterion >= self.vocab.num_criteria() {
            return Err(Error::UnknownCriterion {
                name: format!("#{criterion}"),
                known: self.vocab.criterion_names().to_vec(),
            });
        }
        self.predict_encoded(&self.encode_sentence(tokens, criterion))
    }

    /// Registers a new criterion whose embedding starts at the mean of the
    /// existing ones. Returns its index.
    pub fn add_criterion(&mut self, name: &str) -> Result<usize, Error> {
        let index = self.vocab.add_criterion(name)?;
        let table = self.params.get_mut(self.embedding.criterion);
        let (rows, cols) = (table.rows(), table.cols());
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(table.row(r)) {
                *m += v / rows as f64;
            }
        }
        table.append_rows(&Tensor::new(vec![1, cols], mean)?)?;
        Ok(index)
    }
}
