//! Multi-corpus training, transfer to a new criterion, evaluation and
//! segmentation of raw text.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{
    bmes_to_words, build_vocab, normalize_width, replace_runs, Label, SegmentedSentence, VocabSource,
};
use crate::embedding::{load_pretrained, Coverage, EncodedSentence};
use crate::encoder::Dropout;
use crate::metrics::{f1, oov_recall, CriterionScore, EvalReport, Prf, SpanSet};
use crate::model::{Model, ModelConfig};
use crate::numeric::{AdamConfig, Gradients, Graph, OptimizerState, UpdateMask};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: u64,
    /// Pre-trained tables stay fixed during epochs `1..=freeze_pretrained_epochs`.
    pub freeze_pretrained_epochs: usize,
    pub seed: u64,
    /// Multiplier on the warmup schedule.
    pub lr_factor: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub min_count_unigram: u64,
    pub min_count_bigram: u64,
    pub pretrained_embeddings: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            warmup_steps: 4000,
            freeze_pretrained_epochs: 80,
            seed: 1,
            lr_factor: 1.0,
            clip_norm: None,
            min_count_unigram: 1,
            min_count_bigram: 1,
            pretrained_embeddings: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be positive".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return Err(Error::Config(format!("lr_factor {} must be positive", self.lr_factor)));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One corpus's preprocessed train and dev sentences under a criterion.
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub criterion: String,
    pub train: Vec<SegmentedSentence>,
    pub dev: Vec<SegmentedSentence>,
}

/// Sentences of one corpus sharing a criterion token. `lengths` holds each
/// sentence's token count; shorter ones are padded to `max_len` with their
/// pad keys masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub corpus: usize,
    pub sentences: Vec<usize>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Single-corpus batches for one epoch. Sentences are shuffled within each
/// corpus, then the batches of all corpora are shuffled together.
pub fn make_batches(corpus_lengths: &[Vec<usize>], batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut batches = Vec::new();
    for (c, lengths) in corpus_lengths.iter().enumerate() {
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.shuffle(&mut stream_rng(seed, ((epoch as u64) << 20) | c as u64));
        for chunk in order.chunks(batch_size) {
            let lens: Vec<usize> = chunk.iter().map(|&i| lengths[i]).collect();
            batches.push(Batch {
                corpus: c,
                sentences: chunk.to_vec(),
                max_len: lens.iter().copied().max().unwrap_or(0),
                lengths: lens,
            });
        }
    }
    batches.shuffle(&mut stream_rng(seed, ((epoch as u64) << 20) | 0xF_FFFF));
    batches
}

/// Per-epoch record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    /// Dev F1 per criterion, in criterion order.
    pub dev_f1: Vec<(String, f64)>,
    pub macro_f1: Option<f64>,
}

pub struct TrainOutcome {
    /// The epoch with the best macro dev F1 (the last epoch when there is no
    /// dev data).
    pub best: Checkpoint,
    pub last: Model,
    pub log: Vec<EpochLog>,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub coverage: Option<Coverage>,
}

struct Example {
    encoded: EncodedSentence,
    labels: Vec<Label>,
}

fn examples(model: &Model, sentences: &[SegmentedSentence], criterion: usize) -> Vec<Example> {
    sentences
        .iter()
        .map(|s| Example {
            encoded: model.encode_sentence(&s.tokens(), criterion),
            labels: s.labels(),
        })
        .collect()
}

struct DevSet {
    criterion: String,
    index: usize,
    sentences: Vec<SegmentedSentence>,
}

/// Optimiser state shared by full training and transfer.
struct Optimizer {
    state: OptimizerState,
    grads: Gradients,
    lr_factor: f64,
    clip: Option<f64>,
    seed: u64,
    dropout: f64,
}

impl Optimizer {
    fn new(model: &Model, config: &TrainConfig) -> Self {
        Self {
            state: OptimizerState::new(
                &model.params,
                AdamConfig::default(),
                model.config.encoder.d_model,
                config.warmup_steps,
            ),
            grads: Gradients::zeros_like(&model.params),
            lr_factor: config.lr_factor,
            clip: config.clip_norm,
            seed: config.seed,
            dropout: model.config.encoder.dropout,
        }
    }

    /// Mean loss over the batch followed by one Adam update.
    fn step(&mut self, model: &mut Model, batch: &[&Example], masks: &[UpdateMask], epoch: usize) -> Result<f64, Error> {
        self.grads.reset();
        let step = self.state.step + 1;
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (i, ex) in batch.iter().enumerate() {
            let mut rng = stream_rng(self.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15), i as u64);
            let mut dropout = (self.dropout > 0.0).then(|| Dropout {
                rate: self.dropout,
                rng: &mut rng,
            });
            let mut g = Graph::new();
            let loss = model.loss(&mut g, &ex.encoded, &ex.labels, &mut dropout)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            total += value;
            g.backward(loss)?;
            g.accumulate_param_grads(&mut self.grads, scale);
        }
        let mean = total * scale;
        if !self.grads.is_finite() {
            return Err(Error::Diverged { epoch, step, loss: mean });
        }
        if let Some(c) = self.clip {
            self.grads.clip_global_norm(c);
        }
        let lr = self.state.next_lr()? * self.lr_factor;
        self.state.adam_step(&mut model.params, &self.grads, lr, masks)?;
        Ok(mean)
    }

    /// One pass over the data; returns the mean batch loss.
    fn epoch(
        &mut self,
        model: &mut Model,
        data: &[Vec<Example>],
        batch_size: usize,
        masks: &[UpdateMask],
        epoch: usize,
        step_losses: &mut Vec<f64>,
    ) -> Result<f64, Error> {
        let lengths: Vec<Vec<usize>> = data
            .iter()
            .map(|c| c.iter().map(|e| e.labels.len()).collect())
            .collect();
        let batches = make_batches(&lengths, batch_size, self.seed, epoch);
        let mut sum = 0.0;
        for batch in &batches {
            let exs: Vec<&Example> = batch.sentences.iter().map(|&i| &data[batch.corpus][i]).collect();
            let loss = self.step(model, &exs, masks, epoch)?;
            step_losses.push(loss);
            sum += loss;
        }
        Ok(if batches.is_empty() { 0.0 } else { sum / batches.len() as f64 })
    }
}

fn dev_scores(model: &Model, dev: &[DevSet]) -> Result<(Vec<(String, f64)>, Option<f64>), Error> {
    let mut scores = Vec::new();
    for set in dev.iter().filter(|d| !d.sentences.is_empty()) {
        let prf = score_sentences(model, set.index, &set.sentences)?;
        scores.push((set.criterion.clone(), prf.f1));
    }
    let macro_f1 = if scores.is_empty() {
        None
    } else {
        Some(scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64)
    };
    Ok((scores, macro_f1))
}

fn train_loop(
    mut model: Model,
    config: &TrainConfig,
    data: &[Vec<Example>],
    dev: &[DevSet],
    masks_for_epoch: impl Fn(usize) -> Vec<UpdateMask>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, Model, Vec<EpochLog>, Vec<f64>), Error> {
    let mut opt = Optimizer::new(&model, config);
    let mut log = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    let (initial, _) = dev_scores(&model, dev)?;
    let mut best = Checkpoint {
        model: model.clone(),
        step: 0,
        dev_f1: initial.into_iter().collect(),
    };
    let mut best_macro: Option<f64> = None;
    for epoch in 1..=config.epochs {
        let masks = masks_for_epoch(epoch);
        let train_loss = opt.epoch(&mut model, data, config.batch_size, &masks, epoch, &mut step_losses)?;
        let (dev_f1, macro_f1) = dev_scores(&model, dev)?;
        let entry = EpochLog {
            epoch,
            steps: opt.state.step,
            train_loss,
            dev_f1,
            macro_f1,
        };
        on_epoch(&entry);
        let improved = match (macro_f1, best_macro) {
            (Some(now), Some(before)) => now > before,
            _ => true,
        };
        if improved {
            best_macro = macro_f1;
            best = Checkpoint {
                model: model.clone(),
                step: opt.state.step,
                dev_f1: entry.dev_f1.iter().cloned().collect(),
            };
        }
        log.push(entry);
    }
    Ok((best, model, log, step_losses))
}

/// Trains a fresh model on every corpus jointly and keeps the epoch with
/// the best macro-averaged dev F1. `on_epoch` sees each epoch's record as
/// soon as it is complete.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    corpora: &[CorpusSplit],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, Error> {
    model_config.validate()?;
    config.validate()?;
    let sources: Vec<VocabSource> = corpora
        .iter()
        .map(|c| VocabSource {
            criterion: &c.criterion,
            sentences: &c.train,
        })
        .collect();
    let vocab = build_vocab(&sources, config.min_count_unigram, config.min_count_bigram)?;
    let mut model = Model::new(*model_config, vocab, &mut stream_rng(config.seed, u64::MAX))?;
    let coverage = match &config.pretrained_embeddings {
        Some(path) => {
            let params = *model.embedding_params();
            Some(load_pretrained(path, &model.vocab, &mut model.params, &params)?)
        }
        None => None,
    };

    let mut data = Vec::with_capacity(corpora.len());
    let mut dev: Vec<DevSet> = Vec::new();
    for c in corpora {
        let index = model.criterion_index(&c.criterion)?;
        data.push(examples(&model, &c.train, index));
        match dev.iter_mut().find(|d| d.index == index) {
            Some(d) => d.sentences.extend(c.dev.iter().cloned()),
            None => dev.push(DevSet {
                criterion: c.criterion.clone(),
                index,
                sentences: c.dev.clone(),
            }),
        }
    }
    dev.sort_by_key(|d| d.index);

    let n_params = model.params.len();
    let tables = [model.embedding_params().unigram, model.embedding_params().bigram];
    let frozen_until = if coverage.is_some() { config.freeze_pretrained_epochs } else { 0 };
    let masks_for_epoch = move |epoch: usize| {
        let mut masks = vec![UpdateMask::Train; n_params];
        if epoch <= frozen_until {
            for id in tables {
                masks[id.index()] = UpdateMask::Frozen;
            }
        }
        masks
    };
    let (best, last, log, step_losses) = train_loop(model, config, &data, &dev, masks_for_epoch, on_epoch)?;
    Ok(TrainOutcome {
        best,
        last,
        log,
        step_losses,
        coverage,
    })
}

/// Adapts `base` to a new criterion by learning only its embedding row,
/// initialised to the mean of the existing rows. Every other parameter is
/// frozen. With dev data the best epoch is kept, otherwise the last.
pub fn transfer(
    base: &Checkpoint,
    criterion: &str,
    train_sentences: &[SegmentedSentence],
    dev_sentences: &[SegmentedSentence],
    config: &TrainConfig,
) -> Result<TrainOutcome, Error> {
    config.validate()?;
    let mut model = base.model.clone();
    let index = model.add_criterion(criterion)?;
    let data = vec![examples(&model, train_sentences, index)];
    let dev = vec![DevSet {
        criterion: criterion.to_string(),
        index,
        sentences: dev_sentences.to_vec(),
    }];
    let table = model.embedding_params().criterion;
    let mut masks = vec![UpdateMask::Frozen; model.params.len()];
    masks[table.index()] = UpdateMask::Rows(index..index + 1);
    let epochs = if train_sentences.is_empty() { 0 } else { config.epochs };
    let config = TrainConfig {
        epochs,
        ..config.clone()
    };
    let (best, last, log, step_losses) = train_loop(model, &config, &data, &dev, |_| masks.clone(), |_| {})?;
    Ok(TrainOutcome {
        best,
        last,
        log,
        step_losses,
        coverage: None,
    })
}

/// Predicted word spans of preprocessed sentences under one criterion.
pub fn predict_spans(model: &Model, criterion: usize, sentences: &[SegmentedSentence]) -> Result<Vec<SpanSet>, Error> {
    sentences
        .iter()
        .map(|s| {
            let labels = model.predict(&s.tokens(), criterion)?;
            Ok(SpanSet::from_lengths(&crate::corpus::word_lengths(&labels)))
        })
        .collect()
}

/// Corpus-level P/R/F1 of the model on gold sentences.
pub fn score_sentences(model: &Model, criterion: usize, sentences: &[SegmentedSentence]) -> Result<Prf, Error> {
    let pred = predict_spans(model, criterion, sentences)?;
    let gold: Vec<SpanSet> = sentences.iter().map(|s| SpanSet::from_lengths(&s.word_lengths())).collect();
    Ok(f1(&gold, &pred)?)
}

/// A test corpus to score, with the training words of its criterion.
pub struct EvalSet<'a> {
    pub criterion: &'a str,
    pub sentences: &'a [SegmentedSentence],
    pub training_words: &'a HashSet<String>,
}

pub fn evaluate(model: &Model, sets: &[EvalSet<'_>]) -> Result<EvalReport, Error> {
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        let index = model.criterion_index(set.criterion)?;
        let pred = predict_spans(model, index, set.sentences)?;
        let gold: Vec<SpanSet> = set
            .sentences
            .iter()
            .map(|s| SpanSet::from_lengths(&s.word_lengths()))
            .collect();
        let words: Vec<Vec<String>> = set.sentences.iter().map(|s| s.word_strings()).collect();
        rows.push(CriterionScore {
            criterion: set.criterion.to_string(),
            prf: f1(&gold, &pred)?,
            oov: oov_recall(&words, &gold, &pred, set.training_words)?,
        });
    }
    Ok(EvalReport { rows })
}

/// Segments raw text under a criterion. Digit and Latin runs come back with
/// their original spelling and whitespace is dropped, so the words
/// concatenate to the width-normalised input without spaces.
pub fn segment(model: &Model, text: &str, criterion: &str) -> Result<Vec<String>, Error> {
    let index = model.criterion_index(criterion)?;
    let tokens = replace_runs(&normalize_width(text));
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let symbols: Vec<&str> = tokens.iter().map(|t| t.symbol.as_str()).collect();
    let labels = model.predict(&symbols, index)?;
    let surfaces: Vec<&str> = tokens.iter().map(|t| t.surface.as_str()).collect();
    Ok(bmes_to_words(&surfaces, &labels)?.into_iter().map(|w| w.concat()).collect())
}

/// Dev F1 of a checkpoint recomputed from scratch, keyed like
/// [`Checkpoint::dev_f1`].
pub fn rescore_dev(model: &Model, dev: &[(String, Vec<SegmentedSentence>)]) -> Result<BTreeMap<String, f64>, Error> {
    let mut out = BTreeMap::new();
    for (criterion, sentences) in dev {
        if sentences.is_empty() {
            continue;
        }
        let index = model.criterion_index(criterion)?;
        out.insert(criterion.clone(), score_sentences(model, index, sentences)?.f1);
    }
    Ok(out)
}
