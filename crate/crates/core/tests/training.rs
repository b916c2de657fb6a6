use std::collections::HashSet;
use std::io::Write;

use mccws::checkpoint::Checkpoint;
use mccws::corpus::{prepare_lines, training_word_set, SegmentedSentence};
use mccws::decoder::DecoderKind;
use mccws::embedding::EmbeddingConfig;
use mccws::encoder::EncoderConfig;
use mccws::model::ModelConfig;
use mccws::synthetic::{SynthCriterion, SyntheticSuite};
use mccws::trainer::{
    evaluate, make_batches, rescore_dev, segment, train, transfer, CorpusSplit, EvalSet, TrainConfig, TrainOutcome,
};
use mccws::Error;

fn small_config() -> ModelConfig {
    ModelConfig {
        embedding: EmbeddingConfig {
            dim: 8,
            ..Default::default()
        },
        encoder: EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            d_model: 16,
            d_ff: 32,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        },
        decoder: DecoderKind::Crf,
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        warmup_steps: 20,
        lr_factor: 2.0,
        ..Default::default()
    }
}

fn toy() -> Vec<SegmentedSentence> {
    let lines = [
        "天气 好", "我 去 学校", "天气 不 好", "他 去 北京", "学校 很 大", "北京 天气 好", "我 很 好",
        "他 不 去", "学校 天气", "我 去 北京", "天气 很 大", "他 很 好", "北京 很 大", "我 不 去",
        "学校 好", "他 去 学校", "天气 大", "北京 好", "我 去", "他 好",
    ];
    prepare_lines(&lines, false)
}

fn synthetic_ab(n: usize) -> Vec<CorpusSplit> {
    let suite = SyntheticSuite::new();
    [(SynthCriterion::A, 1), (SynthCriterion::B, 2)]
        .into_iter()
        .map(|(c, seed)| CorpusSplit {
            criterion: c.name().into(),
            train: prepare_lines(&suite.corpus(c, n, seed), false),
            dev: prepare_lines(&suite.corpus(c, 100, seed + 10), false),
        })
        .collect()
}

#[test]
fn batches_cover_each_corpus_once() {
    let lengths = vec![vec![3; 512], (1..=100).collect::<Vec<_>>()];
    let batches = make_batches(&lengths, 256, 9, 1);
    assert_eq!(batches.iter().filter(|b| b.corpus == 0).count(), 2);
    assert_eq!(batches.len(), 3);
    for (c, lens) in lengths.iter().enumerate() {
        let mut seen: Vec<usize> = batches
            .iter()
            .filter(|b| b.corpus == c)
            .flat_map(|b| b.sentences.iter().copied())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..lens.len()).collect::<Vec<_>>());
    }
    for b in &batches {
        let expected: Vec<usize> = b.sentences.iter().map(|&i| lengths[b.corpus][i]).collect();
        assert_eq!(b.lengths, expected);
        assert_eq!(b.max_len, *expected.iter().max().unwrap());
    }
    assert_eq!(batches, make_batches(&lengths, 256, 9, 1));
    assert_ne!(batches, make_batches(&lengths, 256, 9, 2));
}

#[test]
fn toy_corpus_is_memorised() {
    let data = toy();
    let split = CorpusSplit {
        criterion: "toy".into(),
        train: data.clone(),
        dev: data,
    };
    let out = train(&small_config(), &quick(40), &[split], |_| {}).unwrap();
    assert_eq!(out.best.dev_f1["toy"], 1.0);
    let losses = &out.step_losses;
    assert!(losses.last().unwrap() < &(losses[0] / 10.0));
}

#[test]
fn best_epoch_is_the_dev_maximum() {
    let mut logs = Vec::new();
    let out = train(&small_config(), &quick(6), &synthetic_ab(120), |e| logs.push(e.clone())).unwrap();
    assert_eq!(logs, out.log);
    assert_eq!(logs.len(), 6);
    let best = logs.iter().filter_map(|e| e.macro_f1).fold(f64::NEG_INFINITY, f64::max);
    let chosen = out.best.dev_f1.values().sum::<f64>() / out.best.dev_f1.len() as f64;
    assert!((chosen - best).abs() < 1e-12);
    assert!(chosen >= logs.last().unwrap().macro_f1.unwrap());
    let epoch = logs.iter().find(|e| e.macro_f1 == Some(best)).unwrap();
    assert_eq!(out.best.step, epoch.steps);
}

fn write_embeddings(dim: usize) -> tempfile::NamedTempFile {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "4 {dim}").unwrap();
    for (k, sym) in ["天", "气", "好", "天气"].iter().enumerate() {
        let values: Vec<String> = (0..dim).map(|j| format!("{}", 0.01 * (k * dim + j) as f64)).collect();
        writeln!(file, "{sym} {}", values.join(" ")).unwrap();
    }
    file
}

fn run_with_embeddings(freeze: usize, epochs: usize) -> TrainOutcome {
    let file = write_embeddings(8);
    let config = TrainConfig {
        pretrained_embeddings: Some(file.path().to_path_buf()),
        freeze_pretrained_epochs: freeze,
        ..quick(epochs)
    };
    let split = CorpusSplit {
        criterion: "toy".into(),
        train: toy(),
        dev: Vec::new(),
    };
    train(&small_config(), &config, &[split], |_| {}).unwrap()
}

#[test]
fn pretrained_tables_stay_fixed_while_frozen() {
    let frozen = run_with_embeddings(2, 2);
    let coverage = frozen.coverage.unwrap();
    assert_eq!((coverage.unigrams_found, coverage.bigrams_found, coverage.skipped), (3, 1, 0));
    let model = &frozen.last;
    let uni = model.params.get(model.embedding_params().unigram);
    let row = model.vocab.unigrams.get("气").unwrap();
    let expected: Vec<f64> = (8..16).map(|j| 0.01 * j as f64).collect();
    assert_eq!(uni.row(row), expected.as_slice());
    let bi = model.params.get(model.embedding_params().bigram);
    let row = model.vocab.bigrams.get("天气").unwrap();
    assert_eq!(bi.row(row)[0], 0.24);

    // One epoch past the freeze boundary the tables move.
    let thawed = run_with_embeddings(2, 3);
    let model = &thawed.last;
    let uni = model.params.get(model.embedding_params().unigram);
    assert_ne!(uni.row(model.vocab.unigrams.get("气").unwrap()), expected.as_slice());
}

#[test]
fn missing_embedding_file_is_an_io_error() {
    let config = TrainConfig {
        pretrained_embeddings: Some("/nonexistent/vectors.txt".into()),
        ..quick(1)
    };
    let split = CorpusSplit {
        criterion: "toy".into(),
        train: toy(),
        dev: Vec::new(),
    };
    let err = train(&small_config(), &config, &[split], |_| {}).err().unwrap();
    assert_eq!(err.kind(), "io");
}

#[test]
fn transfer_only_moves_the_new_row() {
    let base = train(&small_config(), &quick(3), &synthetic_ab(60), |_| {}).unwrap().best;
    let shots = prepare_lines(&SyntheticSuite::new().corpus(SynthCriterion::C, 20, 5), false);
    let out = transfer(&base, "C", &shots, &shots, &quick(3)).unwrap();
    let moved = &out.best.model;
    let table = moved.embedding_params().criterion;
    for (id, p) in base.model.params.iter() {
        let after = moved.params.get(id);
        if id == table {
            assert_eq!(after.rows(), 3);
            assert_eq!(&after.data()[..p.value.len()], p.value.data());
        } else {
            assert_eq!(after, &p.value, "{} changed", p.name);
        }
    }
    let mean: Vec<f64> = (0..16)
        .map(|c| (p_get(&base, table, 0, c) + p_get(&base, table, 1, c)) / 2.0)
        .collect();
    assert_ne!(moved.params.get(table).row(2), mean.as_slice());
    assert_eq!(out.log.len(), 3);

    let none = transfer(&base, "C", &[], &[], &quick(3)).unwrap();
    let row = none.best.model.params.get(table).row(2).to_vec();
    for (a, b) in row.iter().zip(&mean) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(none.log.is_empty());
    assert!(transfer(&base, "A", &shots, &[], &quick(1)).is_err());
}

fn p_get(ckpt: &Checkpoint, id: mccws::numeric::ParamId, r: usize, c: usize) -> f64 {
    ckpt.model.params.get(id).get(r, c)
}

#[test]
fn saved_checkpoint_rescores_to_its_dev_f1() {
    let corpora = synthetic_ab(80);
    let out = train(&small_config(), &quick(2), &corpora, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let dev: Vec<(String, Vec<SegmentedSentence>)> =
        corpora.iter().map(|c| (c.criterion.clone(), c.dev.clone())).collect();
    let scores = rescore_dev(&loaded.model, &dev).unwrap();
    assert_eq!(scores, out.best.dev_f1);
    assert_eq!(loaded.step, out.best.step);
}

#[test]
fn segmentation_follows_the_requested_criterion() {
    let suite = SyntheticSuite::new();
    let config = ModelConfig {
        encoder: EncoderConfig {
            d_model: 32,
            d_ff: 64,
            num_layers: 1,
            ..small_config().encoder
        },
        ..small_config()
    };
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 16,
        warmup_steps: 100,
        ..Default::default()
    };
    let model = train(&config, &tc, &synthetic_ab(1500), |_| {}).unwrap().best.model;
    let texts = suite.disagreements(SynthCriterion::A, SynthCriterion::B, 20, 3);
    let differing = texts
        .iter()
        .filter(|t| segment(&model, t, "A").unwrap() != segment(&model, t, "B").unwrap())
        .count();
    assert!(differing >= 15, "{differing} of 20");
    for t in &texts {
        assert_eq!(segment(&model, t, "B").unwrap().concat(), *t);
    }
    assert!(segment(&model, "", "A").unwrap().is_empty());
    assert!(segment(&model, " \t ", "A").unwrap().is_empty());
    assert_eq!(segment(&model, "ＡＢ 12", "A").unwrap().concat(), "AB12");
    match segment(&model, "天", "Z") {
        Err(Error::UnknownCriterion { known, .. }) => assert_eq!(known, vec!["A", "B"]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn evaluation_reports_oov_against_training_words() {
    let data = toy();
    let split = CorpusSplit {
        criterion: "toy".into(),
        train: data.clone(),
        dev: Vec::new(),
    };
    let model = train(&small_config(), &quick(30), &[split], |_| {}).unwrap().best.model;
    let words = training_word_set(&data);
    let test = prepare_lines(&["天气 好", "上海 很 大"], false);
    let report = evaluate(
        &model,
        &[EvalSet {
            criterion: "toy",
            sentences: &test,
            training_words: &words,
        }],
    )
    .unwrap();
    assert_eq!(report.rows.len(), 1);
    assert!(!report.rows[0].oov.vacuous);
    let all: HashSet<String> = test.iter().flat_map(|s| s.word_strings()).collect();
    let vacuous = evaluate(
        &model,
        &[EvalSet {
            criterion: "toy",
            sentences: &test,
            training_words: &all,
        }],
    )
    .unwrap();
    assert!(vacuous.rows[0].oov.vacuous);
    let mut tsv = Vec::new();
    vacuous.write_tsv(&mut tsv).unwrap();
    let text = String::from_utf8(tsv).unwrap();
    assert!(text.lines().nth(1).unwrap().ends_with("100.00*"));
    assert!(text.lines().last().unwrap().starts_with("Avg.\t"));
}
