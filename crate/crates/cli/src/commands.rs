use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mccws::analysis::{self, criterion_projection};
use mccws::checkpoint::Checkpoint;
use mccws::corpus::{
    build_vocab, corpus_stats, prepare_lines, read_lines, split_train_dev, training_word_set, CorpusStats,
    SegmentedSentence, VocabSource,
};
use mccws::synthetic::SyntheticSuite;
use mccws::trainer::{self, score_sentences, CorpusSplit, EvalSet, TrainConfig};
use mccws::Error;

use crate::config::{CorpusDecl, Need, RunConfig};
use crate::{SynthArgs, TrainArgs, TransferArgs};

pub const DEV_RATIO: f64 = 0.1;

#[derive(Debug)]
pub enum Failure {
    Error(Error),
    /// The reader of standard output went away; not an error for a filter.
    BrokenPipe,
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Error(e.into())
    }
}

type Outcome = Result<(), Failure>;

/// Tabular output: a file when `--out` is given, otherwise standard output.
struct Sink {
    inner: Box<dyn Write>,
    name: PathBuf,
}

impl Sink {
    fn open(out: Option<&Path>) -> Result<Self, Failure> {
        Ok(match out {
            Some(path) => Sink {
                inner: Box::new(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?)),
                name: path.to_path_buf(),
            },
            None => Sink {
                inner: Box::new(std::io::stdout().lock()),
                name: PathBuf::from("<stdout>"),
            },
        })
    }

    fn fail(&self, e: std::io::Error) -> Failure {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            Failure::BrokenPipe
        } else {
            Failure::Error(Error::io(&self.name, e))
        }
    }

    fn line(&mut self, fields: &[String]) -> Outcome {
        writeln!(self.inner, "{}", fields.join("\t")).map_err(|e| self.fail(e))
    }

    fn text(&mut self, text: &str) -> Outcome {
        writeln!(self.inner, "{text}").map_err(|e| self.fail(e))
    }

    fn flush(&mut self) -> Outcome {
        self.inner.flush().map_err(|e| self.fail(e))
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), Error> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_sentences(path: &Path, sentences: &[SegmentedSentence]) -> Result<(), Error> {
    write_file(path, |w| sentences.iter().try_for_each(|s| writeln!(w, "{}", s.to_line())))
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------

struct RawFiles {
    name: String,
    train: PathBuf,
    test: Option<PathBuf>,
}

const TRAIN_SUFFIXES: [&str; 2] = ["_training.utf8", "_training.txt"];
const TEST_SUFFIXES: [&str; 2] = ["_test_gold.utf8", "_test_gold.txt"];

fn discover(raw_dir: &Path) -> Result<Vec<RawFiles>, Error> {
    let entries = std::fs::read_dir(raw_dir).map_err(|e| Error::io(raw_dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(raw_dir, e))?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        if let Some(name) = TRAIN_SUFFIXES.iter().find_map(|s| file.strip_suffix(s)) {
            let test = TEST_SUFFIXES
                .iter()
                .map(|s| raw_dir.join(format!("{name}{s}")))
                .find(|p| p.is_file());
            found.push(RawFiles {
                name: name.to_string(),
                train: path.clone(),
                test,
            });
        }
    }
    found.sort_by(|a, b| a.name.cmp(&b.name));
    if found.is_empty() {
        return Err(Error::Config(format!("no *_training.utf8 files in {}", raw_dir.display())));
    }
    Ok(found)
}

fn stats_row(corpus: &str, split: &str, n: usize, s: &CorpusStats) -> Vec<String> {
    vec![
        corpus.to_string(),
        split.to_string(),
        n.to_string(),
        s.words.to_string(),
        s.chars.to_string(),
        s.word_types.to_string(),
        s.char_types.to_string(),
        s.oov_rate.map(pct).unwrap_or_default(),
    ]
}

/// Writes `<out_dir>/<name>/{train,dev,test}.txt`, vocabulary tables and a
/// `run.toml` listing the corpora; prints per-corpus statistics.
pub fn preprocess(raw_dir: &Path, out_dir: &Path, seed: u64, out: Option<&Path>) -> Outcome {
    let found = discover(raw_dir)?;
    create_dir(out_dir)?;
    let mut rows = Vec::new();
    let mut trains = Vec::new();
    let mut decls = Vec::new();
    for files in &found {
        let all = prepare_lines(&read_lines(&files.train)?, true);
        let train_words = training_word_set(&all);
        rows.push(stats_row(&files.name, "train", all.len(), &corpus_stats(&all, None)));
        let (train, dev) = split_train_dev(all, DEV_RATIO, seed)?;
        let dir = out_dir.join(&files.name);
        create_dir(&dir)?;
        write_sentences(&dir.join("train.txt"), &train)?;
        write_sentences(&dir.join("dev.txt"), &dev)?;
        let mut decl = CorpusDecl {
            name: files.name.clone(),
            criterion: None,
            script: Default::default(),
            train: Some(PathBuf::from(&files.name).join("train.txt")),
            dev: Some(PathBuf::from(&files.name).join("dev.txt")),
            test: None,
        };
        if let Some(test_path) = &files.test {
            let test = prepare_lines(&read_lines(test_path)?, false);
            rows.push(stats_row(&files.name, "test", test.len(), &corpus_stats(&test, Some(&train_words))));
            write_sentences(&dir.join("test.txt"), &test)?;
            decl.test = Some(PathBuf::from(&files.name).join("test.txt"));
        }
        trains.push((files.name.clone(), train));
        decls.push(decl);
    }

    let sources: Vec<VocabSource> = trains
        .iter()
        .map(|(name, sentences)| VocabSource {
            criterion: name,
            sentences,
        })
        .collect();
    let vocab = build_vocab(&sources, 1, 1)?;
    write_file(&out_dir.join("vocab.unigram.tsv"), |w| vocab.unigrams.write_tsv(w))?;
    write_file(&out_dir.join("vocab.bigram.tsv"), |w| vocab.bigrams.write_tsv(w))?;
    write_file(&out_dir.join("vocab.criterion.tsv"), |w| vocab.criteria.write_tsv(w))?;
    let mut run = RunConfig {
        seed: Some(seed),
        corpora: decls,
        ..Default::default()
    };
    run.train.seed = seed;
    let toml = toml::to_string(&run).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&out_dir.join("run.toml"), |w| w.write_all(toml.as_bytes()))?;

    let mut sink = Sink::open(out)?;
    let header = ["corpus", "split", "sentences", "words", "chars", "word_types", "char_types", "oov_rate"];
    sink.line(&header.map(String::from))?;
    for row in &rows {
        sink.line(row)?;
    }
    sink.flush()
}

// ---------------------------------------------------------------------------

fn load_splits(config: &RunConfig) -> Result<Vec<CorpusSplit>, Error> {
    let mut out = Vec::with_capacity(config.corpora.len());
    for c in &config.corpora {
        let path = c.train.as_ref().ok_or_else(|| Error::Config(format!("corpus {}: missing train path", c.name)))?;
        let all = prepare_lines(&read_lines(path)?, true);
        let (train, dev) = match &c.dev {
            Some(dev) => (all, prepare_lines(&read_lines(dev)?, true)),
            None => split_train_dev(all, DEV_RATIO, config.train.seed)?,
        };
        out.push(CorpusSplit {
            criterion: c.criterion().to_string(),
            train,
            dev,
        });
    }
    Ok(out)
}

/// Trains on every corpus and saves the best checkpoint. The per-epoch log
/// has columns `epoch steps train_loss dev_f1:<criterion>... macro_dev_f1`.
pub fn train(args: &TrainArgs) -> Outcome {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(decoder) = args.decoder {
        config.model.decoder = decoder;
    }
    if args.no_bigram {
        config.model.embedding.bigram = false;
    }
    if let Some(path) = &args.embeddings {
        config.train.pretrained_embeddings = Some(path.clone());
    }
    config.validate(Need::Train)?;
    let corpora = load_splits(&config)?;
    let path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| config.out_dir().join("model.ckpt"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }

    let criteria: Vec<String> = config.corpora.iter().map(|c| c.criterion().to_string()).collect();
    let mut sink = Sink::open(args.output.out.as_deref())?;
    let mut header = vec!["epoch".to_string(), "steps".into(), "train_loss".into()];
    header.extend(criteria.iter().map(|c| format!("dev_f1:{c}")));
    header.push("macro_dev_f1".into());
    sink.line(&header)?;
    let mut write_error = None;
    let outcome = trainer::train(&config.model, &config.train, &corpora, |e| {
        if write_error.is_some() {
            return;
        }
        let mut row = vec![e.epoch.to_string(), e.steps.to_string(), format!("{:.6}", e.train_loss)];
        for c in &criteria {
            row.push(e.dev_f1.iter().find(|(n, _)| n == c).map(|(_, f)| pct(*f)).unwrap_or_default());
        }
        row.push(e.macro_f1.map(pct).unwrap_or_default());
        if let Err(err) = sink.line(&row).and_then(|_| sink.flush()) {
            write_error = Some(err);
        }
    })?;
    if let Some(err) = write_error {
        return Err(err);
    }
    if let Some(cov) = outcome.coverage {
        eprintln!(
            "pretrained vectors: {}/{} unigrams, {}/{} bigrams, {} unused",
            cov.unigrams_found, cov.unigrams_total, cov.bigrams_found, cov.bigrams_total, cov.skipped
        );
    }
    outcome.best.save(&path)?;
    eprintln!("saved step {} checkpoint to {}", outcome.best.step, path.display());
    Ok(())
}

// ---------------------------------------------------------------------------

/// Per-criterion P/R/F1 and OOV recall on every declared test file, plus the
/// average row.
pub fn eval(config_path: &Path, checkpoint: &Path, out: Option<&Path>) -> Outcome {
    let config = RunConfig::load(config_path)?;
    config.validate(Need::Eval)?;
    let model = Checkpoint::load(checkpoint)?.model;
    let mut loaded = Vec::new();
    for c in config.corpora.iter().filter(|c| c.test.is_some()) {
        model.criterion_index(c.criterion())?;
        let test = prepare_lines(&read_lines(c.test.as_ref().expect("filtered"))?, false);
        let train = c.train.as_ref().expect("validated");
        let words = training_word_set(&prepare_lines(&read_lines(train)?, true));
        loaded.push((c.criterion().to_string(), test, words));
    }
    let sets: Vec<EvalSet> = loaded
        .iter()
        .map(|(criterion, sentences, words)| EvalSet {
            criterion,
            sentences,
            training_words: words,
        })
        .collect();
    let report = trainer::evaluate(&model, &sets)?;
    let mut sink = Sink::open(out)?;
    let mut buf = Vec::new();
    report.write_tsv(&mut buf).map_err(|e| Error::io(Path::new("<buffer>"), e))?;
    sink.inner.write_all(&buf).map_err(|e| sink.fail(e))?;
    sink.flush()
}

/// Streams segmented lines: one space-joined output line per input line.
pub fn segment(checkpoint: &Path, criterion: &str, input: Option<&Path>, out: Option<&Path>) -> Outcome {
    let model = Checkpoint::load(checkpoint)?.model;
    model.criterion_index(criterion)?;
    let (reader, name): (Box<dyn BufRead>, PathBuf) = match input {
        Some(path) => (
            Box::new(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)),
            path.to_path_buf(),
        ),
        None => (Box::new(std::io::stdin().lock()), PathBuf::from("<stdin>")),
    };
    let mut sink = Sink::open(out)?;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(&name, e))?;
        let words = trainer::segment(&model, line.trim_start_matches('\u{feff}'), criterion)?;
        sink.text(&words.join(" "))?;
        if out.is_none() {
            sink.flush()?;
        }
    }
    sink.flush()
}

/// Transfers to a new criterion once per shot count; columns
/// `shots P R F1` on the test file.
pub fn transfer(args: &TransferArgs) -> Outcome {
    let base = Checkpoint::load(&args.checkpoint)?;
    if base.model.vocab.criterion(&args.criterion).is_some() {
        return Err(Error::Config(format!("criterion {} already exists in the base model", args.criterion)).into());
    }
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?.train,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let pool = prepare_lines(&read_lines(&args.train)?, true);
    let test = prepare_lines(&read_lines(&args.test)?, false);
    let dev = match &args.dev {
        Some(path) => prepare_lines(&read_lines(path)?, true),
        None => Vec::new(),
    };
    if let Some(&n) = args.shots.iter().find(|&&n| n > pool.len()) {
        return Err(Error::Config(format!("{n} shots requested but {} has {} sentences", args.train.display(), pool.len())).into());
    }
    if let Some(dir) = &args.save_dir {
        create_dir(dir)?;
    }
    let mut sink = Sink::open(args.output.out.as_deref())?;
    sink.line(&["shots", "P", "R", "F1"].map(String::from))?;
    for &n in &args.shots {
        let outcome = trainer::transfer(&base, &args.criterion, &pool[..n], &dev, &config)?;
        let model = &outcome.best.model;
        let prf = score_sentences(model, model.criterion_index(&args.criterion)?, &test)?;
        sink.line(&[n.to_string(), pct(prf.precision), pct(prf.recall), pct(prf.f1)])?;
        sink.flush()?;
        if let Some(dir) = &args.save_dir {
            outcome.best.save(&dir.join(format!("{}-{n}.ckpt", args.criterion)))?;
        }
    }
    Ok(())
}

/// Columns `criterion x y`.
pub fn analyze_criteria(checkpoint: &Path, out: Option<&Path>) -> Outcome {
    let model = Checkpoint::load(checkpoint)?.model;
    let points = criterion_projection(&model)?;
    let mut sink = Sink::open(out)?;
    sink.line(&["criterion", "x", "y"].map(String::from))?;
    for p in points {
        sink.line(&[p.name, format!("{:.6}", p.x), format!("{:.6}", p.y)])?;
    }
    sink.flush()
}

/// Columns `rank bigram cosine`.
pub fn nearest_bigrams(checkpoint: &Path, query: &str, k: usize, out: Option<&Path>) -> Outcome {
    let model = Checkpoint::load(checkpoint)?.model;
    let neighbors = analysis::nearest_bigrams(&model, query, k)?;
    let mut sink = Sink::open(out)?;
    sink.line(&["rank", "bigram", "cosine"].map(String::from))?;
    for (i, n) in neighbors.into_iter().enumerate() {
        sink.line(&[(i + 1).to_string(), n.symbol, format!("{:.6}", n.similarity)])?;
    }
    sink.flush()
}

pub fn synth(args: &SynthArgs) -> Outcome {
    let suite = SyntheticSuite::new();
    let sentences = match args.disagree_with {
        Some(other) => suite.disagreements(args.criterion, other, args.n, args.seed),
        None => suite.raw_sentences(args.n, args.seed),
    };
    let mut sink = Sink::open(args.output.out.as_deref())?;
    for s in sentences {
        if args.raw {
            sink.text(&s)?;
        } else {
            sink.text(&suite.segment(&s, args.criterion).join(" "))?;
        }
    }
    sink.flush()
}
