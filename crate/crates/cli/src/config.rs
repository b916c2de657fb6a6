//! The TOML run configuration.
//!
//! ```toml
//! out_dir = "runs/demo"
//! seed = 1
//!
//! [[corpus]]
//! name = "pku"
//! criterion = "pku"          # defaults to the corpus name
//! script = "simplified"      # or "traditional"; metadata only
//! train = "data/pku/train.txt"
//! dev = "data/pku/dev.txt"   # optional; otherwise 10% of train
//! test = "data/pku/test.txt" # optional
//!
//! [model.encoder]
//! d_model = 256
//!
//! [train]
//! epochs = 100
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use mccws::model::ModelConfig;
use mccws::trainer::TrainConfig;
use mccws::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    #[default]
    Simplified,
    Traditional,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusDecl {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<String>,
    #[serde(default)]
    pub script: Script,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

impl CorpusDecl {
    pub fn criterion(&self) -> &str {
        self.criterion.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Overrides `train.seed` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, rename = "corpus")]
    pub corpora: Vec<CorpusDecl>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Which corpus files a command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Need {
    Train,
    Eval,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut config.out_dir);
        resolve(&mut config.train.pretrained_embeddings);
        for c in &mut config.corpora {
            resolve(&mut c.train);
            resolve(&mut c.dev);
            resolve(&mut c.test);
        }
        if let Some(seed) = config.seed {
            config.train.seed = seed;
        }
        Ok(config)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    /// Every problem with the configuration, reported together.
    pub fn validate(&self, need: Need) -> Result<(), Error> {
        let mut problems = Vec::new();
        if self.corpora.is_empty() {
            problems.push("no [[corpus]] entries".to_string());
        }
        let mut names = HashSet::new();
        let mut criteria = HashSet::new();
        for c in &self.corpora {
            if !names.insert(c.name.as_str()) {
                problems.push(format!("duplicate corpus name {}", c.name));
            }
            if !criteria.insert(c.criterion()) {
                problems.push(format!("duplicate criterion {}", c.criterion()));
            }
            let mut check = |label: &str, path: &Option<PathBuf>, required: bool| match path {
                Some(p) if !p.is_file() => problems.push(format!("corpus {}: {label} file {} not found", c.name, p.display())),
                None if required => problems.push(format!("corpus {}: missing {label} path", c.name)),
                _ => {}
            };
            check("train", &c.train, true);
            check("dev", &c.dev, false);
            check("test", &c.test, false);
        }
        if need == Need::Eval && !self.corpora.iter().any(|c| c.test.is_some()) {
            problems.push("no corpus declares a test file".to_string());
        }
        if let Some(p) = &self.train.pretrained_embeddings {
            if !p.is_file() {
                problems.push(format!("embedding file {} not found", p.display()));
            }
        }
        for result in [self.model.validate(), self.train.validate()] {
            match result {
                Err(Error::Config(m)) => problems.push(m),
                Err(e) => problems.push(e.to_string()),
                Ok(()) => {}
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
