//! Run configuration: defaults, `key = value` config files, validation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cooc_graph::DEFAULT_WINDOW;
use crate::embeddings::{EmbeddingSource, DEFAULT_HASHED_DIM};
use crate::error::{KpeError, Result};
use crate::eval::TopK;
use crate::gcn::DEFAULT_DIM;
use crate::link_prediction::{GcnTrainConfig, DEFAULT_EPOCHS, DEFAULT_LR, DEFAULT_NEG_RATIO};
use crate::tagger::{TaggerTrainConfig, DEFAULT_CHUNK, DEFAULT_PROJECTION};

/// Which token sequences one GCN is trained on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphScope {
    /// One graph and one GCN per document.
    #[default]
    Document,
    /// One graph and one GCN over every document processed together.
    Corpus,
}

impl FromStr for GraphScope {
    type Err = KpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "document" => Ok(GraphScope::Document),
            "corpus" => Ok(GraphScope::Corpus),
            other => Err(KpeError::Config(format!("unknown graph scope {other:?}"))),
        }
    }
}

impl fmt::Display for GraphScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphScope::Document => "document",
            GraphScope::Corpus => "corpus",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub window: usize,
    pub neg_ratio: usize,
    /// Width of the GCN input features and of every GCN layer.
    pub gcn_dim: usize,
    pub gcn_layers: usize,
    pub gcn_epochs: usize,
    pub gcn_lr: f64,
    pub graph_scope: GraphScope,
    pub batch: usize,
    pub tagger_epochs: usize,
    pub patience: usize,
    pub anneal: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub projection: usize,
    pub chunk: usize,
    pub no_graph: bool,
    pub seed: u64,
    /// `hashed:<seed>` or a path to a KPE1 file.
    pub embeddings: String,
    pub hashed_dim: usize,
    pub k: TopK,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tagger = TaggerTrainConfig::default();
        RunConfig {
            window: DEFAULT_WINDOW,
            neg_ratio: DEFAULT_NEG_RATIO,
            gcn_dim: DEFAULT_DIM,
            gcn_layers: 2,
            gcn_epochs: DEFAULT_EPOCHS,
            gcn_lr: DEFAULT_LR,
            graph_scope: GraphScope::Document,
            batch: tagger.batch_size,
            tagger_epochs: tagger.epochs,
            patience: tagger.patience,
            anneal: tagger.anneal,
            lr: tagger.lr,
            weight_decay: tagger.weight_decay,
            projection: DEFAULT_PROJECTION,
            chunk: DEFAULT_CHUNK,
            no_graph: false,
            seed: 0,
            embeddings: "hashed:0".into(),
            hashed_dim: DEFAULT_HASHED_DIM,
            k: TopK::All,
            train: None,
            validation: None,
            test: None,
            out_dir: PathBuf::from("kpe-out"),
        }
    }
}

impl RunConfig {
    /// Parses a TOML `key = value` file; missing keys take their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| KpeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("window", self.window),
            ("neg_ratio", self.neg_ratio),
            ("gcn_dim", self.gcn_dim),
            ("gcn_layers", self.gcn_layers),
            ("gcn_epochs", self.gcn_epochs),
            ("batch", self.batch),
            ("tagger_epochs", self.tagger_epochs),
            ("patience", self.patience),
            ("projection", self.projection),
            ("chunk", self.chunk),
            ("hashed_dim", self.hashed_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(KpeError::Config(format!("{name} must be positive")));
            }
        }
        if self.window < 2 {
            return Err(KpeError::Config("window must be at least 2".into()));
        }
        if !(self.anneal > 0.0 && self.anneal <= 1.0) {
            return Err(KpeError::Config(format!("anneal must be in (0, 1], got {}", self.anneal)));
        }
        for (name, v) in [("lr", self.lr), ("gcn_lr", self.gcn_lr), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(KpeError::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        self.embedding_source()?;
        Ok(())
    }

    pub fn embedding_source(&self) -> Result<EmbeddingSource> {
        self.embeddings.parse()
    }

    /// Layer widths handed to the GCN: input width plus one entry per layer.
    pub fn gcn_dims(&self) -> Vec<usize> {
        vec![self.gcn_dim; self.gcn_layers + 1]
    }

    pub fn gcn_train_config(&self, seed: u64) -> GcnTrainConfig {
        GcnTrainConfig {
            epochs: self.gcn_epochs,
            lr: self.gcn_lr,
            seed,
            ..GcnTrainConfig::default()
        }
    }

    pub fn tagger_train_config(&self) -> TaggerTrainConfig {
        TaggerTrainConfig {
            batch_size: self.batch,
            epochs: self.tagger_epochs,
            lr: self.lr,
            patience: self.patience,
            anneal: self.anneal,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }
}
