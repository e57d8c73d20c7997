//! End-to-end orchestration: graphs, GCN features, contextual features,
//! tagger training, prediction, decoding and evaluation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{GraphScope, RunConfig};
use crate::cooc_graph::CoocGraph;
use crate::corpus::{load_corpus, CorpusFormat, Document};
use crate::decode::{decode_bio, ScoredPhrase};
use crate::embeddings::EmbeddingProvider;
use crate::error::{KpeError, Result};
use crate::eval::{evaluate_corpus, EvalReport};
use crate::gcn::{GcnModel, NodeEmbeddings};
use crate::link_prediction::{make_edge_dataset, train_gcn, GcnTrainingLog};
use crate::tagger::{predict_chunked, train_tagger, SequenceExample, TaggerModel, TaggerTrainingLog};

/// Stable per-document seed derived from the run seed.
pub fn document_seed(seed: u64, doc_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(doc_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// A trained encoder together with the graph it embeds.
#[derive(Clone, Debug)]
pub struct EncodedGraph {
    pub graph: CoocGraph,
    pub model: GcnModel,
    pub embeddings: NodeEmbeddings,
    /// `None` when the graph had no edges to learn from.
    pub log: Option<GcnTrainingLog>,
}

/// Builds a graph, trains a GCN on its edges and embeds every node. The
/// encoder is initialized from `config.seed`; edge sampling and the
/// held-out split use `sample_seed`.
pub fn encode_graph(graph: CoocGraph, config: &RunConfig, sample_seed: u64) -> Result<EncodedGraph> {
    let init = GcnModel::init(graph.node_count(), &config.gcn_dims(), config.seed)?;
    let (model, log) = if graph.edge_count() == 0 {
        (init, None)
    } else {
        let data = make_edge_dataset(&graph, config.neg_ratio, sample_seed)?;
        let (m, log) = train_gcn(&init, &graph, &data, &config.gcn_train_config(sample_seed))?;
        (m, Some(log))
    };
    let embeddings = model.forward(&graph)?;
    Ok(EncodedGraph {
        graph,
        model,
        embeddings,
        log,
    })
}

/// Per-token rows of the node embeddings.
pub fn token_rows(encoded: &EncodedGraph, doc: &Document) -> Result<Array2<f64>> {
    let dim = encoded.embeddings.dim();
    let mut out = Array2::zeros((doc.tokens.len(), dim));
    for (mut row, tok) in out.rows_mut().into_iter().zip(&doc.tokens) {
        let node = encoded
            .graph
            .node_of(tok)
            .ok_or_else(|| KpeError::InvalidArgument(format!("token {tok:?} is not a graph node")))?;
        row.assign(&encoded.embeddings.row(node));
    }
    Ok(out)
}

/// Graph features for each document, one row per token. With the graph
/// branch disabled no GCN is trained and the rows are zero.
pub fn graph_features(docs: &[Document], config: &RunConfig) -> Result<Vec<Array2<f64>>> {
    if config.no_graph {
        return Ok(docs
            .iter()
            .map(|d| Array2::zeros((d.tokens.len(), config.gcn_dim)))
            .collect());
    }
    match config.graph_scope {
        GraphScope::Document => docs
            .par_iter()
            .map(|doc| {
                let graph = CoocGraph::build(&doc.tokens, config.window).map_err(|e| e.at_stage("build-graph", &doc.id))?;
                let encoded = encode_graph(graph, config, document_seed(config.seed, &doc.id))
                    .map_err(|e| e.at_stage("train-gcn", &doc.id))?;
                token_rows(&encoded, doc).map_err(|e| e.at_stage("graph-features", &doc.id))
            })
            .collect(),
        GraphScope::Corpus => {
            let graph = CoocGraph::from_sequences(docs.iter().map(|d| &d.tokens[..]), config.window)
                .map_err(|e| e.at_stage("build-graph", "<corpus>"))?;
            let encoded = encode_graph(graph, config, document_seed(config.seed, "<corpus>"))
                .map_err(|e| e.at_stage("train-gcn", "<corpus>"))?;
            docs.iter()
                .map(|doc| token_rows(&encoded, doc).map_err(|e| e.at_stage("graph-features", &doc.id)))
                .collect()
        }
    }
}

/// Contextual features for each document as f64 rows.
pub fn context_features(docs: &[Document], provider: &EmbeddingProvider) -> Result<Vec<Array2<f64>>> {
    docs.par_iter()
        .map(|doc| {
            provider
                .embed_document(doc)
                .map(|e| e.vectors.mapv(f64::from))
                .map_err(|e| e.at_stage("embed", &doc.id))
        })
        .collect()
}

/// Graph and contextual features of a set of documents.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub graph: Vec<Array2<f64>>,
    pub context: Vec<Array2<f64>>,
}

pub fn features(docs: &[Document], config: &RunConfig, provider: &EmbeddingProvider) -> Result<FeatureSet> {
    Ok(FeatureSet {
        graph: graph_features(docs, config)?,
        context: context_features(docs, provider)?,
    })
}

/// Labeled, chunked training sequences.
pub fn sequence_examples(docs: &[Document], feats: &FeatureSet, chunk: usize) -> Result<Vec<SequenceExample>> {
    let mut out = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        let labels = doc.labels.clone().ok_or_else(|| KpeError::Unlabeled(doc.id.clone()))?;
        let ex = SequenceExample {
            graph: feats.graph[i].clone(),
            context: feats.context[i].clone(),
            labels,
        };
        out.extend(ex.chunked(chunk));
    }
    Ok(out)
}

/// Trains a tagger from labeled documents. Validation may be empty.
pub fn fit_tagger(
    train: &[Document],
    validation: &[Document],
    config: &RunConfig,
    provider: &EmbeddingProvider,
) -> Result<(TaggerModel, TaggerTrainingLog)> {
    let train_feats = features(train, config, provider)?;
    let val_feats = features(validation, config, provider)?;
    let train_ex = sequence_examples(train, &train_feats, config.chunk)?;
    let val_ex = sequence_examples(validation, &val_feats, config.chunk)?;
    let init = TaggerModel::init(config.gcn_dim, provider.dim(), config.projection, !config.no_graph, config.seed)?;
    train_tagger(&init, &train_ex, &val_ex, &config.tagger_train_config())
}

/// One line of the prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub keyphrases: Vec<ScoredPhrase>,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Per-token `[p_B, p_I, p_O]`.
    #[serde(default)]
    pub probabilities: Vec<[f64; 3]>,
}

pub fn predict_documents(
    model: &TaggerModel,
    docs: &[Document],
    config: &RunConfig,
    provider: &EmbeddingProvider,
) -> Result<Vec<PredictionRecord>> {
    let feats = features(docs, config, provider)?;
    docs.iter()
        .enumerate()
        .map(|(i, doc)| {
            let pred = predict_chunked(model, &feats.graph[i], &feats.context[i], config.chunk)
                .map_err(|e| e.at_stage("predict", &doc.id))?;
            let phrases = decode_bio(&doc.tokens, &pred).map_err(|e| e.at_stage("decode", &doc.id))?;
            Ok(PredictionRecord {
                id: doc.id.clone(),
                keyphrases: phrases.phrases,
                tags: pred.labels.iter().map(ToString::to_string).collect(),
                probabilities: pred.probs.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect(),
            })
        })
        .collect()
}

/// Writes predictions as JSON lines, preceded by a `{"config": ...}` line.
pub fn write_predictions(path: &Path, config: &RunConfig, records: &[PredictionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &serde_json::json!({ "config": config.to_json() }))?;
    writeln!(w)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a prediction file into id -> ranked phrase texts. Header lines
/// without an `id` are skipped.
pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| KpeError::Load {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if value.get("id").is_none() && value.get("config").is_some() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_value(value).map_err(|e| KpeError::Load {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(rec.id, rec.keyphrases.into_iter().map(|p| p.text).collect());
    }
    Ok(out)
}

/// Writes pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Evaluation report as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config: serde_json::Value,
    pub ablation_no_graph: bool,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub tagger_log: TaggerTrainingLog,
    pub model_path: PathBuf,
    pub predictions_path: PathBuf,
    pub report_path: PathBuf,
}

/// Holds out a seeded tenth of the training documents when no validation
/// split is given.
pub fn carve_validation(mut train: Vec<Document>, seed: u64) -> (Vec<Document>, Vec<Document>) {
    if train.len() < 2 {
        return (train, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_0a11);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = (train.len() / 10).max(1);
    let mut val_idx: Vec<usize> = idx[..n_val].to_vec();
    val_idx.sort_unstable();
    let mut validation = Vec::with_capacity(n_val);
    for &i in val_idx.iter().rev() {
        validation.push(train.remove(i));
    }
    validation.reverse();
    (train, validation)
}

/// Runs every stage for the splits named in `config` and writes the
/// checkpoint, training log, predictions and report into `config.out_dir`.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let train_path = config
        .train
        .as_ref()
        .ok_or_else(|| KpeError::Config("`train` corpus path is required".into()))?;
    let test_path = config
        .test
        .as_ref()
        .ok_or_else(|| KpeError::Config("`test` corpus path is required".into()))?;
    let train = load_corpus(train_path, CorpusFormat::Jsonl)?.into_documents();
    let test = load_corpus(test_path, CorpusFormat::Jsonl)?.into_documents();
    let (train, validation) = match &config.validation {
        Some(p) => (train, load_corpus(p, CorpusFormat::Jsonl)?.into_documents()),
        None => carve_validation(train, config.seed),
    };
    run_on_documents(config, &train, &validation, &test)
}

/// [`run_pipeline`] over documents already in memory.
pub fn run_on_documents(
    config: &RunConfig,
    train: &[Document],
    validation: &[Document],
    test: &[Document],
) -> Result<PipelineOutcome> {
    config.validate()?;
    let provider = EmbeddingProvider::open(&config.embedding_source()?, config.hashed_dim)?;
    fs::create_dir_all(&config.out_dir)?;
    let out = |name: &str| config.out_dir.join(name);

    let (model, tagger_log) = fit_tagger(train, validation, config, &provider)?;
    let model_path = out("tagger.tag1");
    model.save(&model_path)?;
    write_json(&out("tagger.tag1.json"), &serde_json::json!({ "config": config.to_json() }))?;
    write_json(
        &out("tagger-log.json"),
        &serde_json::json!({ "config": config.to_json(), "log": tagger_log }),
    )?;
    // Predict with the checkpoint as stored so `predict --model` reproduces
    // these outputs exactly.
    let model = TaggerModel::load(&model_path)?;

    let records = predict_documents(&model, test, config, &provider)?;
    let predictions_path = out("predictions.jsonl");
    write_predictions(&predictions_path, config, &records)?;

    let preds = read_predictions(&predictions_path)?;
    let report = evaluate_corpus(test, &preds, config.k)?;
    let report_path = out("report.json");
    write_json(
        &report_path,
        &ReportFile {
            config: config.to_json(),
            ablation_no_graph: config.no_graph,
            report: report.clone(),
        },
    )?;
    Ok(PipelineOutcome {
        report,
        tagger_log,
        model_path,
        predictions_path,
        report_path,
    })
}
