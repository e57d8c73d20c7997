use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use kpe_core::config::{GraphScope, RunConfig};
use kpe_core::cooc_graph::CoocGraph;
use kpe_core::corpus::{load_corpus, CorpusFormat, Document};
use kpe_core::embeddings::{EmbeddingProvider, Kpe1Writer};
use kpe_core::eval::{evaluate_corpus, TopK};
use kpe_core::pipeline::{
    document_seed, encode_graph, fit_tagger, predict_documents, read_predictions, run_pipeline, write_json,
    write_predictions,
};
use kpe_core::tagger::TaggerModel;

#[derive(Parser)]
#[command(name = "kpe", version, about = "Graph-enhanced keyphrase extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump co-occurrence graphs as JSON lines.
    BuildGraph {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        graph_scope: Option<GraphScope>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train link-prediction GCNs and write one checkpoint per graph.
    TrainGcn {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        graph: GraphArgs,
        /// GCN training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write contextual token embeddings for a corpus as a KPE1 file.
    Embed {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// `hashed:<seed>` or an existing KPE1 file to subset.
        #[arg(long, default_value = "hashed:0")]
        embeddings: String,
        /// Width of hashed embeddings.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the BIO tagger and write a TAG1 checkpoint.
    TrainTagger {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Validation corpus; a tenth of the training corpus when omitted.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tag a corpus with a trained checkpoint and write predictions JSONL.
    Predict {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        model: PathBuf,
        /// Overrides the embedding source recorded with the model.
        #[arg(long)]
        embeddings: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against gold keyphrases; prints a JSON report.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value = "all")]
        k: TopK,
    },
    /// Train, predict and evaluate end to end.
    Run {
        /// TOML `key = value` file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        k: Option<TopK>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "jsonl")]
    format: CorpusFormat,
}

impl CorpusArgs {
    fn load(&self) -> Result<Vec<Document>> {
        Ok(load_corpus(&self.corpus, self.format)?.into_documents())
    }
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    neg_ratio: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    gcn_lr: Option<f64>,
    #[arg(long)]
    graph_scope: Option<GraphScope>,
}

impl GraphArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.window, self.window);
        set(&mut c.neg_ratio, self.neg_ratio);
        set(&mut c.gcn_dim, self.dim);
        set(&mut c.gcn_layers, self.layers);
        set(&mut c.gcn_lr, self.gcn_lr);
        set(&mut c.graph_scope, self.graph_scope);
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    gcn_epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Tagger training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    anneal: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    projection: Option<usize>,
    #[arg(long)]
    chunk: Option<usize>,
    /// Zero the graph branch (ablation).
    #[arg(long)]
    no_graph: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    embeddings: Option<String>,
    #[arg(long)]
    hashed_dim: Option<usize>,
}

impl RunArgs {
    fn apply(&self, c: &mut RunConfig) {
        self.graph.apply(c);
        set(&mut c.gcn_epochs, self.gcn_epochs);
        set(&mut c.batch, self.batch);
        set(&mut c.tagger_epochs, self.epochs);
        set(&mut c.patience, self.patience);
        set(&mut c.anneal, self.anneal);
        set(&mut c.lr, self.lr);
        set(&mut c.weight_decay, self.weight_decay);
        set(&mut c.projection, self.projection);
        set(&mut c.chunk, self.chunk);
        set(&mut c.seed, self.seed);
        set(&mut c.embeddings, self.embeddings.clone());
        set(&mut c.hashed_dim, self.hashed_dim);
        c.no_graph |= self.no_graph;
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn build_graph(corpus: &CorpusArgs, window: Option<usize>, scope: Option<GraphScope>, out: Option<&Path>) -> Result<()> {
    let mut config = RunConfig::default();
    set(&mut config.window, window);
    set(&mut config.graph_scope, scope);
    config.validate()?;
    let docs = corpus.load()?;
    let mut w = open_output(out)?;
    match config.graph_scope {
        GraphScope::Document => {
            for doc in &docs {
                let g = CoocGraph::build(&doc.tokens, config.window)
                    .with_context(|| format!("stage build-graph failed for document {:?}", doc.id))?;
                serde_json::to_writer(&mut w, &json!({ "id": doc.id, "window": config.window, "graph": g.to_dump() }))?;
                writeln!(w)?;
            }
        }
        GraphScope::Corpus => {
            let g = CoocGraph::from_sequences(docs.iter().map(|d| &d.tokens[..]), config.window)?;
            serde_json::to_writer(&mut w, &json!({ "id": null, "window": config.window, "graph": g.to_dump() }))?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn train_gcn(corpus: &CorpusArgs, config: &RunConfig, out_dir: &Path) -> Result<()> {
    let docs = corpus.load()?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    let mut train_one = |id: Option<&str>, graph: CoocGraph, file: String| -> Result<()> {
        let label = id.unwrap_or("<corpus>");
        let encoded = encode_graph(graph, config, document_seed(config.seed, label))
            .with_context(|| format!("stage train-gcn failed for document {label:?}"))?;
        let path = out_dir.join(&file);
        encoded.model.save(&path)?;
        write_json(&sidecar(&path), &json!({ "id": id, "config": config.to_json(), "vocab": encoded.graph.vocab() }))?;
        entries.push(json!({ "id": id, "checkpoint": file, "log": encoded.log }));
        Ok(())
    };
    match config.graph_scope {
        GraphScope::Document => {
            for (i, doc) in docs.iter().enumerate() {
                let graph = CoocGraph::build(&doc.tokens, config.window)
                    .with_context(|| format!("stage build-graph failed for document {:?}", doc.id))?;
                train_one(Some(&doc.id), graph, format!("doc-{i:05}.gcn1"))?;
            }
        }
        GraphScope::Corpus => {
            let graph = CoocGraph::from_sequences(docs.iter().map(|d| &d.tokens[..]), config.window)?;
            train_one(None, graph, "corpus.gcn1".into())?;
        }
    }
    write_json(
        &out_dir.join("gcn-log.json"),
        &json!({ "config": config.to_json(), "graphs": entries }),
    )?;
    Ok(())
}

fn embed(corpus: &CorpusArgs, embeddings: &str, dim: Option<usize>, out: &Path) -> Result<()> {
    let mut config = RunConfig {
        embeddings: embeddings.to_owned(),
        ..RunConfig::default()
    };
    set(&mut config.hashed_dim, dim);
    config.validate()?;
    let provider = EmbeddingProvider::open(&config.embedding_source()?, config.hashed_dim)?;
    let docs = corpus.load()?;
    let mut writer = Kpe1Writer::create(out, provider.dim())?;
    for doc in &docs {
        let emb = provider
            .embed_document(doc)
            .with_context(|| format!("stage embed failed for document {:?}", doc.id))?;
        writer.write(&emb)?;
    }
    writer.finish()?;
    write_json(
        &sidecar(out),
        &json!({ "source": embeddings, "dim": provider.dim(), "documents": docs.len() }),
    )?;
    Ok(())
}

fn train_tagger(corpus: &CorpusArgs, validation: Option<&Path>, config: &RunConfig, out: &Path) -> Result<()> {
    let mut config = config.clone();
    config.train = Some(corpus.corpus.clone());
    config.validation = validation.map(Path::to_owned);
    config.validate()?;
    let train = corpus.load()?;
    let (train, validation) = match validation {
        Some(p) => (train, load_corpus(p, corpus.format)?.into_documents()),
        None => kpe_core::pipeline::carve_validation(train, config.seed),
    };
    let provider = EmbeddingProvider::open(&config.embedding_source()?, config.hashed_dim)?;
    let (model, log) = fit_tagger(&train, &validation, &config, &provider)?;
    model.save(out)?;
    write_json(&sidecar(out), &json!({ "config": config.to_json(), "log": log }))?;
    eprintln!(
        "trained {} epochs; best epoch {} (validation loss {:.6})",
        log.epochs.len(),
        log.best_epoch,
        log.best_validation_loss
    );
    Ok(())
}

fn predict(corpus: &CorpusArgs, model_path: &Path, embeddings: Option<&str>, out: &Path) -> Result<()> {
    let meta_path = sidecar(model_path);
    let meta: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(&meta_path).with_context(|| format!("reading model metadata {}", meta_path.display()))?,
    )?;
    let mut config: RunConfig =
        serde_json::from_value(meta["config"].clone()).context("model metadata has no usable config")?;
    if let Some(e) = embeddings {
        config.embeddings = e.to_owned();
    }
    config.test = Some(corpus.corpus.clone());
    config.validate()?;
    let model = TaggerModel::load(model_path)?;
    let provider = EmbeddingProvider::open(&config.embedding_source()?, config.hashed_dim)?;
    let docs = corpus.load()?;
    let records = predict_documents(&model, &docs, &config, &provider)?;
    write_predictions(out, &config, &records)?;
    Ok(())
}

fn evaluate(gold: &Path, pred: &Path, k: TopK) -> Result<()> {
    let gold = load_corpus(gold, CorpusFormat::Jsonl)?.into_documents();
    let preds = read_predictions(pred)?;
    let report = evaluate_corpus(&gold, &preds, k)?;
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &report)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildGraph {
            corpus,
            window,
            graph_scope,
            out,
        } => build_graph(&corpus, window, graph_scope, out.as_deref()),
        Command::TrainGcn {
            corpus,
            graph,
            epochs,
            seed,
            out_dir,
        } => {
            let mut config = RunConfig::default();
            graph.apply(&mut config);
            set(&mut config.gcn_epochs, epochs);
            set(&mut config.seed, seed);
            config.validate()?;
            train_gcn(&corpus, &config, &out_dir)
        }
        Command::Embed {
            corpus,
            embeddings,
            dim,
            out,
        } => embed(&corpus, &embeddings, dim, &out),
        Command::TrainTagger {
            corpus,
            validation,
            run,
            out,
        } => {
            let mut config = RunConfig::default();
            run.apply(&mut config);
            train_tagger(&corpus, validation.as_deref(), &config, &out)
        }
        Command::Predict {
            corpus,
            model,
            embeddings,
            out,
        } => predict(&corpus, &model, embeddings.as_deref(), &out),
        Command::Evaluate { gold, pred, k } => evaluate(&gold, &pred, k),
        Command::Run {
            config,
            train,
            validation,
            test,
            out_dir,
            k,
            run,
        } => {
            let mut c = match &config {
                Some(p) => RunConfig::from_file(p).with_context(|| format!("loading {}", p.display()))?,
                None => RunConfig::default(),
            };
            run.apply(&mut c);
            set(&mut c.train, train.map(Some));
            set(&mut c.validation, validation.map(Some));
            set(&mut c.test, test.map(Some));
            set(&mut c.out_dir, out_dir);
            set(&mut c.k, k);
            if c.train.is_none() || c.test.is_none() {
                bail!("run needs --train and --test (or `train`/`test` in the config file)");
            }
            let outcome = run_pipeline(&c)?;
            let r = &outcome.report;
            println!(
                "F1@{} = {:.4}  P = {:.4}  R = {:.4}  over {} documents ({} without gold skipped)",
                r.k,
                r.mean_f1,
                r.mean_precision,
                r.mean_recall,
                r.documents.len(),
                r.skipped_empty_gold
            );
            println!("report: {}", outcome.report_path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
