//! Keyphrase extraction with co-occurrence graph features.
//!
//! Each document's tokens form a weighted co-occurrence graph. A small GCN
//! trained by link prediction embeds the graph's nodes; those embeddings are
//! combined with contextual token vectors in a BIO tagger whose spans become
//! ranked keyphrases, scored against gold sets with F1@K.

mod binfmt;
pub mod config;
pub mod cooc_graph;
pub mod corpus;
pub mod decode;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod link_prediction;
pub mod pipeline;
pub mod stemmer;
pub mod tagger;

pub use config::{GraphScope, RunConfig};
pub use cooc_graph::CoocGraph;
pub use corpus::{load_corpus, Bio, CorpusFormat, CorpusSplit, Document};
pub use decode::{decode_bio, KeyphraseSet, ScoredPhrase};
pub use embeddings::{EmbeddingProvider, EmbeddingSource};
pub use error::{KpeError, Result};
pub use eval::{evaluate_corpus, f1_at_k, EvalReport, TopK};
pub use gcn::GcnModel;
pub use tagger::TaggerModel;
