//! Exact-match Precision@k / Recall@k / F1@k over normalized keyphrases.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{KpeError, Result};
use crate::stemmer;

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{P}[:punct:]]").expect("static regex"))
}

/// Lowercases, replaces punctuation by spaces, Porter-stems every remaining
/// word and joins the stems with single spaces.
///
/// `"Graph Embeddings"` becomes `"graph embed"`, `"state-of-the-art."`
/// becomes `"state of the art"`.
pub fn normalize_phrase(phrase: &str) -> String {
    let lowered = phrase.to_lowercase();
    let spaced = punctuation().replace_all(&lowered, " ");
    spaced
        .split_whitespace()
        .map(stemmer::stem)
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Cut-off for the ranked prediction list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TopK {
    /// k = K, the number of predictions.
    All,
    Top(usize),
}

impl TopK {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(KpeError::InvalidArgument("k must be positive".into()));
        }
        Ok(TopK::Top(k))
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::All => f.write_str("all"),
            TopK::Top(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for TopK {
    type Err = KpeError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TopK::All);
        }
        let k: i64 = s
            .parse()
            .map_err(|_| KpeError::InvalidArgument(format!("k must be `all` or a number, got {s:?}")))?;
        if k <= 0 {
            return Err(KpeError::InvalidArgument(format!("k must be positive, got {k}")));
        }
        Ok(TopK::Top(k as usize))
    }
}

impl From<TopK> for String {
    fn from(k: TopK) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for TopK {
    type Error = KpeError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold_count: usize,
    pub predicted_count: usize,
    pub matches: usize,
}

/// Normalizes, dedups (first occurrence wins) and drops phrases that
/// normalize to nothing.
fn normalized_unique<'a>(phrases: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    phrases
        .into_iter()
        .map(normalize_phrase)
        .filter(|p| !p.is_empty() && seen.insert(p.clone()))
        .collect()
}

/// Scores one document. Returns `None` when the gold set is empty after
/// normalization; such documents are skipped by corpus evaluation.
pub fn f1_at_k<G, P>(id: &str, gold: G, predicted: P, k: TopK) -> Option<DocScore>
where
    G: IntoIterator,
    G::Item: AsRef<str>,
    P: IntoIterator,
    P::Item: AsRef<str>,
{
    let gold: Vec<G::Item> = gold.into_iter().collect();
    let predicted: Vec<P::Item> = predicted.into_iter().collect();
    let gold: HashSet<String> = normalized_unique(gold.iter().map(AsRef::as_ref))
        .into_iter()
        .collect();
    if gold.is_empty() {
        return None;
    }
    let mut ranked = normalized_unique(predicted.iter().map(AsRef::as_ref));
    let k = match k {
        TopK::All => ranked.len(),
        TopK::Top(k) => k,
    };
    ranked.truncate(k);
    let matches = ranked.iter().filter(|p| gold.contains(*p)).count();
    let denom = ranked.len().min(k);
    let precision = ratio(matches, denom);
    let recall = ratio(matches, gold.len());
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Some(DocScore {
        id: id.to_owned(),
        precision,
        recall,
        f1,
        gold_count: gold.len(),
        predicted_count: ranked.len(),
        matches,
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: TopK,
    pub documents: Vec<DocScore>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    /// Documents left out because their gold set was empty.
    pub skipped_empty_gold: usize,
}

impl EvalReport {
    pub fn from_scores(k: TopK, documents: Vec<DocScore>, skipped_empty_gold: usize) -> Self {
        let n = documents.len();
        let mean = |f: fn(&DocScore) -> f64| {
            if n == 0 {
                0.0
            } else {
                documents.iter().map(f).sum::<f64>() / n as f64
            }
        };
        EvalReport {
            k,
            mean_precision: mean(|d| d.precision),
            mean_recall: mean(|d| d.recall),
            mean_f1: mean(|d| d.f1),
            documents,
            skipped_empty_gold,
        }
    }
}

/// Macro-averages F1@k over `gold` documents. `predictions` maps document id
/// to its ranked keyphrase surface strings.
pub fn evaluate_corpus(
    gold: &[Document],
    predictions: &BTreeMap<String, Vec<String>>,
    k: TopK,
) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(gold.len());
    let mut skipped = 0;
    for doc in gold {
        let predicted = predictions
            .get(&doc.id)
            .ok_or_else(|| KpeError::MissingPrediction(doc.id.clone()))?;
        let gold_phrases = doc.gold_keyphrases.as_deref().unwrap_or_default();
        match f1_at_k(&doc.id, gold_phrases, predicted, k) {
            Some(score) => scores.push(score),
            None => skipped += 1,
        }
    }
    Ok(EvalReport::from_scores(k, scores, skipped))
}
