//! Assemble keyphrases from per-token BIO predictions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Bio;
use crate::error::{KpeError, Result};
use crate::eval::normalize_phrase;
use crate::tagger::TagPrediction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPhrase {
    pub text: String,
    pub score: f64,
}

/// Distinct predicted phrases, best score first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyphraseSet {
    pub phrases: Vec<ScoredPhrase>,
}

impl KeyphraseSet {
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.phrases.iter().map(|p| p.text.clone()).collect()
    }
}

/// Token spans `[start, end)` of the keyphrases in a label sequence. An `I`
/// that follows `O` or starts the sequence opens a new span.
pub fn spans(labels: &[Bio]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (t, &l) in labels.iter().enumerate() {
        match l {
            Bio::B => {
                if let Some(s) = open.take() {
                    out.push((s, t));
                }
                open = Some(t);
            }
            Bio::I => {
                if open.is_none() {
                    open = Some(t);
                }
            }
            Bio::O => {
                if let Some(s) = open.take() {
                    out.push((s, t));
                }
            }
        }
    }
    if let Some(s) = open {
        out.push((s, labels.len()));
    }
    out
}

/// Decodes labels with per-token confidences. Phrases are scored by the mean
/// confidence of their tokens, merged by normalized form (keeping the first
/// surface form and the best score) and sorted by score, ties by first
/// occurrence. Phrases that normalize to nothing are dropped.
pub fn decode_labels(tokens: &[String], labels: &[Bio], confidence: &[f64]) -> Result<KeyphraseSet> {
    if tokens.len() != labels.len() || labels.len() != confidence.len() {
        return Err(KpeError::Dimension(format!(
            "{} tokens, {} labels, {} confidences",
            tokens.len(),
            labels.len(),
            confidence.len()
        )));
    }
    let mut order: Vec<(String, ScoredPhrase)> = Vec::new();
    let mut by_norm: HashMap<String, usize> = HashMap::new();
    for (a, b) in spans(labels) {
        let text = tokens[a..b].join(" ");
        let norm = normalize_phrase(&text);
        if norm.is_empty() {
            continue;
        }
        let score = confidence[a..b].iter().sum::<f64>() / (b - a) as f64;
        match by_norm.get(&norm) {
            Some(&i) => {
                let kept = &mut order[i].1;
                kept.score = kept.score.max(score);
            }
            None => {
                by_norm.insert(norm.clone(), order.len());
                order.push((norm, ScoredPhrase { text, score }));
            }
        }
    }
    let mut phrases: Vec<ScoredPhrase> = order.into_iter().map(|(_, p)| p).collect();
    // Stable sort keeps first-occurrence order among equal scores.
    phrases.sort_by(|x, y| y.score.total_cmp(&x.score));
    Ok(KeyphraseSet { phrases })
}

/// Decodes a tagger prediction; each token's confidence is its highest tag
/// probability.
pub fn decode_bio(tokens: &[String], prediction: &TagPrediction) -> Result<KeyphraseSet> {
    let confidence: Vec<f64> = prediction
        .probs
        .rows()
        .into_iter()
        .map(|r| r.fold(0.0f64, |a, &b| a.max(b)))
        .collect();
    decode_labels(tokens, &prediction.labels, &confidence)
}

/// Decodes gold labels, every token at confidence one.
pub fn decode_gold(tokens: &[String], labels: &[Bio]) -> Result<KeyphraseSet> {
    decode_labels(tokens, labels, &vec![1.0; labels.len()])
}
