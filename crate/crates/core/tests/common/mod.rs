//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use kpe_core::cooc_graph::CoocGraph;
use kpe_core::corpus::{Bio, Document};
use kpe_core::eval::normalize_phrase;
use kpe_core::gcn::GcnModel;
use kpe_core::tagger::TagPrediction;
use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Enumerates every window `tokens[p..p+window]` (truncated at the end) and
/// counts each unordered pair of distinct lowercased types once per window.
pub fn brute_force_pairs(tokens: &[String], window: usize) -> BTreeMap<(String, String), u32> {
    let mut out = BTreeMap::new();
    for p in 0..tokens.len() {
        let end = (p + window).min(tokens.len());
        let mut seen = BTreeSet::new();
        for i in p..end {
            for j in p..end {
                let a = tokens[i].to_lowercase();
                let b = tokens[j].to_lowercase();
                if a < b {
                    seen.insert((a, b));
                }
            }
        }
        for pair in seen {
            *out.entry(pair).or_insert(0) += 1;
        }
    }
    out
}

/// The graph's edges keyed by the (sorted) pair of node names.
pub fn graph_pairs(g: &CoocGraph) -> BTreeMap<(String, String), u32> {
    g.edges()
        .map(|(u, v, w)| {
            let (a, b) = (g.vocab()[u].clone(), g.vocab()[v].clone());
            (if a < b { (a, b) } else { (b, a) }, w)
        })
        .collect()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize, alphabet: usize) -> Vec<String> {
    let len = rng.random_range(1..=max_len);
    (0..len)
        .map(|_| {
            let c = (b'a' + rng.random_range(0..alphabet as u8)) as char;
            if rng.random_bool(0.2) {
                c.to_ascii_uppercase().to_string()
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Connected-ish random graph on `n` nodes: every pair is an edge with
/// probability `p`, weights in 1..=4.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> CoocGraph {
    let vocab = (0..n).map(|i| format!("w{i}")).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v, rng.random_range(1..=4)));
            }
        }
    }
    CoocGraph::from_parts(vocab, edges).unwrap()
}

/// Two `size`-node cliques joined by a single edge between node 0 and node
/// `size`.
pub fn two_cliques(size: usize) -> CoocGraph {
    let vocab = (0..2 * size).map(|i| format!("n{i}")).collect();
    let mut edges = Vec::new();
    for block in [0, size] {
        for u in block..block + size {
            for v in u + 1..block + size {
                edges.push((u, v, 1));
            }
        }
    }
    edges.push((0, size, 1));
    CoocGraph::from_parts(vocab, edges).unwrap()
}

/// AUC by direct enumeration of positive/negative pairs, ties counting half.
pub fn brute_force_auc(scores: &[(f64, bool)]) -> f64 {
    let mut good = 0.0;
    let mut total = 0.0;
    for &(p, lp) in scores {
        for &(n, ln) in scores {
            if lp && !ln {
                total += 1.0;
                good += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    good / total
}

/// Normalized forms of the gold phrases that occur as a contiguous token run.
pub fn in_text_gold(doc: &Document) -> BTreeSet<String> {
    let words: Vec<String> = doc.tokens.iter().map(|t| normalize_phrase(t)).collect();
    let mut out = BTreeSet::new();
    for kp in doc.gold_keyphrases.as_deref().unwrap_or_default() {
        let norm = normalize_phrase(kp);
        let target: Vec<&str> = norm.split_whitespace().collect();
        if target.is_empty() {
            continue;
        }
        let found = (0..words.len()).any(|s| {
            let mut flat = Vec::new();
            for w in &words[s..] {
                if w.is_empty() {
                    return false;
                }
                flat.extend(w.split_whitespace());
                if flat.len() >= target.len() {
                    return flat == target;
                }
            }
            false
        });
        if found {
            out.insert(norm);
        }
    }
    out
}

/// Random document whose gold phrases use words found nowhere else in it
/// and in no other phrase, so no phrase can hide inside another.
pub fn round_trip_document(rng: &mut ChaCha8Rng, id: usize) -> Document {
    const FILLER: &[&str] = &[
        "the", "of", "and", "we", "in", "this", "results", "show", "using", "a", "for", "data", "method", "is", ",",
        ".", "(", ")", "-",
    ];
    let n_phrases = rng.random_range(1..=4);
    let phrases: Vec<Vec<String>> = (0..n_phrases)
        .map(|p| {
            let len = rng.random_range(1..=3);
            (0..len)
                .map(|w| {
                    let word = format!("kw{id}x{p}x{w}");
                    if rng.random_bool(0.3) {
                        word.to_uppercase()
                    } else {
                        word
                    }
                })
                .collect()
        })
        .collect();
    let mut tokens = Vec::new();
    let mut gold = Vec::new();
    for phrase in &phrases {
        gold.push(phrase.join(" ").to_lowercase());
        let reps = rng.random_range(1..=3);
        for _ in 0..reps {
            for _ in 0..rng.random_range(0..6) {
                tokens.push(FILLER.choose(rng).unwrap().to_string());
            }
            tokens.extend(phrase.iter().cloned());
        }
    }
    tokens.push(".".into());
    // One absent gold phrase that must not be recovered.
    gold.push(format!("absent phrase {id}"));
    Document::new(format!("doc{id}"), tokens).with_keyphrases(gold).derive_bio_labels()
}

/// Smallest ReLU margin accepted for finite-difference checks. Below it a
/// step of 1e-4 can cross or come close to a kink.
pub const SMOOTH_MARGIN: f64 = 5e-2;

/// A GCN on `graph` whose pre-activations all sit at least
/// [`SMOOTH_MARGIN`] away from zero, trying seeds `seed, seed+1, ...`.
pub fn smooth_gcn(graph: &CoocGraph, dims: &[usize], seed: u64) -> Option<GcnModel> {
    (0..64).find_map(|i| {
        let model = GcnModel::init(graph.node_count(), dims, seed.wrapping_add(i)).unwrap();
        let (_, tape) = model.forward_with_tape(graph).unwrap();
        (tape.min_abs_preactivation() > SMOOTH_MARGIN).then_some(model)
    })
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Central-difference check (step 1e-4) of the gradient of `0.5 * |Z|_F^2`.
pub fn gradcheck_half_squared_norm(model: &GcnModel, graph: &CoocGraph) -> f64 {
    const STEP: f64 = 1e-4;
    let objective = |m: &GcnModel| {
        let z = m.forward(graph).unwrap().z;
        0.5 * z.iter().map(|x| x * x).sum::<f64>()
    };
    let (z, tape) = model.forward_with_tape(graph).unwrap();
    let grads = model.backward(graph, &tape, &z.z).unwrap();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (p, grad) in grads.matrices().enumerate() {
        for (idx, &a) in grad.indexed_iter() {
            let orig = probe.parameters_mut().nth(p).unwrap()[idx];
            probe.parameters_mut().nth(p).unwrap()[idx] = orig + STEP;
            let plus = objective(&probe);
            probe.parameters_mut().nth(p).unwrap()[idx] = orig - STEP;
            let minus = objective(&probe);
            probe.parameters_mut().nth(p).unwrap()[idx] = orig;
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * STEP)));
        }
    }
    worst
}

/// Knobs of the synthetic corpus used for the graph-versus-ablation check.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub documents: usize,
    pub vocab: usize,
    pub phrases_per_doc: (usize, usize),
    pub phrase_len: (usize, usize),
    pub repeats: (usize, usize),
    pub section_len: (usize, usize),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            documents: 200,
            vocab: 1500,
            phrases_per_doc: (2, 4),
            phrase_len: (2, 3),
            repeats: (4, 6),
            section_len: (8, 20),
        }
    }
}

/// Documents whose keyphrases are multi-token patterns over the shared
/// vocabulary, each repeated in several distant sections separated by
/// uniformly drawn filler. Any word can be filler in one document and part
/// of a keyphrase in another, so word identity alone is a weak cue.
pub fn synthetic_corpus(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Document> {
    let word = |i: usize| format!("w{i:04}");
    (0..spec.documents)
        .map(|d| {
            let n_phrases = rng.random_range(spec.phrases_per_doc.0..=spec.phrases_per_doc.1);
            let mut used = BTreeSet::new();
            let phrases: Vec<Vec<usize>> = (0..n_phrases)
                .map(|_| {
                    let len = rng.random_range(spec.phrase_len.0..=spec.phrase_len.1);
                    (0..len)
                        .map(|_| loop {
                            let w = rng.random_range(0..spec.vocab);
                            if used.insert(w) {
                                break w;
                            }
                        })
                        .collect()
                })
                .collect();
            let mut slots: Vec<usize> = phrases
                .iter()
                .enumerate()
                .flat_map(|(p, _)| std::iter::repeat_n(p, rng.random_range(spec.repeats.0..=spec.repeats.1)))
                .collect();
            rand::seq::SliceRandom::shuffle(&mut slots[..], rng);
            let mut tokens = Vec::new();
            let filler = |tokens: &mut Vec<String>, rng: &mut ChaCha8Rng| {
                for _ in 0..rng.random_range(spec.section_len.0..=spec.section_len.1) {
                    let w = loop {
                        let w = rng.random_range(0..spec.vocab);
                        if !used.contains(&w) {
                            break w;
                        }
                    };
                    tokens.push(word(w));
                }
            };
            for p in slots {
                filler(&mut tokens, rng);
                tokens.extend(phrases[p].iter().map(|&w| word(w)));
            }
            filler(&mut tokens, rng);
            let gold = phrases
                .iter()
                .map(|p| p.iter().map(|&w| word(w)).collect::<Vec<_>>().join(" "))
                .collect();
            Document::new(format!("syn{d:03}"), tokens).with_keyphrases(gold).derive_bio_labels()
        })
        .collect()
}

/// A prediction that puts all mass on the given labels.
pub fn one_hot(labels: &[Bio]) -> TagPrediction {
    let mut logits = Array2::zeros((labels.len(), 3));
    for (t, l) in labels.iter().enumerate() {
        logits[[t, l.index()]] = 20.0;
    }
    TagPrediction::from_logits(&logits)
}
