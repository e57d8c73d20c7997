//! Self-supervised edge prediction used to train the GCN encoder.

use std::collections::HashSet;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cooc_graph::CoocGraph;
use crate::error::{KpeError, Result};
use crate::gcn::{GcnModel, NodeEmbeddings};
use crate::tagger::relative_error;

pub const DEFAULT_NEG_RATIO: usize = 5;
pub const DEFAULT_EPOCHS: usize = 5;
pub const DEFAULT_LR: f64 = 0.05;
pub const LOGIT_CLAMP: f64 = 30.0;

/// Above this many candidate pairs, negatives are drawn by rejection instead
/// of enumerating every non-edge.
const ENUMERATION_LIMIT: usize = 4_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeSample {
    pub n1: usize,
    pub n2: usize,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeDataset {
    pub samples: Vec<EdgeSample>,
    pub requested_ratio: usize,
}

impl EdgeDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Negatives per positive actually drawn; below the requested ratio when
    /// the graph has too few non-edges.
    pub fn achieved_ratio(&self) -> f64 {
        match self.positives() {
            0 => 0.0,
            p => self.negatives() as f64 / p as f64,
        }
    }
}

/// Every edge as a positive plus `ratio` uniformly drawn non-edges per
/// positive, without replacement. Uses all non-edges when there are fewer.
pub fn make_edge_dataset(graph: &CoocGraph, ratio: usize, seed: u64) -> Result<EdgeDataset> {
    if ratio == 0 {
        return Err(KpeError::InvalidArgument("negative sampling ratio must be at least 1".into()));
    }
    if graph.edge_count() == 0 {
        return Err(KpeError::InvalidArgument("graph has no edges to predict".into()));
    }
    let mut samples: Vec<EdgeSample> = graph
        .edges()
        .map(|(n1, n2, _)| EdgeSample { n1, n2, label: true })
        .collect();
    let n = graph.node_count();
    let pairs = n * (n - 1) / 2;
    let non_edges = pairs - graph.edge_count();
    let wanted = (ratio * graph.edge_count()).min(non_edges);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let negative = |(n1, n2)| EdgeSample { n1, n2, label: false };

    if pairs <= ENUMERATION_LIMIT || wanted * 2 > non_edges {
        let candidates: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter(|&(u, v)| !graph.has_edge(u, v))
            .collect();
        let mut picked = index::sample(&mut rng, candidates.len(), wanted).into_vec();
        picked.sort_unstable();
        samples.extend(picked.into_iter().map(|i| negative(candidates[i])));
    } else {
        let mut seen = HashSet::with_capacity(wanted);
        let mut drawn = Vec::with_capacity(wanted);
        while drawn.len() < wanted {
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            let pair = (u.min(v), u.max(v));
            if u != v && !graph.has_edge(u, v) && seen.insert(pair) {
                drawn.push(pair);
            }
        }
        drawn.sort_unstable();
        samples.extend(drawn.into_iter().map(negative));
    }
    Ok(EdgeDataset {
        samples,
        requested_ratio: ratio,
    })
}

fn check_index(z: &NodeEmbeddings, i: usize) -> Result<()> {
    if i >= z.len() {
        return Err(KpeError::IndexOutOfRange { index: i, len: z.len() });
    }
    Ok(())
}

/// Connection logit `z_i . z_j`.
pub fn edge_logit(z: &NodeEmbeddings, i: usize, j: usize) -> Result<f64> {
    check_index(z, i)?;
    check_index(z, j)?;
    Ok(z.row(i).dot(&z.row(j)))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// All pairwise connection logits, `Z Z^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeProbabilityMatrix {
    pub logits: Array2<f64>,
}

impl EdgeProbabilityMatrix {
    pub fn from_embeddings(z: &NodeEmbeddings) -> Self {
        EdgeProbabilityMatrix {
            logits: z.z.dot(&z.z.t()),
        }
    }

    pub fn logit(&self, i: usize, j: usize) -> f64 {
        self.logits[[i, j]]
    }

    pub fn probability(&self, i: usize, j: usize) -> f64 {
        sigmoid(self.logit(i, j))
    }
}

fn sample_loss(logit: f64, label: bool) -> f64 {
    let x = logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    if label {
        softplus(-x)
    } else {
        softplus(x)
    }
}

/// Mean binary cross-entropy of the samples under dot-product logits.
pub fn bce_loss(z: &NodeEmbeddings, samples: &[EdgeSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(KpeError::InvalidArgument("empty edge dataset".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(edge_logit(z, s.n1, s.n2)?, s.label);
    }
    Ok(total / samples.len() as f64)
}

/// Loss and its gradient with respect to every row of `Z`.
pub fn bce_loss_and_grad(z: &NodeEmbeddings, samples: &[EdgeSample]) -> Result<(f64, Array2<f64>)> {
    let loss = bce_loss(z, samples)?;
    let inv_n = 1.0 / samples.len() as f64;
    let mut grad = Array2::zeros(z.z.dim());
    for s in samples {
        let logit = z.row(s.n1).dot(&z.row(s.n2));
        if logit.abs() > LOGIT_CLAMP {
            continue;
        }
        let g = (sigmoid(logit) - if s.label { 1.0 } else { 0.0 }) * inv_n;
        grad.row_mut(s.n1).scaled_add(g, &z.row(s.n2));
        grad.row_mut(s.n2).scaled_add(g, &z.row(s.n1));
    }
    Ok((loss, grad))
}

/// Area under the ROC curve as the Mann-Whitney statistic: the chance that a
/// random positive outscores a random negative, ties counting one half.
pub fn auc_roc(scores: &[(f64, bool)]) -> Result<f64> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(KpeError::InvalidArgument("NaN score".into()));
    }
    let positives = scores.iter().filter(|(_, y)| *y).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(KpeError::InvalidArgument(
            "AUC-ROC needs at least one positive and one negative".into(),
        ));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = sorted[i..=j].iter().filter(|(_, y)| *y).count();
        rank_sum += avg_rank * tied_pos as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of each class held out for model selection.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for GcnTrainConfig {
    fn default() -> Self {
        GcnTrainConfig {
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LR,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training loss of the parameters the epoch started from.
    pub train_loss: f64,
    /// Held-out loss and AUC of the parameters after the epoch's update.
    pub holdout_loss: Option<f64>,
    pub holdout_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnTrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (1-based).
    pub best_epoch: usize,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub achieved_neg_ratio: f64,
}

/// Stratified split: a `fraction` of each class goes to the held-out set,
/// at least one sample per class when the class has two or more.
fn split_holdout(samples: &[EdgeSample], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<EdgeSample>, Vec<EdgeSample>) {
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for label in [true, false] {
        let mut class: Vec<EdgeSample> = samples.iter().filter(|s| s.label == label).copied().collect();
        class.shuffle(rng);
        let mut take = (class.len() as f64 * fraction).round() as usize;
        if class.len() >= 2 && fraction > 0.0 {
            take = take.clamp(1, class.len() - 1);
        } else {
            take = 0;
        }
        holdout.extend_from_slice(&class[..take]);
        train.extend_from_slice(&class[take..]);
    }
    (train, holdout)
}

fn holdout_metrics(z: &NodeEmbeddings, holdout: &[EdgeSample]) -> Result<(Option<f64>, Option<f64>)> {
    if holdout.is_empty() {
        return Ok((None, None));
    }
    let loss = bce_loss(z, holdout)?;
    let scores = holdout
        .iter()
        .map(|s| Ok((edge_logit(z, s.n1, s.n2)?, s.label)))
        .collect::<Result<Vec<_>>>()?;
    Ok((Some(loss), auc_roc(&scores).ok()))
}

/// Full-batch gradient descent on the edge BCE. Returns the parameters of the
/// epoch with the best held-out AUC (earliest on ties; the last epoch when
/// no AUC can be computed).
pub fn train_gcn(
    model: &GcnModel,
    graph: &CoocGraph,
    data: &EdgeDataset,
    config: &GcnTrainConfig,
) -> Result<(GcnModel, GcnTrainingLog)> {
    if config.epochs == 0 {
        return Err(KpeError::InvalidArgument("GCN training needs at least one epoch".into()));
    }
    if !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(KpeError::InvalidArgument("holdout fraction must be in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train, holdout) = split_holdout(&data.samples, config.holdout_fraction, &mut rng);
    if train.is_empty() {
        return Err(KpeError::InvalidArgument("no training edges".into()));
    }

    let mut current = model.clone();
    let mut best: Option<(f64, usize, GcnModel)> = None;
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let (z, tape) = current.forward_with_tape(graph)?;
        let (loss, d_z) = bce_loss_and_grad(&z, &train)?;
        if !loss.is_finite() {
            return Err(KpeError::NonFiniteLoss { epoch, loss });
        }
        let grads = current.backward(graph, &tape, &d_z)?;
        current.apply_gradients(&grads, config.lr);

        let z_after = current.forward(graph)?;
        let (holdout_loss, holdout_auc) = holdout_metrics(&z_after, &holdout)?;
        if let Some(auc) = holdout_auc {
            if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                best = Some((auc, epoch, current.clone()));
            }
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss,
            holdout_loss,
            holdout_auc,
        });
    }
    let (best_epoch, chosen) = match best {
        Some((_, epoch, m)) => (epoch, m),
        None => (config.epochs, current),
    };
    Ok((
        chosen,
        GcnTrainingLog {
            epochs: records,
            best_epoch,
            train_samples: train.len(),
            holdout_samples: holdout.len(),
            achieved_neg_ratio: data.achieved_ratio(),
        },
    ))
}

/// Largest relative disagreement between the analytic gradient of the edge
/// BCE with respect to every GCN parameter and central finite differences
/// (step `1e-4`). Entries where both values are below `1e-7` are compared
/// absolutely.
pub fn gradcheck_bce(model: &GcnModel, graph: &CoocGraph, samples: &[EdgeSample]) -> Result<f64> {
    const STEP: f64 = 1e-4;
    let (z, tape) = model.forward_with_tape(graph)?;
    let (_, d_z) = bce_loss_and_grad(&z, samples)?;
    let analytic = model.backward(graph, &tape, &d_z)?;
    let analytic: Vec<Array2<f64>> = analytic.matrices().cloned().collect();
    let loss_of = |m: &GcnModel| bce_loss(&m.forward(graph)?, samples);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        for (idx, &a) in grad.indexed_iter() {
            let orig = probe.parameters_mut().nth(p).expect("parameter")[idx];
            probe.parameters_mut().nth(p).expect("parameter")[idx] = orig + STEP;
            let plus = loss_of(&probe)?;
            probe.parameters_mut().nth(p).expect("parameter")[idx] = orig - STEP;
            let minus = loss_of(&probe)?;
            probe.parameters_mut().nth(p).expect("parameter")[idx] = orig;
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}
