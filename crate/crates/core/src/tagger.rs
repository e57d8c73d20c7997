//! Graph-enhanced BIO tagger.
//!
//! Per token `t`:
//!
//! ```text
//! g_t = relu(P_g z_t + b_g)        graph branch, width p
//! c_t = relu(P_c h_t + b_c)        contextual branch, width p
//! y_t = softmax(C [g_t ; c_t] + b) over (B, I, O)
//! ```
//!
//! With the graph branch disabled, `P_g` and `b_g` are pinned to zero and the
//! model is exactly the contextual-only baseline.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::corpus::Bio;
use crate::error::{KpeError, Result};
use crate::gcn::glorot;

pub const NUM_TAGS: usize = 3;
pub const DEFAULT_PROJECTION: usize = 192;
pub const DEFAULT_CHUNK: usize = 512;
const MAGIC: &[u8; 4] = b"TAG1";
const KIND: &str = "tagger checkpoint";

/// Affine map `x -> W x + b` with `W` of shape `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    fn glorot(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: glorot(output, input, input, output, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Applies the map to every row of `x`.
    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggerModel {
    pub graph_proj: Linear,
    pub ctx_proj: Linear,
    pub classifier: Linear,
    pub use_graph: bool,
}

impl TaggerModel {
    pub fn init(graph_dim: usize, ctx_dim: usize, projection: usize, use_graph: bool, seed: u64) -> Result<Self> {
        if graph_dim == 0 || ctx_dim == 0 || projection == 0 {
            return Err(KpeError::InvalidArgument("tagger dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut graph_proj = Linear::glorot(graph_dim, projection, &mut rng);
        let ctx_proj = Linear::glorot(ctx_dim, projection, &mut rng);
        let classifier = Linear::glorot(2 * projection, NUM_TAGS, &mut rng);
        if !use_graph {
            graph_proj = Linear::zeros(graph_dim, projection);
        }
        Ok(TaggerModel {
            graph_proj,
            ctx_proj,
            classifier,
            use_graph,
        })
    }

    pub fn from_parts(graph_proj: Linear, ctx_proj: Linear, classifier: Linear, use_graph: bool) -> Result<Self> {
        let p = graph_proj.output_dim();
        if ctx_proj.output_dim() != p
            || classifier.input_dim() != 2 * p
            || classifier.output_dim() != NUM_TAGS
            || graph_proj.bias.len() != p
            || ctx_proj.bias.len() != p
            || classifier.bias.len() != NUM_TAGS
        {
            return Err(KpeError::Dimension(format!(
                "tagger shapes do not chain: graph {:?}, ctx {:?}, classifier {:?}",
                graph_proj.weight.dim(),
                ctx_proj.weight.dim(),
                classifier.weight.dim()
            )));
        }
        Ok(TaggerModel {
            graph_proj,
            ctx_proj,
            classifier,
            use_graph,
        })
    }

    pub fn graph_dim(&self) -> usize {
        self.graph_proj.input_dim()
    }

    pub fn ctx_dim(&self) -> usize {
        self.ctx_proj.input_dim()
    }

    pub fn projection(&self) -> usize {
        self.graph_proj.output_dim()
    }

    fn check_inputs(&self, z: &Array2<f64>, h: &Array2<f64>) -> Result<()> {
        if z.nrows() != h.nrows() {
            return Err(KpeError::Dimension(format!(
                "{} graph rows vs {} contextual rows",
                z.nrows(),
                h.nrows()
            )));
        }
        if z.ncols() != self.graph_dim() || h.ncols() != self.ctx_dim() {
            return Err(KpeError::Dimension(format!(
                "inputs of width ({}, {}), model expects ({}, {})",
                z.ncols(),
                h.ncols(),
                self.graph_dim(),
                self.ctx_dim()
            )));
        }
        Ok(())
    }

    fn hidden(&self, z: &Array2<f64>, h: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let g = if self.use_graph {
            self.graph_proj.apply(z).mapv(relu)
        } else {
            Array2::zeros((z.nrows(), self.projection()))
        };
        let c = self.ctx_proj.apply(h).mapv(relu);
        (g, c)
    }

    /// Tag probabilities for aligned per-token graph and contextual features.
    pub fn forward(&self, z: &Array2<f64>, h: &Array2<f64>) -> Result<TagPrediction> {
        self.check_inputs(z, h)?;
        let (g, c) = self.hidden(z, h);
        let x = concatenate(Axis(1), &[g.view(), c.view()]).expect("same row count");
        let logits = self.classifier.apply(&x);
        Ok(TagPrediction::from_logits(&logits))
    }

    /// Summed token cross-entropy and its gradient scaled by `scale`
    /// (typically one over the batch token count).
    pub fn loss_and_gradients(&self, z: &Array2<f64>, h: &Array2<f64>, labels: &[Bio], scale: f64) -> Result<(f64, TaggerGradients)> {
        self.check_inputs(z, h)?;
        if labels.len() != z.nrows() {
            return Err(KpeError::Dimension(format!("{} labels for {} tokens", labels.len(), z.nrows())));
        }
        let (g, c) = self.hidden(z, h);
        let x = concatenate(Axis(1), &[g.view(), c.view()]).expect("same row count");
        let logits = self.classifier.apply(&x);
        let pred = TagPrediction::from_logits(&logits);
        let mut loss = 0.0;
        let mut d_logits = pred.probs.clone();
        for (t, label) in labels.iter().enumerate() {
            let k = label.index();
            loss -= log_softmax_at(&logits.row(t).to_owned(), k);
            d_logits[[t, k]] -= 1.0;
        }
        d_logits *= scale;

        let p = self.projection();
        let classifier = LinearGrad {
            weight: grad_weight(&d_logits, &x),
            bias: d_logits.sum_axis(Axis(0)),
        };
        let d_x = d_logits.dot(&self.classifier.weight);
        let mut d_g = d_x.slice(s![.., ..p]).to_owned();
        let mut d_c = d_x.slice(s![.., p..]).to_owned();
        d_g.zip_mut_with(&g, |d, &a| if a <= 0.0 { *d = 0.0 });
        d_c.zip_mut_with(&c, |d, &a| if a <= 0.0 { *d = 0.0 });
        let graph_proj = if self.use_graph {
            LinearGrad {
                weight: grad_weight(&d_g, z),
                bias: d_g.sum_axis(Axis(0)),
            }
        } else {
            LinearGrad::zeros_like(&self.graph_proj)
        };
        let ctx_proj = LinearGrad {
            weight: grad_weight(&d_c, h),
            bias: d_c.sum_axis(Axis(0)),
        };
        Ok((
            loss * scale,
            TaggerGradients {
                graph_proj,
                ctx_proj,
                classifier,
            },
        ))
    }

    /// Mean token cross-entropy over a set of sequences.
    pub fn mean_loss(&self, examples: &[SequenceExample]) -> Result<f64> {
        let tokens: usize = examples.iter().map(SequenceExample::len).sum();
        if tokens == 0 {
            return Err(KpeError::InvalidArgument("no tokens to score".into()));
        }
        let mut total = 0.0;
        for ex in examples {
            let pred = self.forward(&ex.graph, &ex.context)?;
            for (t, l) in ex.labels.iter().enumerate() {
                total -= pred.probs[[t, l.index()]].max(f64::MIN_POSITIVE).ln();
            }
        }
        Ok(total / tokens as f64)
    }

    /// Fraction of tokens whose argmax tag equals the gold tag.
    pub fn accuracy(&self, examples: &[SequenceExample]) -> Result<f64> {
        let mut right = 0usize;
        let mut total = 0usize;
        for ex in examples {
            let pred = self.forward(&ex.graph, &ex.context)?;
            right += pred.labels.iter().zip(&ex.labels).filter(|(a, b)| a == b).count();
            total += ex.len();
        }
        Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.graph_proj.weight.as_slice_mut().expect("standard layout"),
            self.graph_proj.bias.as_slice_mut().expect("standard layout"),
            self.ctx_proj.weight.as_slice_mut().expect("standard layout"),
            self.ctx_proj.bias.as_slice_mut().expect("standard layout"),
            self.classifier.weight.as_slice_mut().expect("standard layout"),
            self.classifier.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// `TAG1` checkpoint: magic, `d_g`, `d_c`, `p`, flags (bit 0: graph branch
    /// enabled), then `P_g`, `b_g`, `P_c`, `b_c`, `C`, `b` as row-major
    /// little-endian f32.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        binfmt::write_len(w, self.graph_dim(), KIND)?;
        binfmt::write_len(w, self.ctx_dim(), KIND)?;
        binfmt::write_len(w, self.projection(), KIND)?;
        binfmt::write_u32(w, u32::from(self.use_graph))?;
        for lin in [&self.graph_proj, &self.ctx_proj, &self.classifier] {
            binfmt::write_matrix(w, &lin.weight)?;
            binfmt::write_f32s(w, lin.bias.iter().map(|&x| x as f32))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binfmt::read_magic(r, MAGIC, KIND)?;
        let d_g = binfmt::read_u32(r, KIND, "graph dim")? as usize;
        let d_c = binfmt::read_u32(r, KIND, "context dim")? as usize;
        let p = binfmt::read_u32(r, KIND, "projection")? as usize;
        let flags = binfmt::read_u32(r, KIND, "flags")?;
        if flags > 1 {
            return Err(KpeError::Format {
                kind: KIND,
                message: format!("unknown flags {flags:#x}"),
            });
        }
        let mut read_linear = |input: usize, output: usize, what: &str| -> Result<Linear> {
            let weight = binfmt::read_matrix(r, output, input, KIND, what)?;
            let bias = binfmt::read_f32s(r, output, KIND, what)?;
            Ok(Linear {
                weight,
                bias: bias.into_iter().map(f64::from).collect(),
            })
        };
        let graph_proj = read_linear(d_g, p, "graph projection")?;
        let ctx_proj = read_linear(d_c, p, "context projection")?;
        let classifier = read_linear(2 * p, NUM_TAGS, "classifier")?;
        binfmt::expect_eof(r, KIND)?;
        Self::from_parts(graph_proj, ctx_proj, classifier, flags & 1 == 1)
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn log_softmax_at(logits: &Array1<f64>, k: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits[k] - lse
}

/// `d^T x` in row-major layout, whatever layout the product came out in.
fn grad_weight(d: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    d.t().dot(x).as_standard_layout().into_owned()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearGrad {
    fn zeros_like(l: &Linear) -> Self {
        LinearGrad {
            weight: Array2::zeros(l.weight.dim()),
            bias: Array1::zeros(l.bias.len()),
        }
    }

    fn add(&mut self, other: &LinearGrad) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggerGradients {
    pub graph_proj: LinearGrad,
    pub ctx_proj: LinearGrad,
    pub classifier: LinearGrad,
}

impl TaggerGradients {
    pub fn zeros_like(model: &TaggerModel) -> Self {
        TaggerGradients {
            graph_proj: LinearGrad::zeros_like(&model.graph_proj),
            ctx_proj: LinearGrad::zeros_like(&model.ctx_proj),
            classifier: LinearGrad::zeros_like(&model.classifier),
        }
    }

    pub fn add(&mut self, other: &TaggerGradients) {
        self.graph_proj.add(&other.graph_proj);
        self.ctx_proj.add(&other.ctx_proj);
        self.classifier.add(&other.classifier);
    }

    fn slices(&self) -> [&[f64]; 6] {
        [
            self.graph_proj.weight.as_slice().expect("standard layout"),
            self.graph_proj.bias.as_slice().expect("standard layout"),
            self.ctx_proj.weight.as_slice().expect("standard layout"),
            self.ctx_proj.bias.as_slice().expect("standard layout"),
            self.classifier.weight.as_slice().expect("standard layout"),
            self.classifier.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

/// Per-token tag distributions in (B, I, O) order plus their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct TagPrediction {
    pub probs: Array2<f64>,
    pub labels: Vec<Bio>,
}

impl TagPrediction {
    pub fn from_logits(logits: &Array2<f64>) -> Self {
        let mut probs = logits.clone();
        for mut row in probs.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let labels = probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for k in 1..NUM_TAGS {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                Bio::from_index(best).expect("three tags")
            })
            .collect();
        TagPrediction { probs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Joins per-chunk predictions in order.
    pub fn concat(parts: &[TagPrediction]) -> Self {
        if parts.is_empty() {
            return TagPrediction {
                probs: Array2::zeros((0, NUM_TAGS)),
                labels: Vec::new(),
            };
        }
        let views: Vec<_> = parts.iter().map(|p| p.probs.view()).collect();
        TagPrediction {
            probs: concatenate(Axis(0), &views).expect("three columns"),
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
        }
    }
}

/// Contiguous spans `[0, L), [L, 2L), ...` covering `0..n`; the last span may
/// be shorter. Panics when `limit` is zero.
pub fn chunk_sequence(n: usize, limit: usize) -> Vec<(usize, usize)> {
    assert!(limit >= 1, "chunk limit must be positive");
    (0..n).step_by(limit).map(|start| (start, (start + limit).min(n))).collect()
}

/// One training or scoring sequence: aligned graph features, contextual
/// features and gold tags.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceExample {
    pub graph: Array2<f64>,
    pub context: Array2<f64>,
    pub labels: Vec<Bio>,
}

impl SequenceExample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Splits into chunks of at most `limit` tokens.
    pub fn chunked(&self, limit: usize) -> Vec<SequenceExample> {
        chunk_sequence(self.len(), limit)
            .into_iter()
            .map(|(a, b)| SequenceExample {
                graph: self.graph.slice(s![a..b, ..]).to_owned(),
                context: self.context.slice(s![a..b, ..]).to_owned(),
                labels: self.labels[a..b].to_vec(),
            })
            .collect()
    }
}

/// Predicts a long sequence chunk by chunk and stitches the results.
pub fn predict_chunked(model: &TaggerModel, z: &Array2<f64>, h: &Array2<f64>, limit: usize) -> Result<TagPrediction> {
    model.check_inputs(z, h)?;
    let parts = chunk_sequence(z.nrows(), limit)
        .into_iter()
        .map(|(a, b)| {
            model.forward(
                &z.slice(s![a..b, ..]).to_owned(),
                &h.slice(s![a..b, ..]).to_owned(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TagPrediction::concat(&parts))
}

/// Largest relative disagreement between analytic gradients and central
/// finite differences (step `1e-4`) of the summed token cross-entropy.
/// Entries where both values are below `1e-7` are compared absolutely.
pub fn gradcheck_tagger(model: &TaggerModel, z: &Array2<f64>, h: &Array2<f64>, labels: &[Bio]) -> Result<f64> {
    const STEP: f64 = 1e-4;
    let (_, analytic) = model.loss_and_gradients(z, h, labels, 1.0)?;
    let analytic: Vec<Vec<f64>> = analytic.slices().iter().map(|s| s.to_vec()).collect();
    let loss_of = |m: &TaggerModel| m.loss_and_gradients(z, h, labels, 1.0).map(|(l, _)| l);
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (p, grads) in analytic.iter().enumerate() {
        // The disabled graph branch is a constant, not a parameter.
        if p < 2 && !model.use_graph {
            continue;
        }
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe.slices_mut()[p][i];
            probe.slices_mut()[p][i] = orig + STEP;
            let plus = loss_of(&probe)?;
            probe.slices_mut()[p][i] = orig - STEP;
            let minus = loss_of(&probe)?;
            probe.slices_mut()[p][i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(model: &TaggerModel, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = TaggerGradients::zeros_like(model).slices().iter().map(|s| s.len()).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut TaggerModel, grads: &TaggerGradients, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let frozen_graph = !model.use_graph;
        for (p, (params, g)) in model.slices_mut().into_iter().zip(grads.slices()).enumerate() {
            if frozen_graph && p < 2 {
                continue;
            }
            let (m, v) = (&mut self.m[p], &mut self.v[p]);
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub anneal: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TaggerTrainConfig {
    fn default() -> Self {
        TaggerTrainConfig {
            batch_size: 10,
            epochs: 100,
            lr: 5e-4,
            patience: 5,
            anneal: 0.5,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerTrainingLog {
    pub epochs: Vec<TaggerEpoch>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
}

/// Mini-batch AdamW on mean token cross-entropy. After every epoch the
/// validation loss is measured (training loss when `validation` is empty);
/// `patience` epochs without improvement multiply the learning rate by
/// `anneal`. Returns the best-validation parameters.
pub fn train_tagger(
    model: &TaggerModel,
    train: &[SequenceExample],
    validation: &[SequenceExample],
    config: &TaggerTrainConfig,
) -> Result<(TaggerModel, TaggerTrainingLog)> {
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(KpeError::InvalidArgument("batch size and epochs must be positive".into()));
    }
    if !(config.anneal > 0.0 && config.anneal <= 1.0) {
        return Err(KpeError::InvalidArgument("anneal factor must be in (0, 1]".into()));
    }
    if train.iter().all(SequenceExample::is_empty) {
        return Err(KpeError::InvalidArgument("no training tokens".into()));
    }
    let monitor = if validation.iter().any(|e| !e.is_empty()) { validation } else { train };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = model.clone();
    let mut opt = AdamW::new(&current, config.weight_decay);
    let mut lr = config.lr;
    let mut order: Vec<usize> = (0..train.len()).collect();

    let initial = current.mean_loss(monitor)?;
    let mut best = (initial, 0usize, current.clone());
    let mut stale = 0usize;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(config.batch_size) {
            let tokens: usize = batch.iter().map(|&i| train[i].len()).sum();
            if tokens == 0 {
                continue;
            }
            let scale = 1.0 / tokens as f64;
            let mut grads = TaggerGradients::zeros_like(&current);
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train[i];
                if ex.is_empty() {
                    continue;
                }
                let (l, g) = current.loss_and_gradients(&ex.graph, &ex.context, &ex.labels, scale)?;
                batch_loss += l;
                grads.add(&g);
            }
            if !batch_loss.is_finite() {
                return Err(KpeError::NonFiniteLoss { epoch, loss: batch_loss });
            }
            epoch_loss += batch_loss * tokens as f64;
            epoch_tokens += tokens;
            opt.step(&mut current, &grads, lr);
        }
        let validation_loss = current.mean_loss(monitor)?;
        if !validation_loss.is_finite() {
            return Err(KpeError::NonFiniteLoss { epoch, loss: validation_loss });
        }
        epochs.push(TaggerEpoch {
            epoch,
            train_loss: epoch_loss / epoch_tokens.max(1) as f64,
            validation_loss,
            lr,
        });
        if validation_loss < best.0 {
            best = (validation_loss, epoch, current.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                lr *= config.anneal;
                stale = 0;
            }
        }
    }
    let (best_validation_loss, best_epoch, chosen) = best;
    Ok((
        chosen,
        TaggerTrainingLog {
            epochs,
            best_epoch,
            best_validation_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use Bio::*;

    fn tiny(use_graph: bool) -> TaggerModel {
        TaggerModel::init(3, 4, 2, use_graph, 1).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = TaggerModel::from_parts(Linear::zeros(2, 3), Linear::zeros(2, 3), Linear::zeros(6, 3), true).unwrap();
        let p = m.forward(&Array2::zeros((4, 2)), &Array2::zeros((4, 2))).unwrap();
        for row in p.probs.rows() {
            for &x in row {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn biased_classifier_saturates() {
        let mut cls = Linear::zeros(4, 3);
        cls.bias[0] = 10.0;
        let m = TaggerModel::from_parts(Linear::zeros(2, 2), Linear::zeros(2, 2), cls, true).unwrap();
        let p = m.forward(&array![[0.3, 0.1]], &array![[0.2, -0.5]]).unwrap();
        assert!(p.probs[[0, 0]] > 0.9999);
        assert_eq!(p.labels, [B]);
    }

    #[test]
    fn hand_computed_fixture() {
        let graph_proj = Linear {
            weight: array![[1.0, 0.0], [0.0, -1.0]],
            bias: array![0.0, 0.5],
        };
        let ctx_proj = Linear {
            weight: array![[0.5, 0.5], [1.0, -1.0]],
            bias: array![0.0, 0.0],
        };
        let classifier = Linear {
            weight: array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
            bias: array![0.0, 0.0, 0.1],
        };
        let m = TaggerModel::from_parts(graph_proj, ctx_proj, classifier, true).unwrap();
        let z = array![[1.0, 2.0], [-1.0, 0.0]];
        let h = array![[2.0, 0.0], [0.0, 1.0]];
        let p = m.forward(&z, &h).unwrap();
        // Token 0: g = relu(1, -1.5) = (1, 0); c = relu(1, 2) = (1, 2);
        // logits = (1, 0 + 1, 2 + 0.1) = (1, 1, 2.1).
        // Token 1: g = relu(-1, 0.5) = (0, 0.5); c = relu(0.5, -1) = (0.5, 0);
        // logits = (0, 1.0, 0.1).
        for (t, logits) in [[1.0, 1.0, 2.1], [0.0, 1.0, 0.1]].iter().enumerate() {
            let e: Vec<f64> = logits.iter().map(|x: &f64| x.exp()).collect();
            let s: f64 = e.iter().sum();
            for (k, ek) in e.iter().enumerate() {
                assert!((p.probs[[t, k]] - ek / s).abs() < 1e-6);
            }
        }
        assert_eq!(p.labels, [O, I]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = TagPrediction::from_logits(&array![[0.2, -1.0, 3.0], [5.0, 5.0, 4.0]]);
        let b = TagPrediction::from_logits(&array![[100.2, 99.0, 103.0], [-995.0, -995.0, -996.0]]);
        for (x, y) in a.probs.iter().zip(b.probs.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(a.labels, b.labels);
        for row in b.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn input_mismatches_are_errors() {
        let m = tiny(true);
        assert!(m.forward(&Array2::zeros((2, 3)), &Array2::zeros((3, 4))).is_err());
        assert!(m.forward(&Array2::zeros((2, 2)), &Array2::zeros((2, 4))).is_err());
    }

    #[test]
    fn chunking_examples() {
        assert_eq!(chunk_sequence(5, 512), [(0, 5)]);
        assert_eq!(chunk_sequence(1024, 512), [(0, 512), (512, 1024)]);
        assert_eq!(chunk_sequence(1025, 512), [(0, 512), (512, 1024), (1024, 1025)]);
        assert!(chunk_sequence(0, 3).is_empty());
    }

    fn smooth_batch() -> (Array2<f64>, Array2<f64>, Vec<Bio>) {
        let z = array![[0.3, -0.7, 0.9], [0.5, 0.2, -0.4], [-0.6, 0.8, 0.1]];
        let h = array![[0.4, -0.2, 0.7, 0.1], [-0.3, 0.9, 0.2, -0.5], [0.6, 0.1, -0.8, 0.3]];
        (z, h, vec![B, I, O])
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (z, h, labels) = smooth_batch();
        for use_graph in [true, false] {
            let err = gradcheck_tagger(&tiny(use_graph), &z, &h, &labels).unwrap();
            assert!(err < 1e-4, "use_graph={use_graph}: {err}");
        }
    }

    #[test]
    fn zero_classifier_blocks_projection_gradients() {
        let (z, h, labels) = smooth_batch();
        let mut m = tiny(true);
        m.classifier.weight.fill(0.0);
        let (_, g) = m.loss_and_gradients(&z, &h, &labels, 1.0).unwrap();
        assert_eq!(g.graph_proj.weight.iter().fold(0.0f64, |a, b| a.max(b.abs())), 0.0);
        assert_eq!(g.ctx_proj.weight.iter().fold(0.0f64, |a, b| a.max(b.abs())), 0.0);
    }

    #[test]
    fn gradient_scales_linearly() {
        let (z, h, labels) = smooth_batch();
        let m = tiny(true);
        let (l1, g1) = m.loss_and_gradients(&z, &h, &labels, 1.0).unwrap();
        let (l2, g2) = m.loss_and_gradients(&z, &h, &labels, 2.0).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        for (a, b) in g1.slices().iter().zip(g2.slices()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disabled_graph_branch_ignores_graph_features() {
        let m = tiny(false);
        let (z, h, _) = smooth_batch();
        let a = m.forward(&z, &h).unwrap();
        let b = m.forward(&z.mapv(|x| x * 100.0 + 3.0), &h).unwrap();
        assert_eq!(a, b);
        assert!(m.graph_proj.weight.iter().all(|&x| x == 0.0));
    }

    fn toy_examples() -> Vec<SequenceExample> {
        let (z, h, labels) = smooth_batch();
        vec![SequenceExample { graph: z, context: h, labels }; 4]
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let m = tiny(true);
        let cfg = TaggerTrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let (trained, log) = train_tagger(&m, &toy_examples(), &toy_examples(), &cfg).unwrap();
        assert_eq!(trained, m);
        let first = log.epochs[0].validation_loss;
        assert!(log.epochs.iter().all(|e| e.validation_loss == first));
    }

    #[test]
    fn training_fits_and_is_deterministic() {
        let m = tiny(true);
        let cfg = TaggerTrainConfig {
            lr: 0.05,
            epochs: 60,
            batch_size: 2,
            ..Default::default()
        };
        let (a, log_a) = train_tagger(&m, &toy_examples(), &[], &cfg).unwrap();
        let (b, log_b) = train_tagger(&m, &toy_examples(), &[], &cfg).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a, b);
        assert_eq!(a.accuracy(&toy_examples()).unwrap(), 1.0);
    }

    #[test]
    fn plateau_anneals_learning_rate() {
        let m = tiny(true);
        let cfg = TaggerTrainConfig {
            lr: 0.5,
            epochs: 30,
            batch_size: 4,
            patience: 2,
            anneal: 0.5,
            ..Default::default()
        };
        let (_, log) = train_tagger(&m, &toy_examples(), &[], &cfg).unwrap();
        let lrs: Vec<f64> = log.epochs.iter().map(|e| e.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let best = log.epochs.iter().map(|e| e.validation_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(log.best_validation_loss, best.min(log.best_validation_loss));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(false);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TAG1");
        let back = TaggerModel::read_from(&mut &buf[..]).unwrap();
        assert!(!back.use_graph);
        assert_eq!(back.classifier.weight.dim(), (3, 4));
        for (a, b) in back.ctx_proj.weight.iter().zip(m.ctx_proj.weight.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
