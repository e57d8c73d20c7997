//! Graph convolutional encoder producing one embedding per co-occurrence node.
//!
//! Each layer `k` computes, for every node `v`,
//!
//! ```text
//! m_v   = mean_{u in N(v)} ew(u, v) * h_u          (zero when N(v) is empty)
//! h'_v  = sigma(W_k [h_v ; m_v])
//! h'_v /= sqrt(k * |h'_v|^2)                       (skipped for zero rows)
//! ```
//!
//! starting from a trainable per-node feature table. The layer index inside
//! the normalization makes final rows have norm `1/sqrt(K)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::binfmt;
use crate::cooc_graph::CoocGraph;
use crate::error::{KpeError, Result};

pub const DEFAULT_DIM: usize = 192;
const MAGIC: &[u8; 4] = b"GCN1";
const KIND: &str = "GCN checkpoint";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
    /// Linear layers; used for hand-checkable fixtures.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fills a matrix with Glorot-uniform values in `[-a, a]`,
/// `a = sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnModel {
    /// Initial node features, one row per vocabulary entry.
    pub embed: Array2<f64>,
    /// `weights[k]` maps `[h ; m]` (width `2 * d_k`) to `d_{k+1}`.
    pub weights: Vec<Array2<f64>>,
    pub activation: Activation,
}

impl GcnModel {
    /// Random model for a vocabulary of `vocab_size` nodes. `dims` lists the
    /// input feature width followed by the output width of every layer, so
    /// `[192, 192, 192]` is a two-layer model.
    pub fn init(vocab_size: usize, dims: &[usize], seed: u64) -> Result<Self> {
        if vocab_size == 0 {
            return Err(KpeError::InvalidArgument("GCN needs a nonempty vocabulary".into()));
        }
        if dims.len() < 2 {
            return Err(KpeError::InvalidArgument(format!(
                "GCN dims need an input width and at least one layer, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(KpeError::InvalidArgument(format!("zero width in GCN dims {dims:?}")));
        }
        // Layer weights are drawn before the feature table so that one seed
        // gives the same layers for every vocabulary size.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = dims
            .windows(2)
            .map(|w| glorot(w[1], 2 * w[0], 2 * w[0], w[1], &mut rng))
            .collect();
        let embed = glorot(vocab_size, dims[0], vocab_size, dims[0], &mut rng);
        Ok(GcnModel {
            embed,
            weights,
            activation: Activation::Relu,
        })
    }

    pub fn from_parts(embed: Array2<f64>, weights: Vec<Array2<f64>>, activation: Activation) -> Result<Self> {
        if weights.is_empty() {
            return Err(KpeError::InvalidArgument("GCN needs at least one layer".into()));
        }
        let mut width = embed.ncols();
        for (k, w) in weights.iter().enumerate() {
            if w.ncols() != 2 * width {
                return Err(KpeError::Dimension(format!(
                    "layer {} expects input width {}, weight has {} columns",
                    k + 1,
                    2 * width,
                    w.ncols()
                )));
            }
            width = w.nrows();
        }
        Ok(GcnModel {
            embed,
            weights,
            activation,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.nrows()
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.embed.ncols())
            .chain(self.weights.iter().map(|w| w.nrows()))
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(self.embed.ncols(), |w| w.nrows())
    }

    fn check_graph(&self, graph: &CoocGraph) -> Result<()> {
        if graph.node_count() != self.vocab_size() {
            return Err(KpeError::Dimension(format!(
                "graph has {} nodes, model embeds {}",
                graph.node_count(),
                self.vocab_size()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, graph: &CoocGraph) -> Result<NodeEmbeddings> {
        self.forward_with_tape(graph).map(|(z, _)| z)
    }

    pub fn forward_with_tape(&self, graph: &CoocGraph) -> Result<(NodeEmbeddings, Tape)> {
        self.check_graph(graph)?;
        let mut h = self.embed.clone();
        let mut layers = Vec::with_capacity(self.depth());
        for (k, w) in self.weights.iter().enumerate() {
            let scale = (k + 1) as f64;
            let message = aggregate(graph, &h);
            let input = concatenate(Axis(1), &[h.view(), message.view()]).expect("same row count");
            let pre = input.dot(&w.t());
            let mut out = pre.mapv(|x| self.activation.apply(x));
            let mut norms = Array1::zeros(out.nrows());
            for (mut row, n) in out.rows_mut().into_iter().zip(norms.iter_mut()) {
                let norm = row.dot(&row).sqrt();
                *n = norm;
                if norm > 0.0 {
                    row /= scale.sqrt() * norm;
                }
            }
            layers.push(LayerTape { input, pre, norms });
            h = out;
        }
        let tape = Tape {
            layers,
            output: h.clone(),
        };
        Ok((NodeEmbeddings { z: h }, tape))
    }

    /// Back-propagates `d_z` (gradient of a scalar loss with respect to the
    /// output embeddings) to every parameter.
    pub fn backward(&self, graph: &CoocGraph, tape: &Tape, d_z: &Array2<f64>) -> Result<GcnGradients> {
        self.check_graph(graph)?;
        if d_z.dim() != tape.output.dim() {
            return Err(KpeError::Dimension(format!(
                "upstream gradient {:?} vs embeddings {:?}",
                d_z.dim(),
                tape.output.dim()
            )));
        }
        let mut weights = vec![Array2::zeros((0, 0)); self.depth()];
        let mut grad = d_z.clone();
        let mut out = tape.output.clone();
        for k in (0..self.depth()).rev() {
            let layer = &tape.layers[k];
            let scale = (k + 1) as f64;
            let w = &self.weights[k];
            // Through the row normalization.
            let mut d_act = grad;
            for ((mut g, y), &norm) in d_act
                .rows_mut()
                .into_iter()
                .zip(out.rows())
                .zip(layer.norms.iter())
            {
                if norm > 0.0 {
                    let yg = y.dot(&g);
                    g.scaled_add(-scale * yg, &y);
                    g /= scale.sqrt() * norm;
                }
            }
            let mut d_pre = d_act;
            d_pre.zip_mut_with(&layer.pre, |g, &x| *g *= self.activation.derivative(x));
            weights[k] = d_pre.t().dot(&layer.input);
            let d_input = d_pre.dot(w);
            let width = w.ncols() / 2;
            let mut d_h = d_input.slice(s![.., ..width]).to_owned();
            scatter_mean(graph, &d_input.slice(s![.., width..]).to_owned(), &mut d_h);
            grad = d_h;
            // The self half of this layer's input is the previous layer's output.
            out = layer.input.slice(s![.., ..width]).to_owned();
        }
        Ok(GcnGradients {
            embed: grad,
            weights,
        })
    }

    /// Plain gradient-descent step.
    pub fn apply_gradients(&mut self, grads: &GcnGradients, lr: f64) {
        self.embed.scaled_add(-lr, &grads.embed);
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.scaled_add(-lr, g);
        }
    }

    /// All parameter matrices, embedding table first.
    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        std::iter::once(&mut self.embed).chain(self.weights.iter_mut())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Writes the `GCN1` checkpoint: magic, vocab size, layer count plus one,
    /// the dims list, then the feature table and every weight matrix as
    /// row-major little-endian f32.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.activation != Activation::Relu {
            return Err(KpeError::InvalidArgument("only ReLU models can be checkpointed".into()));
        }
        w.write_all(MAGIC)?;
        binfmt::write_len(w, self.vocab_size(), KIND)?;
        let dims = self.dims();
        binfmt::write_len(w, dims.len(), KIND)?;
        for d in dims {
            binfmt::write_len(w, d, KIND)?;
        }
        binfmt::write_matrix(w, &self.embed)?;
        for m in &self.weights {
            binfmt::write_matrix(w, m)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binfmt::read_magic(r, MAGIC, KIND)?;
        let vocab = binfmt::read_u32(r, KIND, "vocab size")? as usize;
        let n_dims = binfmt::read_u32(r, KIND, "dims count")? as usize;
        if !(2..=1024).contains(&n_dims) {
            return Err(KpeError::Format {
                kind: KIND,
                message: format!("implausible dims count {n_dims}"),
            });
        }
        let dims = (0..n_dims)
            .map(|_| binfmt::read_u32(r, KIND, "dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let embed = binfmt::read_matrix(r, vocab, dims[0], KIND, "feature table")?;
        let weights = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| binfmt::read_matrix(r, d[1], 2 * d[0], KIND, &format!("layer {} weights", k + 1)))
            .collect::<Result<Vec<_>>>()?;
        binfmt::expect_eof(r, KIND)?;
        Self::from_parts(embed, weights, Activation::Relu)
    }
}

/// `m_v = (1/|N(v)|) * sum_u ew(u, v) * h_u`.
fn aggregate(graph: &CoocGraph, h: &Array2<f64>) -> Array2<f64> {
    let mut m = Array2::zeros(h.dim());
    for (v, mut row) in m.rows_mut().into_iter().enumerate() {
        let nbrs = graph.neighbors(v);
        if nbrs.is_empty() {
            continue;
        }
        let inv = 1.0 / nbrs.len() as f64;
        for &(u, w) in nbrs {
            row.scaled_add(w * inv, &h.row(u));
        }
    }
    m
}

/// Adjoint of [`aggregate`]: adds `ew(u, v)/|N(v)| * d_m[v]` into `d_h[u]`.
fn scatter_mean(graph: &CoocGraph, d_m: &Array2<f64>, d_h: &mut Array2<f64>) {
    for v in 0..graph.node_count() {
        let nbrs = graph.neighbors(v);
        if nbrs.is_empty() {
            continue;
        }
        let inv = 1.0 / nbrs.len() as f64;
        let g = d_m.row(v);
        for &(u, w) in nbrs {
            d_h.row_mut(u).scaled_add(w * inv, &g);
        }
    }
}

/// Intermediate values kept by [`GcnModel::forward_with_tape`].
#[derive(Clone, Debug)]
pub struct Tape {
    layers: Vec<LayerTape>,
    output: Array2<f64>,
}

impl Tape {
    /// Smallest absolute pre-activation over all layers. Finite differences
    /// through a ReLU are only trustworthy when this is well above the step.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.pre.iter())
            .fold(f64::INFINITY, |a, &b| a.min(b.abs()))
    }
}

#[derive(Clone, Debug)]
struct LayerTape {
    /// `[h ; m]` fed to the layer.
    input: Array2<f64>,
    /// Pre-activation `W [h ; m]`.
    pre: Array2<f64>,
    /// Row norms after the activation, before normalization.
    norms: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnGradients {
    pub embed: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
}

impl GcnGradients {
    pub fn matrices(&self) -> impl Iterator<Item = &Array2<f64>> {
        std::iter::once(&self.embed).chain(self.weights.iter())
    }

    pub fn max_abs(&self) -> f64 {
        self.matrices()
            .flat_map(|m| m.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

/// Output of the encoder: row `v` is the embedding of node `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddings {
    pub z: Array2<f64>,
}

impl NodeEmbeddings {
    pub fn new(z: Array2<f64>) -> Self {
        NodeEmbeddings { z }
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn row(&self, v: usize) -> ArrayView1<'_, f64> {
        self.z.row(v)
    }
}
