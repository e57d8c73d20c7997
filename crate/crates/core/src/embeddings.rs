//! Per-token contextual embeddings: sub-word pooling, the `KPE1` interchange
//! file, and a hashed stand-in provider.
//!
//! `KPE1` layout (all integers u32 little-endian):
//!
//! ```text
//! "KPE1" | d_c | { id_len | id (utf-8) | n | n * d_c f32 LE, row-major }*
//! ```
//!
//! Documents follow one another until end of file.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::binfmt;
use crate::corpus::Document;
use crate::error::{KpeError, Result};

pub const DEFAULT_FILE_DIM: usize = 768;
pub const DEFAULT_HASHED_DIM: usize = 192;
const MAGIC: &[u8; 4] = b"KPE1";
const KIND: &str = "KPE1 embedding";

/// Mean of each word's sub-word vectors.
pub fn pool_subwords(groups: &[Vec<Vec<f32>>]) -> Result<Vec<Vec<f32>>> {
    groups
        .iter()
        .enumerate()
        .map(|(w, group)| {
            let first = group
                .first()
                .ok_or_else(|| KpeError::InvalidArgument(format!("word {w} has no sub-word vectors")))?;
            let dim = first.len();
            let mut acc = vec![0.0f64; dim];
            for v in group {
                if v.len() != dim {
                    return Err(KpeError::Dimension(format!(
                        "word {w}: sub-word vectors of width {dim} and {}",
                        v.len()
                    )));
                }
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += f64::from(*x);
                }
            }
            let n = group.len() as f64;
            Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
        })
        .collect()
}

/// Row `t` is the embedding of token `t` of document `doc_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualEmbeddings {
    pub doc_id: String,
    pub vectors: Array2<f32>,
}

impl ContextualEmbeddings {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

/// How to obtain contextual embeddings, as written on the command line:
/// a path to a `KPE1` file or `hashed:<seed>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    File(PathBuf),
    Hashed { seed: u64 },
}

impl FromStr for EmbeddingSource {
    type Err = KpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("hashed:") {
            Some(seed) => seed
                .parse()
                .map(|seed| EmbeddingSource::Hashed { seed })
                .map_err(|_| KpeError::InvalidArgument(format!("bad hashed seed in {s:?}"))),
            None if s == "hashed" => Ok(EmbeddingSource::Hashed { seed: 0 }),
            None => Ok(EmbeddingSource::File(PathBuf::from(s))),
        }
    }
}

impl std::fmt::Display for EmbeddingSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbeddingSource::File(p) => write!(f, "{}", p.display()),
            EmbeddingSource::Hashed { seed } => write!(f, "hashed:{seed}"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum EmbeddingProvider {
    /// Rows read from a `KPE1` file, keyed by document id.
    File {
        dim: usize,
        documents: HashMap<String, Array2<f32>>,
    },
    /// Position-independent pseudo-random unit vectors keyed by
    /// `(seed, lowercased token)`.
    Hashed { dim: usize, seed: u64 },
}

impl EmbeddingProvider {
    pub fn hashed(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(KpeError::InvalidArgument("embedding dimension must be positive".into()));
        }
        Ok(EmbeddingProvider::Hashed { dim, seed })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let (dim, docs) = read_kpe1(&mut r)?;
        let mut documents = HashMap::with_capacity(docs.len());
        for e in docs {
            if documents.insert(e.doc_id.clone(), e.vectors).is_some() {
                return Err(KpeError::Format {
                    kind: KIND,
                    message: format!("document {:?} appears twice", e.doc_id),
                });
            }
        }
        Ok(EmbeddingProvider::File { dim, documents })
    }

    /// Opens a provider for `source`; `hashed_dim` applies to hashed sources.
    pub fn open(source: &EmbeddingSource, hashed_dim: usize) -> Result<Self> {
        match source {
            EmbeddingSource::File(p) => Self::from_file(p),
            EmbeddingSource::Hashed { seed } => Self::hashed(hashed_dim, *seed),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::File { dim, .. } | EmbeddingProvider::Hashed { dim, .. } => *dim,
        }
    }

    pub fn embed_document(&self, doc: &Document) -> Result<ContextualEmbeddings> {
        let vectors = match self {
            EmbeddingProvider::File { documents, .. } => {
                let rows = documents
                    .get(&doc.id)
                    .ok_or_else(|| KpeError::MissingDocument(doc.id.clone()))?;
                if rows.nrows() != doc.tokens.len() {
                    return Err(KpeError::TokenCountMismatch {
                        doc_id: doc.id.clone(),
                        expected: doc.tokens.len(),
                        actual: rows.nrows(),
                    });
                }
                rows.clone()
            }
            EmbeddingProvider::Hashed { dim, seed } => {
                let mut m = Array2::zeros((doc.tokens.len(), *dim));
                for (mut row, tok) in m.rows_mut().into_iter().zip(&doc.tokens) {
                    row.assign(&ndarray::Array1::from(hashed_vector(*seed, tok, *dim)));
                }
                m
            }
        };
        Ok(ContextualEmbeddings {
            doc_id: doc.id.clone(),
            vectors,
        })
    }
}

/// Unit vector drawn from a Gaussian stream seeded by SHA-256 of the seed
/// and the lowercased token.
fn hashed_vector(seed: u64, token: &str, dim: usize) -> Vec<f32> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.to_lowercase().as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

/// Streams documents into a `KPE1` file.
pub struct Kpe1Writer<W: Write> {
    inner: W,
    dim: usize,
}

impl Kpe1Writer<BufWriter<File>> {
    pub fn create(path: &Path, dim: usize) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), dim)
    }
}

impl<W: Write> Kpe1Writer<W> {
    pub fn new(mut inner: W, dim: usize) -> Result<Self> {
        inner.write_all(MAGIC)?;
        binfmt::write_len(&mut inner, dim, KIND)?;
        Ok(Kpe1Writer { inner, dim })
    }

    pub fn write(&mut self, emb: &ContextualEmbeddings) -> Result<()> {
        if emb.dim() != self.dim {
            return Err(KpeError::Dimension(format!(
                "document {:?} has width {}, file has {}",
                emb.doc_id,
                emb.dim(),
                self.dim
            )));
        }
        binfmt::write_len(&mut self.inner, emb.doc_id.len(), KIND)?;
        self.inner.write_all(emb.doc_id.as_bytes())?;
        binfmt::write_len(&mut self.inner, emb.len(), KIND)?;
        binfmt::write_f32s(&mut self.inner, emb.vectors.iter().copied())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Reads a whole `KPE1` stream: the dimension and every document in order.
pub fn read_kpe1<R: Read>(r: &mut R) -> Result<(usize, Vec<ContextualEmbeddings>)> {
    binfmt::read_magic(r, MAGIC, KIND)?;
    let dim = binfmt::read_u32(r, KIND, "dimension")? as usize;
    if dim == 0 {
        return Err(KpeError::Format {
            kind: KIND,
            message: "zero embedding dimension".into(),
        });
    }
    let mut docs = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        let got = read_up_to(r, &mut len_buf)?;
        if got == 0 {
            break;
        }
        if got < 4 {
            return Err(KpeError::Format {
                kind: KIND,
                message: "truncated document header".into(),
            });
        }
        let id_len = u32::from_le_bytes(len_buf) as usize;
        let mut id = vec![0u8; id_len];
        binfmt::read_exact_or(r, &mut id, KIND, "document id")?;
        let doc_id = String::from_utf8(id).map_err(|_| KpeError::Format {
            kind: KIND,
            message: "document id is not utf-8".into(),
        })?;
        let n = binfmt::read_u32(r, KIND, "token count")? as usize;
        let data = binfmt::read_f32s(r, n * dim, KIND, &format!("rows of {doc_id:?}"))?;
        let vectors = Array2::from_shape_vec((n, dim), data).expect("buffer sized to shape");
        docs.push(ContextualEmbeddings { doc_id, vectors });
    }
    Ok((dim, docs))
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}
