//! Weighted undirected word co-occurrence graphs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{KpeError, Result};

pub const DEFAULT_WINDOW: usize = 4;

/// Node key for a token: its lowercased surface form.
pub fn normalize_token_for_node(token: &str) -> String {
    token.to_lowercase()
}

/// Co-occurrence graph over the token types of one or more sequences.
///
/// Nodes are numbered in order of first appearance. Edges are stored once
/// with `u < v`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoocGraph {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    edges: BTreeMap<(usize, usize), u32>,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl CoocGraph {
    /// Builds the graph of a single token sequence.
    pub fn build(tokens: &[String], window: usize) -> Result<Self> {
        Self::from_sequences(std::iter::once(tokens), window)
    }

    /// Builds one graph from several sequences. Windows never cross a
    /// sequence boundary.
    pub fn from_sequences<'a, I>(sequences: I, window: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if window < 2 {
            return Err(KpeError::InvalidArgument(format!(
                "co-occurrence window must be at least 2, got {window}"
            )));
        }
        let mut vocab = Vec::new();
        let mut index = HashMap::new();
        let mut edges = BTreeMap::new();
        for tokens in sequences {
            let ids: Vec<usize> = tokens
                .iter()
                .map(|t| {
                    let key = normalize_token_for_node(t);
                    *index.entry(key.clone()).or_insert_with(|| {
                        vocab.push(key);
                        vocab.len() - 1
                    })
                })
                .collect();
            for start in 0..ids.len() {
                let end = (start + window).min(ids.len());
                let types: BTreeSet<usize> = ids[start..end].iter().copied().collect();
                let types: Vec<usize> = types.into_iter().collect();
                for (a, &u) in types.iter().enumerate() {
                    for &v in &types[a + 1..] {
                        *edges.entry((u, v)).or_insert(0) += 1;
                    }
                }
            }
        }
        if vocab.is_empty() {
            return Err(KpeError::InvalidArgument("cannot build a graph from no tokens".into()));
        }
        Ok(Self::assemble(vocab, index, edges))
    }

    fn assemble(
        vocab: Vec<String>,
        index: HashMap<String, usize>,
        edges: BTreeMap<(usize, usize), u32>,
    ) -> Self {
        let mut adjacency = vec![Vec::new(); vocab.len()];
        for (&(u, v), &w) in &edges {
            adjacency[u].push((v, w as f64));
            adjacency[v].push((u, w as f64));
        }
        for row in &mut adjacency {
            row.sort_by_key(|&(n, _)| n);
        }
        CoocGraph {
            vocab,
            index,
            edges,
            adjacency,
        }
    }

    /// Builds a graph from explicit parts, validating every invariant.
    pub fn from_parts(vocab: Vec<String>, edges: Vec<(usize, usize, u32)>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(KpeError::InvalidArgument(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        if vocab.is_empty() {
            return Err(KpeError::InvalidArgument("graph needs at least one node".into()));
        }
        let mut map = BTreeMap::new();
        for (u, v, w) in edges {
            for n in [u, v] {
                if n >= vocab.len() {
                    return Err(KpeError::IndexOutOfRange {
                        index: n,
                        len: vocab.len(),
                    });
                }
            }
            if u == v {
                return Err(KpeError::InvalidArgument(format!("self-loop on node {u}")));
            }
            if w == 0 {
                return Err(KpeError::InvalidArgument(format!("zero weight on edge {u}-{v}")));
            }
            if map.insert((u.min(v), u.max(v)), w).is_some() {
                return Err(KpeError::InvalidArgument(format!("duplicate edge {u}-{v}")));
            }
        }
        Ok(Self::assemble(vocab, index, map))
    }

    pub fn node_count(&self) -> usize {
        self.vocab.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Node index of a token, after lowercasing.
    pub fn node_of(&self, token: &str) -> Option<usize> {
        self.index.get(&normalize_token_for_node(token)).copied()
    }

    pub fn weight(&self, u: usize, v: usize) -> Option<u32> {
        self.edges.get(&(u.min(v), u.max(v))).copied()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.weight(u, v).is_some()
    }

    /// Edges as `(u, v, weight)` with `u < v`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        self.edges.iter().map(|(&(u, v), &w)| (u, v, w))
    }

    /// Neighbours of `v` with their edge weights, sorted by node index.
    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adjacency[v]
    }

    pub fn total_weight(&self) -> u64 {
        self.edges.values().map(|&w| w as u64).sum()
    }

    /// Returns the same graph with nodes renumbered so that old node `i`
    /// becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.node_count() {
            return Err(KpeError::Dimension(format!(
                "permutation of length {} for {} nodes",
                perm.len(),
                self.node_count()
            )));
        }
        let mut vocab = vec![String::new(); perm.len()];
        for (old, &new) in perm.iter().enumerate() {
            vocab[new] = self.vocab[old].clone();
        }
        let edges = self
            .edges()
            .map(|(u, v, w)| (perm[u], perm[v], w))
            .collect();
        Self::from_parts(vocab, edges)
    }

    pub fn to_dump(&self) -> GraphDump {
        GraphDump {
            vocab: self.vocab.clone(),
            edges: self.edges().map(|(u, v, w)| [u as u64, v as u64, w as u64]).collect(),
        }
    }

    pub fn from_dump(dump: GraphDump) -> Result<Self> {
        let edges = dump
            .edges
            .into_iter()
            .map(|[u, v, w]| {
                let w = u32::try_from(w)
                    .map_err(|_| KpeError::InvalidArgument(format!("edge weight {w} too large")))?;
                Ok((u as usize, v as usize, w))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(dump.vocab, edges)
    }
}

/// JSON form of a graph: vocabulary plus `[u, v, weight]` triples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub vocab: Vec<String>,
    pub edges: Vec<[u64; 3]>,
}
