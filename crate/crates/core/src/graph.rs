//! Base-graph storage and the subgraph dataset model.
//!
//! The base graph is simple and undirected, stored once in compressed sparse
//! row form. Neighbor lists are sorted, so adjacency queries are a binary
//! search and every traversal in the crate visits neighbors in a fixed order.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Immutable simple undirected graph in compressed sparse row form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsrGraph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

impl CsrGraph {
    /// Builds a graph from an undirected edge list.
    ///
    /// Each pair is inserted in both directions; duplicates collapse and
    /// self-loops are dropped.
    pub fn from_edges<I>(num_nodes: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut pairs = Vec::new();
        for (u, v) in edges {
            for id in [u, v] {
                if id >= num_nodes {
                    return Err(Error::NodeOutOfRange { id, num_nodes });
                }
            }
            if u != v {
                pairs.push((u, v));
                pairs.push((v, u));
            }
        }
        Ok(Self::from_directed_pairs(num_nodes, pairs))
    }

    fn from_directed_pairs(num_nodes: usize, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        pairs.dedup();
        let mut row_offsets = vec![0usize; num_nodes + 1];
        for &(u, _) in &pairs {
            row_offsets[u + 1] += 1;
        }
        for i in 0..num_nodes {
            row_offsets[i + 1] += row_offsets[i];
        }
        let col_indices = pairs.into_iter().map(|(_, v)| v).collect();
        CsrGraph {
            num_nodes,
            row_offsets,
            col_indices,
        }
    }

    pub fn empty(num_nodes: usize) -> Self {
        CsrGraph {
            num_nodes,
            row_offsets: vec![0; num_nodes + 1],
            col_indices: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.col_indices.len() / 2
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    /// Sorted neighbors of `u`.
    #[inline]
    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[u]..self.row_offsets[u + 1]]
    }

    #[inline]
    pub fn degree(&self, u: usize) -> usize {
        self.row_offsets[u + 1] - self.row_offsets[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.num_nodes && self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Iterates each undirected edge once as `(u, v)` with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .copied()
                .filter(move |&v| u < v)
                .map(move |v| (u, v))
        })
    }

    /// Checks every structural invariant: sorted unique rows, no self-loops,
    /// ids in range, and symmetric adjacency.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDataset(m));
        if self.row_offsets.len() != self.num_nodes + 1 || self.row_offsets[0] != 0 {
            return bad("row offsets have the wrong length".into());
        }
        if *self.row_offsets.last().unwrap() != self.col_indices.len() {
            return bad("row offsets do not cover the column array".into());
        }
        for u in 0..self.num_nodes {
            if self.row_offsets[u] > self.row_offsets[u + 1] {
                return bad(format!("row offsets decrease at node {u}"));
            }
            let row = self.neighbors(u);
            for w in row.windows(2) {
                if w[0] >= w[1] {
                    return bad(format!("row {u} is not strictly increasing"));
                }
            }
            for &v in row {
                if v >= self.num_nodes {
                    return Err(Error::NodeOutOfRange {
                        id: v,
                        num_nodes: self.num_nodes,
                    });
                }
                if v == u {
                    return bad(format!("self-loop at node {u}"));
                }
                if !self.has_edge(v, u) {
                    return bad(format!("edge ({u},{v}) has no reverse"));
                }
            }
        }
        Ok(())
    }
}

/// Reads a whitespace-separated `u v` edge list.
///
/// Lines that are blank are skipped. A third column is rejected because the
/// graph model is unweighted.
pub fn load_edge_list(path: impl AsRef<Path>, num_nodes: usize) -> Result<CsrGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [a, b] => {
                let u: usize = a.parse().map_err(|_| parse_err(format!("bad node id {a:?}")))?;
                let v: usize = b.parse().map_err(|_| parse_err(format!("bad node id {b:?}")))?;
                for id in [u, v] {
                    if id >= num_nodes {
                        return Err(parse_err(format!("node id {id} out of range for {num_nodes} nodes")));
                    }
                }
                edges.push((u, v));
            }
            _ => {
                return Err(parse_err(format!(
                    "expected two node ids, found {} fields",
                    fields.len()
                )))
            }
        }
    }
    CsrGraph::from_edges(num_nodes, edges)
}

/// Graph induced by `nodes`, relabeled to compact ids in ascending order of
/// the original ids.
pub fn induced_subgraph(g: &CsrGraph, nodes: &[usize]) -> Result<CsrGraph> {
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&id) = sorted.iter().find(|&&id| id >= g.num_nodes()) {
        return Err(Error::NodeOutOfRange {
            id,
            num_nodes: g.num_nodes(),
        });
    }
    let mut pairs = Vec::new();
    for (new_u, &u) in sorted.iter().enumerate() {
        for &v in g.neighbors(u) {
            if let Ok(new_v) = sorted.binary_search(&v) {
                pairs.push((new_u, new_v));
            }
        }
    }
    Ok(CsrGraph::from_directed_pairs(sorted.len(), pairs))
}

/// Dense node feature matrix, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::InvalidDataset(format!(
                "feature matrix {rows}x{cols} given {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite feature value".into()));
        }
        Ok(FeatureMatrix { rows, cols, values })
    }

    /// A single constant-1 column.
    pub fn constant(rows: usize) -> Self {
        FeatureMatrix {
            rows,
            cols: 1,
            values: vec![1.0; rows],
        }
    }

    /// One-hot degree features; degrees at or above `cap` share the last
    /// column.
    pub fn one_hot_degree(g: &CsrGraph, cap: usize) -> Self {
        let cap = cap.max(1);
        let mut values = vec![0.0; g.num_nodes() * (cap + 1)];
        for u in 0..g.num_nodes() {
            values[u * (cap + 1) + g.degree(u).min(cap)] = 1.0;
        }
        FeatureMatrix {
            rows: g.num_nodes(),
            cols: cap + 1,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One labeled node set. Internal edges are never stored; they can be
/// recovered with [`induced_subgraph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgraphInstance {
    pub node_ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl SubgraphInstance {
    /// Sorts and deduplicates both id lists.
    pub fn new(mut node_ids: Vec<usize>, mut labels: Vec<usize>, split: Split) -> Self {
        node_ids.sort_unstable();
        node_ids.dedup();
        labels.sort_unstable();
        labels.dedup();
        SubgraphInstance {
            node_ids,
            labels,
            split,
        }
    }

    pub fn contains(&self, node: usize) -> bool {
        self.node_ids.binary_search(&node).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphDataset {
    pub graph: CsrGraph,
    pub features: FeatureMatrix,
    pub instances: Vec<SubgraphInstance>,
    pub num_classes: usize,
    pub multi_label: bool,
}

impl SubgraphDataset {
    /// Validates the cross-object invariants and assembles the dataset.
    pub fn new(
        graph: CsrGraph,
        features: FeatureMatrix,
        instances: Vec<SubgraphInstance>,
        num_classes: usize,
        multi_label: bool,
    ) -> Result<Self> {
        if features.rows() != graph.num_nodes() {
            return Err(Error::InvalidDataset(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                graph.num_nodes()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidDataset("num_classes must be positive".into()));
        }
        for (i, inst) in instances.iter().enumerate() {
            if inst.node_ids.is_empty() {
                return Err(Error::InvalidDataset(format!("subgraph {i} is empty")));
            }
            if let Some(&id) = inst.node_ids.iter().find(|&&id| id >= graph.num_nodes()) {
                return Err(Error::NodeOutOfRange {
                    id,
                    num_nodes: graph.num_nodes(),
                });
            }
            if inst.labels.is_empty() {
                return Err(Error::InvalidDataset(format!("subgraph {i} has no label")));
            }
            if let Some(&label) = inst.labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::LabelOutOfRange { label, num_classes });
            }
            if !multi_label && inst.labels.len() != 1 {
                return Err(Error::InvalidDataset(format!(
                    "subgraph {i} has {} labels in a single-label dataset",
                    inst.labels.len()
                )));
            }
        }
        Ok(SubgraphDataset {
            graph,
            features,
            instances,
            num_classes,
            multi_label,
        })
    }

    /// Indices of the instances in `split`, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}
