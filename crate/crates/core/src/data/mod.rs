//! Graph datasets: in-memory types, text loaders/savers and synthetic
//! generators.

pub mod io;
pub mod synthetic;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("{file}:{line}: ragged row with {got} columns, expected {expected}")]
    Ragged {
        file: String,
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("{file}:{line}: label {label} outside 0..{classes}")]
    LabelOutOfRange {
        file: String,
        line: usize,
        label: i64,
        classes: usize,
    },
    #[error("{file}:{line}: edge endpoint {node} outside 0..{nodes}")]
    EdgeOutOfRange {
        file: String,
        line: usize,
        node: usize,
        nodes: usize,
    },
    #[error("{file}:{line}: node assigned to more than one split")]
    Overlap { file: String, line: usize },
    #[error("{file}: {got} rows, expected {expected}")]
    CountMismatch {
        file: String,
        expected: usize,
        got: usize,
    },
    #[error("dataset has no nodes")]
    Empty,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// An undirected graph with node features.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub node_count: usize,
    /// Each undirected edge once, smaller endpoint first, sorted.
    pub edges: Vec<(usize, usize)>,
    /// `[node_count, F]`.
    pub features: Array2<f64>,
}

impl Graph {
    /// Normalizes and deduplicates `edges`.
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>, features: Array2<f64>) -> Self {
        let set: BTreeSet<(usize, usize)> = edges
            .into_iter()
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        Self {
            node_count,
            edges: set.into_iter().collect(),
            features,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of self-loops present in the source edges.
    pub fn self_loops(&self) -> usize {
        self.edges.iter().filter(|(a, b)| a == b).count()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.node_count];
        for &(a, b) in &self.edges {
            d[a] += 1;
            if a != b {
                d[b] += 1;
            }
        }
        d
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            if a != b {
                adj[b].push(a);
            }
        }
        adj
    }

    /// Breadth-first connectivity check.
    pub fn is_connected(&self) -> bool {
        if self.node_count == 0 {
            return true;
        }
        let adj = self.neighbors();
        let mut seen = vec![false; self.node_count];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.node_count
    }
}

/// One graph with per-node labels and split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDataset {
    pub graph: Graph,
    pub labels: Vec<usize>,
    pub splits: Vec<Option<Split>>,
    pub num_classes: usize,
}

/// A collection of labeled graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSet {
    pub graphs: Vec<Graph>,
    pub labels: Vec<usize>,
    pub splits: Vec<Option<Split>>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphDataset {
    Node(NodeDataset),
    Graph(GraphSet),
}

impl GraphDataset {
    pub fn num_classes(&self) -> usize {
        match self {
            GraphDataset::Node(d) => d.num_classes,
            GraphDataset::Graph(d) => d.num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            GraphDataset::Node(d) => d.graph.feature_dim(),
            GraphDataset::Graph(d) => d.graphs.first().map_or(0, Graph::feature_dim),
        }
    }

    pub fn labels(&self) -> &[usize] {
        match self {
            GraphDataset::Node(d) => &d.labels,
            GraphDataset::Graph(d) => &d.labels,
        }
    }

    pub fn splits(&self) -> &[Option<Split>] {
        match self {
            GraphDataset::Node(d) => &d.splits,
            GraphDataset::Graph(d) => &d.splits,
        }
    }

    pub fn splits_mut(&mut self) -> &mut Vec<Option<Split>> {
        match self {
            GraphDataset::Node(d) => &mut d.splits,
            GraphDataset::Graph(d) => &mut d.splits,
        }
    }

    /// Indices of examples (nodes or graphs) assigned to `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits()
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_splits(&self) -> bool {
        self.splits().iter().any(Option::is_some)
    }

    /// Scales every feature row to unit L2 norm (zero rows stay zero).
    pub fn l2_normalize_features(&mut self) {
        let rows = |f: &mut Array2<f64>| {
            for mut r in f.rows_mut() {
                let n = r.dot(&r).sqrt();
                if n > 0.0 {
                    r.mapv_inplace(|x| x / n);
                }
            }
        };
        match self {
            GraphDataset::Node(d) => rows(&mut d.graph.features),
            GraphDataset::Graph(d) => d.graphs.iter_mut().for_each(|g| rows(&mut g.features)),
        }
    }
}

/// Assigns a stratified random split with the given train/val fractions;
/// the remainder goes to test.
pub fn stratified_split<R: Rng>(
    labels: &[usize],
    num_classes: usize,
    train: f64,
    val: f64,
    rng: &mut R,
) -> Vec<Option<Split>> {
    let mut out = vec![None; labels.len()];
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let n = idx.len();
        let n_train = (train * n as f64).round() as usize;
        let n_val = ((val * n as f64).round() as usize).min(n - n_train);
        for (pos, &i) in idx.iter().enumerate() {
            out[i] = Some(if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    out
}
