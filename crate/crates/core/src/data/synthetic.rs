//! Synthetic graphs with planted hierarchical and clustered structure.

use super::{stratified_split, DataError, Graph, GraphSet, NodeDataset, Result};
use crate::seed::{streams, SeedSplitter};
use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Family {
    /// Complete tree; label is depth parity.
    Tree,
    /// Chain of alternating cycles and cliques; label is motif type.
    CycleClique,
    /// Tree whose leaves carry cliques or cycles; label is the local motif.
    Mixed,
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "TREE" => Ok(Family::Tree),
            "CYCLE_CLIQUE" => Ok(Family::CycleClique),
            "MIXED" => Ok(Family::Mixed),
            _ => Err(format!("unknown family `{s}` (TREE, CYCLE_CLIQUE, MIXED)")),
        }
    }
}

/// What hangs off a tree leaf in the MIXED family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motif {
    Clique,
    Cycle,
    None,
}

impl std::str::FromStr for Motif {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "clique" => Ok(Motif::Clique),
            "cycle" => Ok(Motif::Cycle),
            "none" => Ok(Motif::None),
            _ => Err(format!("unknown motif `{s}` (clique, cycle, none)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub family: Family,
    /// Tree depth (root at depth 0).
    pub depth: usize,
    pub branching: usize,
    pub clique_size: usize,
    pub cycle_length: usize,
    /// CYCLE_CLIQUE motif counts.
    pub cycles: usize,
    pub cliques: usize,
    /// MIXED: motif pattern cycled over the leaves in order.
    pub motifs: Vec<Motif>,
    /// Standard deviation of the Gaussian noise added to the one-hot degree
    /// features.
    pub noise: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            family: Family::Mixed,
            depth: 5,
            branching: 2,
            clique_size: 4,
            cycle_length: 4,
            cycles: 8,
            cliques: 8,
            motifs: vec![Motif::Clique, Motif::Cycle],
            noise: 0.1,
            seed: 0,
            train_fraction: 0.6,
            val_fraction: 0.2,
        }
    }
}

impl SyntheticSpec {
    pub fn tree(depth: usize, branching: usize) -> Self {
        Self {
            family: Family::Tree,
            depth,
            branching,
            ..Self::default()
        }
    }

    pub fn cycle_clique(cycles: usize, cliques: usize, cycle_length: usize, clique_size: usize) -> Self {
        Self {
            family: Family::CycleClique,
            cycles,
            cliques,
            cycle_length,
            clique_size,
            ..Self::default()
        }
    }

    pub fn mixed(depth: usize, branching: usize, motif_size: usize) -> Self {
        Self {
            family: Family::Mixed,
            depth,
            branching,
            clique_size: motif_size,
            cycle_length: motif_size,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if !(0.0..1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1)");
        }
        if !(self.train_fraction > 0.0 && self.val_fraction >= 0.0 && self.train_fraction + self.val_fraction <= 1.0) {
            return bad("split fractions must be positive and sum to at most 1");
        }
        match self.family {
            Family::Tree => {
                if self.depth < 1 || self.branching < 1 {
                    return bad("TREE needs depth >= 1 and branching >= 1 to produce two classes");
                }
            }
            Family::CycleClique => {
                if self.cycles == 0 || self.cliques == 0 {
                    return bad("CYCLE_CLIQUE needs at least one cycle and one clique");
                }
                if self.cycle_length < 3 || self.clique_size < 2 {
                    return bad("cycle_length must be >= 3 and clique_size >= 2");
                }
            }
            Family::Mixed => {
                if self.depth < 1 || self.branching < 1 {
                    return bad("MIXED needs depth >= 1 and branching >= 1");
                }
                if !self.motifs.iter().any(|m| *m != Motif::None) {
                    return bad("MIXED needs at least one clique or cycle motif");
                }
                if self.motifs.contains(&Motif::Cycle) && self.cycle_length < 3 {
                    return bad("cycle_length must be >= 3");
                }
                if self.motifs.contains(&Motif::Clique) && self.clique_size < 2 {
                    return bad("clique_size must be >= 2");
                }
            }
        }
        Ok(())
    }
}

/// Incrementally built graph with planted labels.
#[derive(Default)]
struct Builder {
    labels: Vec<usize>,
    edges: Vec<(usize, usize)>,
}

impl Builder {
    fn node(&mut self, label: usize) -> usize {
        self.labels.push(label);
        self.labels.len() - 1
    }

    /// Complete tree; returns node ids grouped by level.
    fn tree(&mut self, depth: usize, branching: usize, label: impl Fn(usize) -> usize) -> Vec<Vec<usize>> {
        let mut levels = vec![vec![self.node(label(0))]];
        for d in 1..=depth {
            let mut next = Vec::new();
            for &p in &levels[d - 1] {
                for _ in 0..branching {
                    let c = self.node(label(d));
                    self.edges.push((p, c));
                    next.push(c);
                }
            }
            levels.push(next);
        }
        levels
    }

    fn clique(&mut self, size: usize, label: usize) -> Vec<usize> {
        let ids: Vec<usize> = (0..size).map(|_| self.node(label)).collect();
        for a in 0..size {
            for b in a + 1..size {
                self.edges.push((ids[a], ids[b]));
            }
        }
        ids
    }

    fn cycle(&mut self, len: usize, label: usize) -> Vec<usize> {
        let ids: Vec<usize> = (0..len).map(|_| self.node(label)).collect();
        for a in 0..len {
            self.edges.push((ids[a], ids[(a + 1) % len]));
        }
        ids
    }
}

fn degree_features<R: Rng>(g_edges: &[(usize, usize)], n: usize, dim: usize, noise: f64, rng: &mut R) -> Array2<f64> {
    let mut deg = vec![0usize; n];
    for &(a, b) in g_edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    let mut f = Array2::zeros((n, dim));
    for (i, &d) in deg.iter().enumerate() {
        f[[i, d.min(dim - 1)]] = 1.0;
    }
    if noise > 0.0 {
        f.mapv_inplace(|x| {
            let z: f64 = StandardNormal.sample(rng);
            x + noise * z
        });
    }
    f
}

/// Builds the planted graph described by `spec`. Node ids are shuffled so
/// construction order carries no label information.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<NodeDataset> {
    spec.validate()?;
    let seeds = SeedSplitter::new(spec.seed);
    let mut rng = seeds.rng(streams::SYNTHETIC);
    let mut b = Builder::default();
    let num_classes;
    match spec.family {
        Family::Tree => {
            b.tree(spec.depth, spec.branching, |d| d % 2);
            num_classes = 2;
        }
        Family::CycleClique => {
            let mut motifs: Vec<Vec<usize>> = Vec::new();
            let total = spec.cycles + spec.cliques;
            let (mut cy, mut cl) = (0, 0);
            for i in 0..total {
                let want_cycle = (i % 2 == 0 && cy < spec.cycles) || cl >= spec.cliques;
                if want_cycle {
                    motifs.push(b.cycle(spec.cycle_length, 0));
                    cy += 1;
                } else {
                    motifs.push(b.clique(spec.clique_size, 1));
                    cl += 1;
                }
            }
            for w in motifs.windows(2) {
                let u = *w[0].choose(&mut rng).expect("non-empty motif");
                let v = *w[1].choose(&mut rng).expect("non-empty motif");
                b.edges.push((u, v));
            }
            num_classes = 2;
        }
        Family::Mixed => {
            // Class ids: tree first, then motif kinds in order of first use.
            let mut kinds: Vec<Motif> = Vec::new();
            for m in &spec.motifs {
                if *m != Motif::None && !kinds.contains(m) {
                    kinds.push(*m);
                }
            }
            let class_of = |m: Motif| 1 + kinds.iter().position(|k| *k == m).expect("known motif");
            let levels = b.tree(spec.depth, spec.branching, |_| 0);
            let leaves = levels.last().expect("non-empty tree").clone();
            for (i, &leaf) in leaves.iter().enumerate() {
                let m = spec.motifs[i % spec.motifs.len()];
                let ids = match m {
                    Motif::Clique => b.clique(spec.clique_size, class_of(m)),
                    Motif::Cycle => b.cycle(spec.cycle_length, class_of(m)),
                    Motif::None => continue,
                };
                let v = *ids.choose(&mut rng).expect("non-empty motif");
                b.edges.push((leaf, v));
            }
            num_classes = 1 + kinds.len();
        }
    }

    let n = b.labels.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let edges: Vec<(usize, usize)> = b.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
    let mut labels = vec![0; n];
    for (old, &new) in perm.iter().enumerate() {
        labels[new] = b.labels[old];
    }
    let max_deg = {
        let mut deg = vec![0usize; n];
        for &(u, v) in &edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg.into_iter().max().unwrap_or(0)
    };
    let features = degree_features(&edges, n, max_deg + 1, spec.noise, &mut rng);
    let mut split_rng = seeds.rng(streams::SPLIT);
    let splits = stratified_split(&labels, num_classes, spec.train_fraction, spec.val_fraction, &mut split_rng);
    Ok(NodeDataset {
        graph: Graph::new(n, edges, features),
        labels,
        splits,
        num_classes,
    })
}

/// Graph-classification set: label 0 graphs are random trees, label 1
/// graphs are a cycle and a clique joined by one edge. Sizes are drawn from
/// `min_nodes..=max_nodes`; features are one-hot degree (width
/// `max_nodes`) plus noise.
pub fn generate_graph_set(count: usize, min_nodes: usize, max_nodes: usize, noise: f64, seed: u64) -> Result<GraphSet> {
    if count < 2 || min_nodes < 5 || max_nodes < min_nodes {
        return Err(DataError::InvalidSpec(
            "need count >= 2 and 5 <= min_nodes <= max_nodes".into(),
        ));
    }
    let seeds = SeedSplitter::new(seed);
    let mut rng: ChaCha8Rng = seeds.rng(streams::SYNTHETIC);
    let mut graphs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 2;
        let n = rng.random_range(min_nodes..=max_nodes);
        let mut edges = Vec::new();
        if label == 0 {
            for v in 1..n {
                edges.push((rng.random_range(0..v), v));
            }
        } else {
            let cyc = n / 2;
            for a in 0..cyc {
                edges.push((a, (a + 1) % cyc));
            }
            for a in cyc..n {
                for c in a + 1..n {
                    edges.push((a, c));
                }
            }
            edges.push((rng.random_range(0..cyc), rng.random_range(cyc..n)));
        }
        let f = degree_features(&edges, n, max_nodes, noise, &mut rng);
        graphs.push(Graph::new(n, edges, f));
        labels.push(label);
    }
    let splits = stratified_split(&labels, 2, 0.6, 0.2, &mut seeds.rng(streams::SPLIT));
    Ok(GraphSet {
        graphs,
        labels,
        splits,
        num_classes: 2,
    })
}
