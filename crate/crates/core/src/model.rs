//! End-to-end capsule network: graph encoder, lift to primary capsules,
//! stacked routing layers and a tangent-space classifier.

use crate::autodiff::{Csr, Tape, Var};
use crate::data::{Graph, GraphDataset};
use crate::geometry::tape::{exp_o, log_o};
use crate::geometry::{diffeo_exp_o, diffeo_log_o, GeometryError, Manifold, PseudoPoint, TangentVector};
use crate::params::{glorot, join, normal, unit_rows, ParamKind, ParamTree};
use crate::policy::NumericPolicy;
use crate::routing::batched::{euclid_forward, prr_forward, squash, Routed};
use crate::routing::{EuclidParams, LayerShape, PerspectiveParams, RoutingConfig, RoutingMode};
use crate::seed::{streams, SeedSplitter};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: field `{field}`: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty graph")]
    EmptyGraph,
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{stage}: capsule off the manifold (residual {residual:e})")]
    OffManifold { stage: String, residual: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Node,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    /// Cosine alignment of class-capsule tangents with learnable
    /// prototypes, scaled by `sqrt(|beta_cls|)`.
    Prcc,
    /// Affine map of the concatenated class-capsule tangents.
    Linear,
}

impl std::str::FromStr for ClassifierKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "prcc" => Ok(Self::Prcc),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown classifier `{other}`")),
        }
    }
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Prcc => "prcc",
            Self::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_dim: usize,
    /// Number of routing layers.
    pub capsule_layers: usize,
    /// Space-like dimensions `s`.
    pub space_dim: usize,
    /// Time-like dimensions `t` (the time block holds `t + 1` coordinates).
    pub time_dim: usize,
    /// Base curvature, shared by every capsule layer and kept fixed.
    pub beta_init: f64,
    pub primary_capsules: usize,
    pub hidden_capsules: usize,
    /// Filled from the dataset when zero.
    pub num_classes: usize,
    /// Node feature width; filled from the dataset when zero.
    pub input_dim: usize,
    pub task: Task,
    pub routing: RoutingConfig,
    pub classifier: ClassifierKind,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_dim: 64,
            capsule_layers: 3,
            space_dim: 9,
            time_dim: 9,
            beta_init: -1.0,
            primary_capsules: 8,
            hidden_capsules: 8,
            num_classes: 0,
            input_dim: 0,
            task: Task::Node,
            routing: RoutingConfig::default(),
            classifier: ClassifierKind::Prcc,
            dropout: 0.5,
        }
    }
}

impl ModelConfig {
    /// Ambient capsule width `s + t + 1`.
    pub fn capsule_dim(&self) -> usize {
        self.space_dim + self.time_dim + 1
    }

    /// Free tangent coordinates `s + t`.
    pub fn tangent_dim(&self) -> usize {
        self.space_dim + self.time_dim
    }

    pub fn manifold(&self) -> Result<Manifold> {
        Ok(Manifold::new(self.space_dim, self.time_dim, self.beta_init)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, msg: &str| {
            Err(ModelError::Config {
                field,
                msg: msg.to_string(),
            })
        };
        if self.encoder_dim == 0 {
            return bad("encoder_dim", "must be >= 1");
        }
        if self.capsule_layers == 0 {
            return bad("capsule_layers", "must be >= 1");
        }
        if self.space_dim == 0 || self.time_dim == 0 {
            return bad("space_dim", "space_dim and time_dim must be >= 1");
        }
        if !(self.beta_init < 0.0 && self.beta_init.is_finite()) {
            return bad("beta_init", "must be a finite negative number");
        }
        if self.primary_capsules == 0 || self.hidden_capsules == 0 {
            return bad("primary_capsules", "capsule counts must be >= 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes", "must be >= 2");
        }
        if self.input_dim == 0 {
            return bad("input_dim", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        self.routing.validate().map_err(|e| ModelError::Config {
            field: "routing",
            msg: e.to_string(),
        })
    }

    /// `(children, parents)` of every routing layer.
    pub fn layer_sizes(&self) -> Vec<(usize, usize)> {
        let l = self.capsule_layers;
        (0..l)
            .map(|i| {
                let children = if i == 0 { self.primary_capsules } else { self.hidden_capsules };
                let parents = if i + 1 == l { self.num_classes } else { self.hidden_capsules };
                (children, parents)
            })
            .collect()
    }

    pub fn layer_shapes(&self) -> Result<Vec<LayerShape>> {
        let m = self.manifold()?;
        Ok(self
            .layer_sizes()
            .into_iter()
            .map(|(children, parents)| LayerShape {
                children,
                parents,
                input: m,
                output: m,
            })
            .collect())
    }

    /// Width of the classifier input per example.
    fn head_input(&self) -> usize {
        let per_class = match self.routing.mode {
            RoutingMode::Euclidean => self.capsule_dim(),
            _ => self.tangent_dim(),
        };
        match (self.routing.mode, self.classifier) {
            (RoutingMode::None, ClassifierKind::Linear) => self.encoder_dim,
            (_, ClassifierKind::Linear) => self.num_classes * per_class,
            (_, ClassifierKind::Prcc) => per_class,
        }
    }
}

/// `tanh(A_hat X W^T + b)` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    /// `[encoder_dim, input_dim]`.
    pub w: T,
    /// `[1, encoder_dim]`.
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Pseudo(PerspectiveParams<T>),
    Euclid(EuclidParams<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<T> {
    Prcc {
        /// `[C, d]` class prototypes in tangent coordinates.
        prototypes: T,
        /// `[1, 1]` classifier curvature; logits scale by `sqrt(|beta|)`.
        beta: T,
    },
    Linear {
        /// `[C, d_in]`.
        w: T,
        /// `[1, C]`.
        b: T,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: Encoder<T>,
    /// `[capsules * d, encoder_dim]`; absent for the encoder-only model.
    pub lift: Option<T>,
    pub layers: Vec<Layer<T>>,
    pub head: Head<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: Encoder {
                w: f(&self.encoder.w),
                b: f(&self.encoder.b),
            },
            lift: self.lift.as_ref().map(&mut *f),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Pseudo(p) => Layer::Pseudo(p.map(f)),
                    Layer::Euclid(p) => Layer::Euclid(p.map(f)),
                })
                .collect(),
            head: match &self.head {
                Head::Prcc { prototypes, beta } => Head::Prcc {
                    prototypes: f(prototypes),
                    beta: f(beta),
                },
                Head::Linear { w, b } => Head::Linear { w: f(w), b: f(b) },
            },
        }
    }
}

impl<T> ParamTree<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a T)) {
        f(join(prefix, "encoder.w"), ParamKind::Matrix, &self.encoder.w);
        f(join(prefix, "encoder.b"), ParamKind::Other, &self.encoder.b);
        if let Some(l) = &self.lift {
            f(join(prefix, "lift"), ParamKind::Matrix, l);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer.{i}"));
            match layer {
                Layer::Pseudo(x) => x.visit(&p, f),
                Layer::Euclid(x) => x.visit(&p, f),
            }
        }
        match &self.head {
            Head::Prcc { prototypes, beta } => {
                f(join(prefix, "head.prototypes"), ParamKind::Other, prototypes);
                f(join(prefix, "head.beta"), ParamKind::Other, beta);
            }
            Head::Linear { w, b } => {
                f(join(prefix, "head.w"), ParamKind::Matrix, w);
                f(join(prefix, "head.b"), ParamKind::Other, b);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.encoder.w);
        f(&mut self.encoder.b);
        if let Some(l) = &mut self.lift {
            f(l);
        }
        for layer in &mut self.layers {
            match layer {
                Layer::Pseudo(x) => x.visit_mut(f),
                Layer::Euclid(x) => x.visit_mut(f),
            }
        }
        match &mut self.head {
            Head::Prcc { prototypes, beta } => {
                f(prototypes);
                f(beta);
            }
            Head::Linear { w, b } => {
                f(w);
                f(b);
            }
        }
    }
}

impl ModelParams<Array2<f64>> {
    /// Seeded initialization; each component draws from its own stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let seeds = SeedSplitter::new(seed);
        let mut rng = seeds.rng(streams::ENCODER);
        let encoder = Encoder {
            w: glorot(&mut rng, cfg.encoder_dim, cfg.input_dim),
            b: Array2::zeros((1, cfg.encoder_dim)),
        };
        let mode = cfg.routing.mode;
        let lift_caps = match mode {
            RoutingMode::None => cfg.num_classes,
            _ => cfg.primary_capsules,
        };
        let lift_width = match mode {
            RoutingMode::Euclidean => cfg.capsule_dim(),
            _ => cfg.tangent_dim(),
        };
        let lift = (!(mode == RoutingMode::None && cfg.classifier == ClassifierKind::Linear)).then(|| {
            let mut r = seeds.rng(streams::LIFT);
            normal(&mut r, lift_caps * lift_width, cfg.encoder_dim, 1.0 / (cfg.encoder_dim as f64).sqrt())
        });
        let mut layers = Vec::new();
        if mode != RoutingMode::None {
            for (l, shape) in cfg.layer_shapes()?.iter().enumerate() {
                let mut r = seeds.rng(&streams::routing(l));
                layers.push(match mode {
                    RoutingMode::Euclidean => Layer::Euclid(EuclidParams::init(
                        shape.children,
                        shape.parents,
                        cfg.capsule_dim(),
                        cfg.capsule_dim(),
                        cfg.routing.per_pair_weights,
                        &mut r,
                    )),
                    _ => Layer::Pseudo(PerspectiveParams::init(shape, &cfg.routing, &mut r)),
                });
            }
        }
        let mut r = seeds.rng(streams::CLASSIFIER);
        let head = match cfg.classifier {
            ClassifierKind::Prcc => Head::Prcc {
                prototypes: unit_rows(&mut r, cfg.num_classes, cfg.head_input()),
                beta: Array2::from_elem((1, 1), cfg.beta_init),
            },
            ClassifierKind::Linear => Head::Linear {
                w: glorot(&mut r, cfg.num_classes, cfg.head_input()),
                b: Array2::zeros((1, cfg.num_classes)),
            },
        };
        Ok(Self {
            encoder,
            lift,
            layers,
            head,
        })
    }

    /// Registers every leaf as a trainable tape parameter.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |a| tape.param(a.clone()))
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, a| n += a.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, a| ok &= a.iter().all(|x| x.is_finite()));
        ok
    }
}

/// Symmetric normalization `D^-1/2 (A + I) D^-1/2` with degrees of `A + I`.
pub fn normalized_adjacency(g: &Graph) -> Csr {
    let n = g.node_count;
    let mut trip: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
    for &(a, b) in &g.edges {
        trip.push((a, b, 1.0));
        if a != b {
            trip.push((b, a, 1.0));
        }
    }
    let mut deg = vec![0.0; n];
    for &(r, _, v) in &trip {
        deg[r] += v;
    }
    let inv: Vec<f64> = deg.iter().map(|d: &f64| 1.0 / d.sqrt()).collect();
    let trip = trip.into_iter().map(|(r, c, v)| (r, c, v * inv[r] * inv[c])).collect();
    Csr::from_triplets(n, n, trip)
}

/// `A_hat X`: the parameter-free half of the encoder.
pub fn aggregate_features(g: &Graph) -> Result<Array2<f64>> {
    if g.node_count == 0 {
        return Err(ModelError::EmptyGraph);
    }
    Ok(normalized_adjacency(g).matmul(&g.features.view()))
}

/// Encoder applied to a whole graph outside the tape.
pub fn gnn_encode(g: &Graph, enc: &Encoder<Array2<f64>>) -> Result<Array2<f64>> {
    if g.feature_dim() != enc.w.ncols() {
        return Err(ModelError::Dimension(format!(
            "graph has {} features, encoder expects {}",
            g.feature_dim(),
            enc.w.ncols()
        )));
    }
    let ax = aggregate_features(g)?;
    let mut h = ax.dot(&enc.w.t()) + &enc.b;
    h.mapv_inplace(f64::tanh);
    Ok(h)
}

/// Lifts one embedding to a capsule: `exp_o(W h)` with `W: [s + t, dim]`.
pub fn lift_to_manifold(embedding: &[f64], w: &Array2<f64>, m: &Manifold) -> Result<PseudoPoint> {
    if w.ncols() != embedding.len() || w.nrows() != m.sig.manifold_dim() {
        return Err(ModelError::Dimension(format!(
            "lift matrix {:?} does not map {} -> {}",
            w.dim(),
            embedding.len(),
            m.sig.manifold_dim()
        )));
    }
    let xi = w.dot(&Array1::from(embedding.to_vec()));
    let tv = TangentVector::from_reduced(xi.as_slice().expect("contiguous"), m.sig, m.beta)?;
    Ok(diffeo_exp_o(&tv))
}

/// Tangent-space mean of capsules, summed in index order.
pub fn graph_readout(capsules: &[PseudoPoint]) -> Result<PseudoPoint> {
    let first = capsules.first().ok_or(ModelError::EmptyGraph)?;
    let mut acc = vec![0.0; first.signature().manifold_dim()];
    for c in capsules {
        let z = diffeo_log_o(c)?;
        for (a, v) in acc.iter_mut().zip(z.reduced()) {
            *a += v;
        }
    }
    let n = capsules.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let tv = TangentVector::from_reduced(&acc, first.signature(), first.beta())?;
    Ok(diffeo_exp_o(&tv))
}

/// Cosine of two vectors; zero when either has zero norm.
pub fn alignment(x: &[f64], y: &[f64]) -> f64 {
    let eps = NumericPolicy::global().guard_eps;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nx * ny).max(eps)
}

/// PRCC logits `sqrt(|beta|) * Align(log_o(v_c), prototype_c)`.
pub fn prcc_logits(capsules: &[PseudoPoint], prototypes: &[TangentVector], beta: f64) -> Result<Vec<f64>> {
    if capsules.len() != prototypes.len() {
        return Err(ModelError::Dimension(format!(
            "{} class capsules but {} prototypes",
            capsules.len(),
            prototypes.len()
        )));
    }
    let scale = beta.abs().sqrt();
    capsules
        .iter()
        .zip(prototypes)
        .map(|(v, p)| Ok(scale * alignment(diffeo_log_o(v)?.reduced(), p.reduced())))
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Class probabilities from class capsules and prototypes.
pub fn classify_prcc(capsules: &[PseudoPoint], prototypes: &[TangentVector], beta: f64) -> Result<Vec<f64>> {
    Ok(softmax(&prcc_logits(capsules, prototypes, beta)?))
}

/// `-ln p[label] + lambda * sum_sq_weights`.
pub fn loss(probabilities: &[f64], label: usize, lambda: f64, sum_sq_weights: f64) -> Result<f64> {
    let p = *probabilities.get(label).ok_or(ModelError::LabelOutOfRange {
        label,
        classes: probabilities.len(),
    })?;
    Ok(-p.ln() + lambda * sum_sq_weights)
}

/// Model inputs for a batch of examples.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[nodes, F]` aggregated features.
    pub ax: Array2<f64>,
    /// Graph task: node row to example index (sorted, contiguous).
    pub graph_of_node: Option<Rc<Vec<usize>>>,
    pub examples: usize,
    pub labels: Rc<Vec<usize>>,
}

/// Aggregated features per dataset, computed once.
#[derive(Debug, Clone)]
pub enum Prepared {
    Node { ax: Array2<f64>, labels: Vec<usize> },
    Graph { ax: Vec<Array2<f64>>, labels: Vec<usize> },
}

impl Prepared {
    pub fn new(d: &GraphDataset) -> Result<Self> {
        Ok(match d {
            GraphDataset::Node(n) => Prepared::Node {
                ax: aggregate_features(&n.graph)?,
                labels: n.labels.clone(),
            },
            GraphDataset::Graph(g) => Prepared::Graph {
                ax: g.graphs.iter().map(aggregate_features).collect::<Result<_>>()?,
                labels: g.labels.clone(),
            },
        })
    }

    pub fn task(&self) -> Task {
        match self {
            Prepared::Node { .. } => Task::Node,
            Prepared::Graph { .. } => Task::Graph,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Prepared::Node { ax, .. } => ax.ncols(),
            Prepared::Graph { ax, .. } => ax.first().map_or(0, |a| a.ncols()),
        }
    }

    /// Examples `indices` (nodes or graphs) as one batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        match self {
            Prepared::Node { ax, labels } => Batch {
                ax: ax.select(Axis(0), indices),
                graph_of_node: None,
                examples: indices.len(),
                labels: Rc::new(indices.iter().map(|&i| labels[i]).collect()),
            },
            Prepared::Graph { ax, labels } => {
                let views: Vec<_> = indices.iter().map(|&i| ax[i].view()).collect();
                let stacked = ndarray::concatenate(Axis(0), &views).expect("equal widths");
                let owner = indices
                    .iter()
                    .enumerate()
                    .flat_map(|(e, &i)| std::iter::repeat_n(e, ax[i].nrows()))
                    .collect();
                Batch {
                    ax: stacked,
                    graph_of_node: Some(Rc::new(owner)),
                    examples: indices.len(),
                    labels: Rc::new(indices.iter().map(|&i| labels[i]).collect()),
                }
            }
        }
    }
}

/// Dropout randomness for a training forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn dropout(tape: &mut Tape, x: Var, d: &mut Option<Dropout<'_>>) -> Var {
    let Some(d) = d else { return x };
    if d.rate == 0.0 {
        return x;
    }
    let keep = 1.0 - d.rate;
    let (r, c) = tape.shape(x);
    let mask = Array2::from_shape_fn((r, c), |_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Results of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `[examples, C]`.
    pub logits: Var,
    /// Per routing layer.
    pub routed: Vec<Routed>,
    /// Every manifold-valued capsule stack produced, in order.
    pub capsules: Vec<(String, Var)>,
    /// Classifier input: class-major `[C * examples, d]` when `per_class`,
    /// else `[examples, d]`.
    pub head_input: Var,
    pub per_class: bool,
}

fn max_residual(tape: &Tape, x: Var, m: &Manifold) -> f64 {
    let k = m.sig.time_dim();
    let beta = m.beta.value();
    tape.value(x)
        .rows()
        .into_iter()
        .map(|r| {
            let q: f64 = r.iter().enumerate().map(|(i, v)| if i < k { -v * v } else { v * v }).sum();
            (q - beta).abs() / beta.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

fn check_manifold(tape: &Tape, x: Var, m: &Manifold, stage: &str) -> Result<()> {
    let r = max_residual(tape, x, m);
    if r.is_nan() || r > NumericPolicy::global().manifold_tol {
        return Err(ModelError::OffManifold {
            stage: stage.to_string(),
            residual: r,
        });
    }
    Ok(())
}

/// Splits `[n, caps * d]` into a child-major stack `[caps * n, d]`.
fn stack_capsules(tape: &mut Tape, flat: Var, caps: usize, d: usize) -> Var {
    let parts: Vec<Var> = (0..caps).map(|i| tape.slice(flat, i * d, (i + 1) * d)).collect();
    tape.concat_rows(&parts)
}

/// Per-capsule mean over the nodes of each graph.
fn mean_pool(tape: &mut Tape, x: Var, caps: usize, nodes: usize, owner: &[usize], graphs: usize) -> Var {
    let seg: Vec<usize> = (0..caps * nodes).map(|r| (r / nodes) * graphs + owner[r % nodes]).collect();
    tape.segment_mean(x, Rc::new(seg), caps * graphs)
}

fn head_logits(tape: &mut Tape, head: &Head<Var>, z: Var, classes: usize, batch: usize, per_class: bool) -> Var {
    let eps = NumericPolicy::global().guard_eps;
    match head {
        Head::Prcc { prototypes, beta } => {
            let cols: Vec<Var> = (0..classes)
                .map(|j| {
                    let zj = tape.slice_rows(z, j * batch, (j + 1) * batch);
                    let pj = tape.slice_rows(*prototypes, j, j + 1);
                    let prod = tape.mul(zj, pj);
                    let dot = tape.row_sum(prod);
                    let nz = tape.row_norm(zj);
                    let np = tape.row_norm(pj);
                    let den = tape.mul(nz, np);
                    let den = tape.clamp_min(den, eps);
                    tape.div(dot, den)
                })
                .collect();
            let cos = tape.concat(&cols);
            let a = tape.abs(*beta);
            let a = tape.clamp_min(a, eps);
            let temp = tape.sqrt(a);
            tape.mul(cos, temp)
        }
        Head::Linear { w, b } => {
            let input = if per_class {
                let parts: Vec<Var> = (0..classes).map(|j| tape.slice_rows(z, j * batch, (j + 1) * batch)).collect();
                tape.concat(&parts)
            } else {
                z
            };
            let y = tape.linear(input, *w);
            tape.add(y, *b)
        }
    }
}

/// Builds the forward pass on `tape`. Pass `dropout` only when training.
pub fn forward(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    batch: &Batch,
    mut drop: Option<Dropout<'_>>,
) -> Result<ForwardOut> {
    if batch.ax.ncols() != cfg.input_dim {
        return Err(ModelError::Dimension(format!(
            "batch has {} features, model expects {}",
            batch.ax.ncols(),
            cfg.input_dim
        )));
    }
    if batch.ax.nrows() == 0 {
        return Err(ModelError::EmptyGraph);
    }
    let m = cfg.manifold()?;
    let nodes = batch.ax.nrows();
    let examples = batch.examples;
    let graph_task = batch.graph_of_node.is_some();
    let classes = cfg.num_classes;

    let x = tape.constant(batch.ax.clone());
    let h = tape.linear(x, p.encoder.w);
    let h = tape.add(h, p.encoder.b);
    let h = tape.tanh(h);
    let h = dropout(tape, h, &mut drop);

    let mut capsules = Vec::new();
    let mut routed = Vec::new();
    let pool = |tape: &mut Tape, x: Var, caps: usize| match &batch.graph_of_node {
        Some(owner) => mean_pool(tape, x, caps, nodes, owner, examples),
        None => x,
    };

    let (z, per_class) = match cfg.routing.mode {
        RoutingMode::None => match cfg.classifier {
            ClassifierKind::Linear => (pool(tape, h, 1), false),
            ClassifierKind::Prcc => {
                let lift = p.lift.expect("lift present");
                let flat = tape.linear(h, lift);
                let xi = stack_capsules(tape, flat, classes, cfg.tangent_dim());
                let xi = dropout(tape, xi, &mut drop);
                let caps = exp_o(tape, xi, &m);
                check_manifold(tape, caps, &m, "lift")?;
                capsules.push(("lift".to_string(), caps));
                let z = log_o(tape, caps, &m);
                (pool(tape, z, classes), true)
            }
        },
        RoutingMode::Euclidean => {
            let d = cfg.capsule_dim();
            let flat = tape.linear(h, p.lift.expect("lift present"));
            let u = stack_capsules(tape, flat, cfg.primary_capsules, d);
            let u = dropout(tape, u, &mut drop);
            let mut caps = squash(tape, u);
            let mut batch_size = nodes;
            let mut children = cfg.primary_capsules;
            let last = p.layers.len() - 1;
            for (l, layer) in p.layers.iter().enumerate() {
                let Layer::Euclid(params) = layer else {
                    return Err(ModelError::Dimension(format!("layer {l} is not Euclidean")));
                };
                if graph_task && l == last {
                    caps = pool(tape, caps, children);
                    batch_size = examples;
                }
                let r = euclid_forward(tape, caps, batch_size, children, params, cfg.routing.iterations);
                caps = r.parents;
                children = params.parents;
                routed.push(r);
            }
            (caps, true)
        }
        RoutingMode::Pcr | RoutingMode::Acr => {
            let shapes = cfg.layer_shapes()?;
            let flat = tape.linear(h, p.lift.expect("lift present"));
            let xi = stack_capsules(tape, flat, cfg.primary_capsules, cfg.tangent_dim());
            let xi = dropout(tape, xi, &mut drop);
            let mut caps = exp_o(tape, xi, &m);
            check_manifold(tape, caps, &m, "lift")?;
            capsules.push(("lift".to_string(), caps));
            let mut batch_size = nodes;
            let last = shapes.len() - 1;
            for (l, (layer, shape)) in p.layers.iter().zip(&shapes).enumerate() {
                let Layer::Pseudo(params) = layer else {
                    return Err(ModelError::Dimension(format!("layer {l} is not pseudo-Riemannian")));
                };
                if graph_task && l == last {
                    let z = log_o(tape, caps, &m);
                    let zm = pool(tape, z, shape.children);
                    caps = exp_o(tape, zm, &m);
                    batch_size = examples;
                    check_manifold(tape, caps, &m, "readout")?;
                    capsules.push(("readout".to_string(), caps));
                }
                let r = prr_forward(tape, caps, batch_size, params, shape, &cfg.routing);
                let stage = format!("routing layer {l}");
                check_manifold(tape, r.parents, &m, &stage)?;
                caps = r.parents;
                capsules.push((stage, caps));
                routed.push(r);
            }
            (log_o(tape, caps, &m), true)
        }
    };
    let logits = head_logits(tape, &p.head, z, classes, examples, per_class);
    Ok(ForwardOut {
        logits,
        routed,
        capsules,
        head_input: z,
        per_class,
    })
}

/// Logits without dropout or gradient bookkeeping.
pub fn predict(params: &ModelParams<Array2<f64>>, cfg: &ModelConfig, batch: &Batch) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let p = params.map(&mut |a| tape.constant(a.clone()));
    let out = forward(&mut tape, &p, cfg, batch, None)?;
    Ok(tape.value(out.logits).clone())
}

/// Per example, the classifier-input row of its predicted class (or the
/// shared row when the head is not per class), plus the logits.
pub fn embed(params: &ModelParams<Array2<f64>>, cfg: &ModelConfig, batch: &Batch) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut tape = Tape::new();
    let p = params.map(&mut |a| tape.constant(a.clone()));
    let out = forward(&mut tape, &p, cfg, batch, None)?;
    let logits = tape.value(out.logits).clone();
    let z = tape.value(out.head_input);
    let n = batch.examples;
    let pred = argmax_rows(&logits);
    let rows = Array2::from_shape_fn((n, z.ncols()), |(e, c)| {
        let r = if out.per_class { pred[e] * n + e } else { e };
        z[[r, c]]
    });
    Ok((logits, rows))
}

/// Row-wise softmax of a logits matrix.
pub fn probabilities(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut r in out.rows_mut() {
        let p = softmax(&r.to_vec());
        r.iter_mut().zip(p).for_each(|(d, s)| *d = s);
    }
    out
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
