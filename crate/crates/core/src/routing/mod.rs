//! Capsule routing: the Euclidean baseline, pseudo-Riemannian routing (PCR)
//! and adaptive curvature routing (ACR).
//!
//! [`plain`] holds the typed reference implementation operating on
//! [`PseudoPoint`](crate::geometry::PseudoPoint) values, one example at a
//! time. [`batched`] holds the differentiable implementation used for
//! training, which processes a batch of examples per tape operation.

pub mod batched;
pub mod plain;

use crate::geometry::{GeometryError, Manifold};
use crate::params::{join, normal, ParamKind, ParamTree};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoutingError {
    #[error("iteration {iteration}, child {child}, parent {parent}: {source}")]
    Geometry {
        iteration: usize,
        child: usize,
        parent: usize,
        #[source]
        source: GeometryError,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid routing configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, RoutingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    Euclidean,
    Pcr,
    Acr,
    /// No routing layers; the lift feeds the classifier directly.
    None,
}

impl std::str::FromStr for RoutingMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Self::Euclidean),
            "pcr" => Ok(Self::Pcr),
            "acr" => Ok(Self::Acr),
            "none" => Ok(Self::None),
            other => Err(format!("unknown routing mode `{other}`")),
        }
    }
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Euclidean => "euclidean",
            Self::Pcr => "pcr",
            Self::Acr => "acr",
            Self::None => "none",
        })
    }
}

/// Gate used by ACR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateForm {
    /// `sigmoid(a_curv*C + a_align*A + a_route*R)`.
    ThreeTerm,
    /// `sigmoid(W_gate [log u ∥ log v_prev])`.
    Simplified,
}

/// Switches for the three gate terms; a disabled term contributes zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateTerms {
    pub curvature: bool,
    pub alignment: bool,
    pub consistency: bool,
}

impl Default for GateTerms {
    fn default() -> Self {
        Self {
            curvature: true,
            alignment: true,
            consistency: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => x.tanh(),
            Self::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub mode: RoutingMode,
    /// Routing iterations `T`.
    pub iterations: usize,
    /// Perspectives `K`; PCR always uses one.
    pub perspectives: usize,
    pub gate: GateForm,
    pub gate_terms: GateTerms,
    /// Replace every gate by 1 (ACR only).
    pub unit_gates: bool,
    /// One transformation per (child, parent, perspective) instead of per
    /// (parent, perspective).
    pub per_pair_weights: bool,
    pub activation: Activation,
    pub d_align: usize,
    pub d_ctx: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            mode: RoutingMode::Acr,
            iterations: 3,
            perspectives: 4,
            gate: GateForm::ThreeTerm,
            gate_terms: GateTerms::default(),
            unit_gates: false,
            per_pair_weights: false,
            activation: Activation::Tanh,
            d_align: 8,
            d_ctx: 16,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(RoutingError::Config("iterations must be >= 1".into()));
        }
        if self.perspectives == 0 {
            return Err(RoutingError::Config("perspectives must be >= 1".into()));
        }
        if self.d_align == 0 || self.d_ctx == 0 {
            return Err(RoutingError::Config("d_align and d_ctx must be >= 1".into()));
        }
        Ok(())
    }

    /// Perspectives actually used by the mode.
    pub fn effective_perspectives(&self) -> usize {
        match self.mode {
            RoutingMode::Acr => self.perspectives,
            _ => 1,
        }
    }

    /// Whether gates are computed (rather than fixed at one).
    pub fn gated(&self) -> bool {
        self.mode == RoutingMode::Acr && !self.unit_gates
    }
}

/// Shape of one routing layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub children: usize,
    pub parents: usize,
    pub input: Manifold,
    pub output: Manifold,
}

impl LayerShape {
    pub fn d_in(&self) -> usize {
        self.input.sig.manifold_dim()
    }

    pub fn d_out(&self) -> usize {
        self.output.sig.manifold_dim()
    }
}

/// Initial perspective curvatures: evenly spaced in `[-1, 1]`, symmetric
/// about zero, with zero included only for odd `K`.
pub fn initial_betas(k: usize) -> Vec<f64> {
    let half = k / 2;
    let mut out = Vec::with_capacity(k);
    if k % 2 == 0 {
        for m in (1..=half).rev() {
            out.push(-(m as f64) / half as f64);
        }
        for m in 1..=half {
            out.push(m as f64 / half as f64);
        }
    } else {
        for m in (1..=half).rev() {
            out.push(-(m as f64) / half as f64);
        }
        out.push(0.0);
        for m in 1..=half {
            out.push(m as f64 / half as f64);
        }
    }
    out
}

/// Gate parameters of one ACR layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    /// `[1, K]` perspective curvatures.
    pub beta_k: T,
    /// `[K, d_align]`; row `k` is `w_k`.
    pub w_align: T,
    /// `[K*d_align, d_in]`: the child half of every `W_align_k`, stacked.
    pub align_u: T,
    /// `[K*d_align, d_out]`: the parent half.
    pub align_v: T,
    /// `[d_ctx, d_in]` and `[d_ctx, d_out]` halves of the context map.
    pub ctx_u: T,
    pub ctx_v: T,
    /// `[K, d_ctx]`.
    pub w_c: T,
    /// `[1, 3]`: `(alpha_curv, alpha_align, alpha_route)`.
    pub alpha: T,
    /// `[K, d_in]` and `[K, d_out]` halves of the simplified gate.
    pub gate_u: Option<T>,
    pub gate_v: Option<T>,
}

/// Parameters of one pseudo-Riemannian routing layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveParams<T> {
    /// `[t_out, t_in]` sphere maps, indexed by [`Self::index`].
    pub w_sph: Vec<T>,
    /// `[s_out, s_in]` Euclidean maps.
    pub w_euc: Vec<T>,
    pub gates: Option<GateParams<T>>,
    pub perspectives: usize,
    pub parents: usize,
    pub per_pair: bool,
}

impl<T> PerspectiveParams<T> {
    /// Position of the transformation used for `(child, parent, k)`.
    pub fn index(&self, child: usize, parent: usize, k: usize) -> usize {
        let pair = if self.per_pair {
            child * self.parents + parent
        } else {
            parent
        };
        pair * self.perspectives + k
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> PerspectiveParams<U> {
        PerspectiveParams {
            w_sph: self.w_sph.iter().map(&mut *f).collect(),
            w_euc: self.w_euc.iter().map(&mut *f).collect(),
            gates: self.gates.as_ref().map(|g| GateParams {
                beta_k: f(&g.beta_k),
                w_align: f(&g.w_align),
                align_u: f(&g.align_u),
                align_v: f(&g.align_v),
                ctx_u: f(&g.ctx_u),
                ctx_v: f(&g.ctx_v),
                w_c: f(&g.w_c),
                alpha: f(&g.alpha),
                gate_u: g.gate_u.as_ref().map(&mut *f),
                gate_v: g.gate_v.as_ref().map(&mut *f),
            }),
            perspectives: self.perspectives,
            parents: self.parents,
            per_pair: self.per_pair,
        }
    }
}

impl<T> ParamTree<T> for PerspectiveParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a T)) {
        for (i, w) in self.w_sph.iter().enumerate() {
            f(join(prefix, &format!("w_sph.{i}")), ParamKind::Matrix, w);
        }
        for (i, w) in self.w_euc.iter().enumerate() {
            f(join(prefix, &format!("w_euc.{i}")), ParamKind::Matrix, w);
        }
        if let Some(g) = &self.gates {
            f(join(prefix, "beta_k"), ParamKind::Other, &g.beta_k);
            f(join(prefix, "w_align"), ParamKind::Matrix, &g.w_align);
            f(join(prefix, "align_u"), ParamKind::Matrix, &g.align_u);
            f(join(prefix, "align_v"), ParamKind::Matrix, &g.align_v);
            f(join(prefix, "ctx_u"), ParamKind::Matrix, &g.ctx_u);
            f(join(prefix, "ctx_v"), ParamKind::Matrix, &g.ctx_v);
            f(join(prefix, "w_c"), ParamKind::Matrix, &g.w_c);
            f(join(prefix, "alpha"), ParamKind::Other, &g.alpha);
            if let Some(u) = &g.gate_u {
                f(join(prefix, "gate_u"), ParamKind::Matrix, u);
            }
            if let Some(v) = &g.gate_v {
                f(join(prefix, "gate_v"), ParamKind::Matrix, v);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.w_sph.iter_mut().for_each(&mut *f);
        self.w_euc.iter_mut().for_each(&mut *f);
        if let Some(g) = &mut self.gates {
            for x in [
                &mut g.beta_k,
                &mut g.w_align,
                &mut g.align_u,
                &mut g.align_v,
                &mut g.ctx_u,
                &mut g.ctx_v,
                &mut g.w_c,
                &mut g.alpha,
            ] {
                f(x);
            }
            if let Some(u) = &mut g.gate_u {
                f(u);
            }
            if let Some(v) = &mut g.gate_v {
                f(v);
            }
        }
    }
}

impl PerspectiveParams<Array2<f64>> {
    /// Random initialization: `N(0, 1/fan_in)` transformations, curvatures
    /// from [`initial_betas`], unit gate scalars.
    pub fn init<R: Rng>(shape: &LayerShape, cfg: &RoutingConfig, rng: &mut R) -> Self {
        let k = cfg.effective_perspectives();
        let (t_in, s_in) = (shape.input.sig.t(), shape.input.sig.s());
        let (t_out, s_out) = (shape.output.sig.t(), shape.output.sig.s());
        let pairs = if cfg.per_pair_weights {
            shape.children * shape.parents
        } else {
            shape.parents
        };
        let count = pairs * k;
        let w_sph = (0..count)
            .map(|_| normal(rng, t_out, t_in, 1.0 / (t_in as f64).sqrt()))
            .collect();
        let w_euc = (0..count)
            .map(|_| normal(rng, s_out, s_in, 1.0 / (s_in as f64).sqrt()))
            .collect();
        let gates = (cfg.mode == RoutingMode::Acr).then(|| {
            let (d_in, d_out) = (shape.d_in(), shape.d_out());
            let fan = ((d_in + d_out) as f64).sqrt();
            let simplified = cfg.gate == GateForm::Simplified;
            GateParams {
                beta_k: Array2::from_shape_vec((1, k), initial_betas(k)).unwrap(),
                w_align: normal(rng, k, cfg.d_align, 1.0 / (cfg.d_align as f64).sqrt()),
                align_u: normal(rng, k * cfg.d_align, d_in, 1.0 / fan),
                align_v: normal(rng, k * cfg.d_align, d_out, 1.0 / fan),
                ctx_u: normal(rng, cfg.d_ctx, d_in, 1.0 / fan),
                ctx_v: normal(rng, cfg.d_ctx, d_out, 1.0 / fan),
                w_c: normal(rng, k, cfg.d_ctx, 1.0 / (cfg.d_ctx as f64).sqrt()),
                alpha: Array2::ones((1, 3)),
                gate_u: simplified.then(|| normal(rng, k, d_in, 1.0 / fan)),
                gate_v: simplified.then(|| normal(rng, k, d_out, 1.0 / fan)),
            }
        });
        Self {
            w_sph,
            w_euc,
            gates,
            perspectives: k,
            parents: shape.parents,
            per_pair: cfg.per_pair_weights,
        }
    }

    /// Identity transformations (requires equal input/output signatures).
    pub fn identity(shape: &LayerShape, cfg: &RoutingConfig) -> Self {
        let mut p = Self::init(shape, cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        for w in p.w_sph.iter_mut().chain(p.w_euc.iter_mut()) {
            *w = Array2::eye(w.nrows());
        }
        p
    }
}

/// Parameters of one Euclidean routing layer: one `[d_out, d_in]` matrix
/// per parent (or per child/parent pair).
#[derive(Debug, Clone, PartialEq)]
pub struct EuclidParams<T> {
    pub w: Vec<T>,
    pub parents: usize,
    pub per_pair: bool,
}

impl<T> EuclidParams<T> {
    pub fn index(&self, child: usize, parent: usize) -> usize {
        if self.per_pair {
            child * self.parents + parent
        } else {
            parent
        }
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> EuclidParams<U> {
        EuclidParams {
            w: self.w.iter().map(f).collect(),
            parents: self.parents,
            per_pair: self.per_pair,
        }
    }
}

impl<T> ParamTree<T> for EuclidParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a T)) {
        for (i, w) in self.w.iter().enumerate() {
            f(join(prefix, &format!("w.{i}")), ParamKind::Matrix, w);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.w.iter_mut().for_each(f);
    }
}

impl EuclidParams<Array2<f64>> {
    pub fn init<R: Rng>(
        children: usize,
        parents: usize,
        d_in: usize,
        d_out: usize,
        per_pair: bool,
        rng: &mut R,
    ) -> Self {
        let count = if per_pair { children * parents } else { parents };
        Self {
            w: (0..count)
                .map(|_| normal(rng, d_out, d_in, 1.0 / (d_in as f64).sqrt()))
                .collect(),
            parents,
            per_pair,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perspective_curvatures_match_documented_values() {
        assert_eq!(initial_betas(4), vec![-1.0, -0.5, 0.5, 1.0]);
        assert_eq!(initial_betas(1), vec![0.0]);
        assert_eq!(initial_betas(2), vec![-1.0, 1.0]);
        assert_eq!(initial_betas(3), vec![-1.0, 0.0, 1.0]);
        assert_eq!(initial_betas(8).len(), 8);
    }

    #[test]
    fn shared_and_per_pair_indexing() {
        let m = Manifold::new(2, 2, -1.0).unwrap();
        let shape = LayerShape {
            children: 3,
            parents: 2,
            input: m,
            output: m,
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let mut cfg = RoutingConfig::default();
        let shared = PerspectiveParams::init(&shape, &cfg, &mut rng);
        assert_eq!(shared.w_sph.len(), 2 * 4);
        assert_eq!(shared.index(2, 1, 3), shared.index(0, 1, 3));
        cfg.per_pair_weights = true;
        let pp = PerspectiveParams::init(&shape, &cfg, &mut rng);
        assert_eq!(pp.w_sph.len(), 3 * 2 * 4);
        assert_eq!(pp.index(2, 1, 3), (2 * 2 + 1) * 4 + 3);
    }

    #[test]
    fn mode_parses_case_insensitively() {
        assert_eq!("ACR".parse::<RoutingMode>().unwrap(), RoutingMode::Acr);
        assert!("fancy".parse::<RoutingMode>().is_err());
    }
}
