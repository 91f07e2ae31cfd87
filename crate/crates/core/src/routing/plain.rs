//! Reference routing on typed manifold points, one example at a time.
//!
//! These functions favour clarity over speed and report every geometric
//! failure with its iteration and capsule indices. The batched tape
//! implementation is checked against them.

use super::{
    Activation, EuclidParams, GateForm, LayerShape, PerspectiveParams, Result, RoutingConfig,
    RoutingError, RoutingMode,
};
use crate::autodiff::sigmoid;
use crate::geometry::{
    diffeo_exp_o, diffeo_log_o, dot, norm, project_to_q, psi, psi_inv, sph_exp, sph_log,
    GeometryError, Manifold, ProductPoint, PseudoPoint, TangentVector,
};
use crate::policy::NumericPolicy;
use ndarray::{s, Array2, ArrayView1, ArrayView2};

/// Capsule squashing `|s|^2/(1+|s|^2) * s/|s|`.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let n2 = dot(s, s);
    let n = n2.sqrt();
    let k = n2 / (1.0 + n2) / (n + NumericPolicy::global().guard_eps);
    s.iter().map(|x| x * k).collect()
}

/// Softmax of one row of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    crate::autodiff::softmax_in_place(&mut out);
    out
}

fn matvec(w: &ArrayView2<f64>, x: &[f64]) -> Vec<f64> {
    w.rows()
        .into_iter()
        .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn mv(w: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    matvec(&w.view(), x)
}

/// Result of [`euclid_route`].
#[derive(Debug, Clone, PartialEq)]
pub struct EuclidTrace {
    pub parents: Vec<Vec<f64>>,
    /// Coupling coefficients `c[i][j]` used in each iteration.
    pub couplings: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<Vec<f64>>,
}

/// Dynamic routing by agreement between Euclidean capsules.
pub fn euclid_route(
    children: &[Vec<f64>],
    params: &EuclidParams<Array2<f64>>,
    iterations: usize,
) -> Result<EuclidTrace> {
    let np = params.parents;
    let preds: Vec<Vec<Vec<f64>>> = children
        .iter()
        .enumerate()
        .map(|(i, u)| {
            (0..np)
                .map(|j| {
                    let w = &params.w[params.index(i, j)];
                    if w.ncols() != u.len() {
                        return Err(RoutingError::Shape(format!(
                            "child {i} has dim {}, weight expects {}",
                            u.len(),
                            w.ncols()
                        )));
                    }
                    Ok(mv(w, u))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let d_out = params.w.first().map_or(0, |w| w.nrows());
    let mut b = vec![vec![0.0; np]; children.len()];
    let mut couplings = Vec::with_capacity(iterations);
    let mut parents = vec![vec![0.0; d_out]; np];
    for _ in 0..iterations {
        let c: Vec<Vec<f64>> = b.iter().map(|row| softmax(row)).collect();
        for (j, parent) in parents.iter_mut().enumerate() {
            let mut s = vec![0.0; d_out];
            for (i, ci) in c.iter().enumerate() {
                for (acc, p) in s.iter_mut().zip(&preds[i][j]) {
                    *acc += ci[j] * p;
                }
            }
            *parent = squash(&s);
        }
        for (i, row) in b.iter_mut().enumerate() {
            for (j, bij) in row.iter_mut().enumerate() {
                *bij += dot(&parents[j], &preds[i][j]);
            }
        }
        couplings.push(c);
    }
    Ok(EuclidTrace {
        parents,
        couplings,
        logits: b,
    })
}

/// Pole of the sphere `S_t` of the given radius, as a vector in `R^{t+1}`.
fn sphere_pole(len: usize, radius: f64) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[0] = radius;
    v
}

/// PCR prediction: sphere part transformed in the tangent space at the
/// sphere pole, Euclidean part transformed linearly.
pub fn pcr_predict(
    u: &PseudoPoint,
    w_sph: &Array2<f64>,
    w_euc: &Array2<f64>,
    out: &Manifold,
) -> std::result::Result<PseudoPoint, GeometryError> {
    let sig_in = u.signature();
    if w_sph.dim() != (out.sig.t(), sig_in.t()) || w_euc.dim() != (out.sig.s(), sig_in.s()) {
        return Err(GeometryError::DimensionMismatch {
            expected: sig_in.t() * out.sig.t() + sig_in.s() * out.sig.s(),
            got: w_sph.len() + w_euc.len(),
        });
    }
    let p = psi(u)?;
    let r_in = u.beta().radius();
    let log_sph = sph_log(&sphere_pole(sig_in.time_dim(), r_in), p.sphere(), r_in)?;
    // the pole component of a pole tangent is zero; W acts on the rest
    let y = mv(w_sph, &log_sph[1..]);
    let mut v = vec![0.0];
    v.extend(y);
    let r_out = out.beta.radius();
    let sphere = sph_exp(&sphere_pole(out.sig.time_dim(), r_out), &v, r_out);
    let euclid = mv(w_euc, p.euclid());
    let prod = ProductPoint::new(sphere, euclid, out.beta)?;
    psi_inv(&prod, out.beta)
}

/// `exp_o(Σ c_i log_o(pred_i))`.
pub fn pcr_aggregate(
    preds: &[PseudoPoint],
    c: &[f64],
    out: &Manifold,
) -> std::result::Result<PseudoPoint, GeometryError> {
    let mut acc = out.zero_tangent();
    for (p, &ci) in preds.iter().zip(c) {
        acc = acc.axpy(ci, &out.log_o(p)?);
    }
    Ok(diffeo_exp_o(&acc))
}

/// `Proj(exp_o(sigma(log_o(s))))`.
pub fn pcr_activate(
    s: &PseudoPoint,
    act: Activation,
) -> std::result::Result<PseudoPoint, GeometryError> {
    let xi = diffeo_log_o(s)?.map(|x| act.apply(x));
    let e = diffeo_exp_o(&xi);
    project_to_q(&e.ambient(), e.signature(), e.beta())
}

/// `b[i][j] += <log_o v_j, log_o pred[i][j]>`; returns the new couplings.
pub fn update_logits_pcr(
    b: &mut [Vec<f64>],
    parents: &[PseudoPoint],
    preds: &[Vec<PseudoPoint>],
) -> std::result::Result<Vec<Vec<f64>>, GeometryError> {
    let logs_v: Vec<TangentVector> = parents.iter().map(diffeo_log_o).collect::<std::result::Result<_, _>>()?;
    for (i, row) in b.iter_mut().enumerate() {
        for (j, bij) in row.iter_mut().enumerate() {
            *bij += logs_v[j].inner(&diffeo_log_o(&preds[i][j])?);
        }
    }
    Ok(b.iter().map(|r| softmax(r)).collect())
}

/// Cosine between two tangent vectors; zero when either vanishes.
pub fn tangent_cosine(a: &[f64], b: &[f64]) -> f64 {
    let den = (norm(a) * norm(b)).max(NumericPolicy::global().guard_eps);
    dot(a, b) / den
}

/// Local curvature estimate: cosine of `log_o u` and `log_o v_prev`.
pub fn local_curvature_estimate(
    u: &PseudoPoint,
    v_prev: &PseudoPoint,
) -> std::result::Result<f64, GeometryError> {
    let a = diffeo_log_o(u)?;
    let b = diffeo_log_o(v_prev)?;
    if a.coords().len() != b.coords().len() {
        return Err(GeometryError::DimensionMismatch {
            expected: a.coords().len(),
            got: b.coords().len(),
        });
    }
    Ok(tangent_cosine(a.reduced(), b.reduced()))
}

/// `-(kappa - beta_k)^2 / 2`.
pub fn curvature_compat(kappa: f64, beta_k: f64) -> f64 {
    -0.5 * (kappa - beta_k) * (kappa - beta_k)
}

/// `w_k · tanh(W_align_k [log u ∥ log v_prev])`, with `W_align_k` of shape
/// `[d_align, d_in + d_out]` acting on reduced tangent coordinates.
pub fn feature_alignment(
    u: &PseudoPoint,
    v_prev: &PseudoPoint,
    w_k: &[f64],
    w_align_k: &Array2<f64>,
) -> std::result::Result<f64, GeometryError> {
    let mut z = diffeo_log_o(u)?.reduced().to_vec();
    z.extend_from_slice(diffeo_log_o(v_prev)?.reduced());
    if w_align_k.ncols() != z.len() || w_align_k.nrows() != w_k.len() {
        return Err(GeometryError::DimensionMismatch {
            expected: z.len(),
            got: w_align_k.ncols(),
        });
    }
    Ok(alignment_term(&z, w_k, &w_align_k.view()))
}

fn alignment_term(z: &[f64], w_k: &[f64], w_align_k: &ArrayView2<f64>) -> f64 {
    matvec(w_align_k, z)
        .iter()
        .zip(w_k)
        .map(|(a, w)| a.tanh() * w)
        .sum()
}

/// `log(clamp(c, 1e-12, 1)) * (W_C[k] · h)`.
pub fn routing_consistency(c_ij: f64, k: usize, w_c: &Array2<f64>, h: &[f64]) -> f64 {
    let c = c_ij.clamp(NumericPolicy::global().guard_eps, 1.0);
    let row = w_c.row(k);
    c.ln() * row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
}

/// `sigmoid(a_curv*C + a_align*A + a_route*R)`.
pub fn gating_weights(c: f64, a: f64, r: f64, alphas: [f64; 3]) -> f64 {
    sigmoid(alphas[0] * c + alphas[1] * a + alphas[2] * r)
}

/// Composite weights `c_i * gamma_ik`, renormalized to sum to one; uniform
/// when they all vanish.
pub fn composite_weights(c: &[f64], gamma: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<f64>> = c
        .iter()
        .zip(gamma)
        .map(|(ci, g)| g.iter().map(|gk| ci * gk).collect())
        .collect();
    let total: f64 = raw.iter().map(|r| r.iter().sum::<f64>()).sum();
    let count: usize = raw.iter().map(Vec::len).sum();
    if total > 0.0 {
        raw.into_iter()
            .map(|r| r.into_iter().map(|w| w / total).collect())
            .collect()
    } else {
        raw.into_iter()
            .map(|r| vec![1.0 / count as f64; r.len()])
            .collect()
    }
}

/// ACR aggregation over `preds[i][k]` with couplings `c[i]` and gates
/// `gamma[i][k]` toward one parent.
pub fn acr_aggregate(
    preds: &[Vec<PseudoPoint>],
    c: &[f64],
    gamma: &[Vec<f64>],
    out: &Manifold,
) -> std::result::Result<PseudoPoint, GeometryError> {
    let logs: Vec<Vec<Vec<f64>>> = preds
        .iter()
        .map(|row| {
            row.iter()
                .map(|p| out.log_o(p).map(|t| t.reduced().to_vec()))
                .collect()
        })
        .collect::<std::result::Result<_, _>>()?;
    let w = composite_weights(c, gamma);
    let acc = weighted_tangent_sum(&logs, &w, out.sig.manifold_dim());
    Ok(diffeo_exp_o(&TangentVector::from_reduced(&acc, out.sig, out.beta)?))
}

fn weighted_tangent_sum(logs: &[Vec<Vec<f64>>], w: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    for (row, wrow) in logs.iter().zip(w) {
        let mut inner = vec![0.0; d];
        for (x, wk) in row.iter().zip(wrow) {
            for (a, xi) in inner.iter_mut().zip(x) {
                *a += wk * xi;
            }
        }
        for (a, b) in acc.iter_mut().zip(&inner) {
            *a += b;
        }
    }
    acc
}

/// State recorded for one routing iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    /// Couplings used in this iteration, `c[i][j]`.
    pub c: Vec<Vec<f64>>,
    /// Gates `gamma[i][j][k]`.
    pub gamma: Vec<Vec<Vec<f64>>>,
    /// Routing context `h[i][j]` (empty unless the three-term gate runs).
    pub h: Vec<Vec<Vec<f64>>>,
    /// Parents before this iteration.
    pub prev_parents: Vec<PseudoPoint>,
    /// Aggregated states before activation.
    pub aggregated: Vec<PseudoPoint>,
    pub parents: Vec<PseudoPoint>,
    /// Logits after this iteration's update.
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub predictions: Vec<Vec<Vec<PseudoPoint>>>,
    pub iterations: Vec<IterationState>,
}

impl RoutingTrace {
    pub fn parents(&self) -> &[PseudoPoint] {
        &self.iterations.last().expect("at least one iteration").parents
    }
}

/// The full pseudo-Riemannian routing loop for PCR and ACR.
pub fn prr_routing(
    children: &[PseudoPoint],
    params: &PerspectiveParams<Array2<f64>>,
    shape: &LayerShape,
    cfg: &RoutingConfig,
) -> Result<RoutingTrace> {
    cfg.validate()?;
    if !matches!(cfg.mode, RoutingMode::Pcr | RoutingMode::Acr) {
        return Err(RoutingError::Config(format!(
            "prr_routing needs pcr or acr, got {}",
            cfg.mode
        )));
    }
    if children.len() != shape.children {
        return Err(RoutingError::Shape(format!(
            "expected {} children, got {}",
            shape.children,
            children.len()
        )));
    }
    let gated = cfg.gated();
    if gated && shape.d_in() != shape.d_out() {
        return Err(RoutingError::Config(
            "curvature estimate needs equal input and output tangent dims".into(),
        ));
    }
    let (nc, np, kk) = (shape.children, shape.parents, params.perspectives);
    let out = &shape.output;
    let d = out.sig.manifold_dim();
    let geo = |iteration: usize, child: usize, parent: usize| {
        move |source: GeometryError| RoutingError::Geometry {
            iteration,
            child,
            parent,
            source,
        }
    };

    let log_u: Vec<Vec<f64>> = children
        .iter()
        .enumerate()
        .map(|(i, u)| {
            shape
                .input
                .log_o(u)
                .map(|t| t.reduced().to_vec())
                .map_err(geo(0, i, 0))
        })
        .collect::<Result<_>>()?;

    let mut predictions = vec![vec![Vec::with_capacity(kk); np]; nc];
    let mut pred_logs = vec![vec![Vec::with_capacity(kk); np]; nc];
    for (i, u) in children.iter().enumerate() {
        for j in 0..np {
            for k in 0..kk {
                let idx = params.index(i, j, k);
                let p = pcr_predict(u, &params.w_sph[idx], &params.w_euc[idx], out)
                    .map_err(geo(0, i, j))?;
                pred_logs[i][j].push(out.log_o(&p).map_err(geo(0, i, j))?.reduced().to_vec());
                predictions[i][j].push(p);
            }
        }
    }

    let mut b = vec![vec![0.0; np]; nc];
    let mut prev = vec![out.origin(); np];
    let mut prev_logs = vec![vec![0.0; d]; np];
    let mut iterations = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let c: Vec<Vec<f64>> = b.iter().map(|r| softmax(r)).collect();
        let mut gamma = vec![vec![vec![1.0; kk]; np]; nc];
        let mut h = Vec::new();
        if gated {
            let g = params.gates.as_ref().ok_or_else(|| {
                RoutingError::Config("acr layer is missing gate parameters".into())
            })?;
            h = vec![vec![Vec::new(); np]; nc];
            for i in 0..nc {
                for j in 0..np {
                    let (gij, hij) =
                        gate_row(cfg, g, &log_u[i], &prev_logs[j], c[i][j], kk)?;
                    gamma[i][j] = gij;
                    h[i][j] = hij;
                }
            }
        }

        let mut aggregated = Vec::with_capacity(np);
        let mut parents = Vec::with_capacity(np);
        for j in 0..np {
            let cj: Vec<f64> = c.iter().map(|r| r[j]).collect();
            let gj: Vec<Vec<f64>> = gamma.iter().map(|r| r[j].clone()).collect();
            let w = composite_weights(&cj, &gj);
            let logs_j: Vec<Vec<Vec<f64>>> = pred_logs.iter().map(|r| r[j].clone()).collect();
            let acc = weighted_tangent_sum(&logs_j, &w, d);
            let xi = TangentVector::from_reduced(&acc, out.sig, out.beta)
                .map_err(geo(it, 0, j))?;
            let s_j = diffeo_exp_o(&xi);
            let v_j = pcr_activate(&s_j, cfg.activation).map_err(geo(it, 0, j))?;
            aggregated.push(s_j);
            parents.push(v_j);
        }

        let logs_v: Vec<Vec<f64>> = parents
            .iter()
            .enumerate()
            .map(|(j, v)| {
                out.log_o(v)
                    .map(|t| t.reduced().to_vec())
                    .map_err(geo(it, 0, j))
            })
            .collect::<Result<_>>()?;
        for i in 0..nc {
            for j in 0..np {
                let mut inc = 0.0;
                for k in 0..kk {
                    inc += gamma[i][j][k] * dot(&logs_v[j], &pred_logs[i][j][k]);
                }
                b[i][j] += inc;
            }
        }

        iterations.push(IterationState {
            c,
            gamma,
            h,
            prev_parents: std::mem::replace(&mut prev, parents.clone()),
            aggregated,
            parents,
            b: b.clone(),
        });
        prev_logs = logs_v;
    }
    Ok(RoutingTrace {
        predictions,
        iterations,
    })
}

/// Gates of one (child, parent) pair for all perspectives, plus the
/// routing context used.
fn gate_row(
    cfg: &RoutingConfig,
    g: &super::GateParams<Array2<f64>>,
    log_u: &[f64],
    log_v: &[f64],
    c_ij: f64,
    kk: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if cfg.gate == GateForm::Simplified {
        let (gu, gv) = g
            .gate_u
            .as_ref()
            .zip(g.gate_v.as_ref())
            .ok_or_else(|| RoutingError::Config("simplified gate weights missing".into()))?;
        let zu = mv(gu, log_u);
        let zv = mv(gv, log_v);
        let gamma = zu.iter().zip(&zv).map(|(a, b)| sigmoid(a + b)).collect();
        return Ok((gamma, Vec::new()));
    }
    let terms = cfg.gate_terms;
    let kappa = tangent_cosine(log_u, log_v);
    let hu = mv(&g.ctx_u, log_u);
    let hv = mv(&g.ctx_v, log_v);
    let h: Vec<f64> = hu.iter().zip(&hv).map(|(a, b)| a + b).collect();
    let da = g.w_align.ncols();
    let au = mv(&g.align_u, log_u);
    let av = mv(&g.align_v, log_v);
    let alphas = [g.alpha[[0, 0]], g.alpha[[0, 1]], g.alpha[[0, 2]]];
    let mut gamma = Vec::with_capacity(kk);
    for k in 0..kk {
        let c_term = if terms.curvature {
            curvature_compat(kappa, g.beta_k[[0, k]])
        } else {
            0.0
        };
        let a_term = if terms.alignment {
            let w_k: ArrayView1<f64> = g.w_align.row(k);
            (0..da)
                .map(|m| (au[k * da + m] + av[k * da + m]).tanh() * w_k[m])
                .sum()
        } else {
            0.0
        };
        let r_term = if terms.consistency {
            routing_consistency(c_ij, k, &g.w_c, &h)
        } else {
            0.0
        };
        gamma.push(gating_weights(c_term, a_term, r_term, alphas));
    }
    Ok((gamma, h))
}

/// Full `[d_align, d_in + d_out]` alignment matrix of perspective `k`.
pub fn alignment_matrix(g: &super::GateParams<Array2<f64>>, k: usize) -> Array2<f64> {
    let da = g.w_align.ncols();
    let u = g.align_u.slice(s![k * da..(k + 1) * da, ..]);
    let v = g.align_v.slice(s![k * da..(k + 1) * da, ..]);
    ndarray::concatenate(ndarray::Axis(1), &[u, v]).expect("equal row counts")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{on_manifold, Curvature};
    use crate::routing::GateTerms;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn manifold() -> Manifold {
        Manifold::new(2, 2, -1.0).unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng, m: &Manifold, scale: f64) -> PseudoPoint {
        let red: Vec<f64> = (0..m.sig.manifold_dim())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        diffeo_exp_o(&TangentVector::from_reduced(&red, m.sig, m.beta).unwrap())
    }

    fn shape(nc: usize, np: usize) -> LayerShape {
        LayerShape {
            children: nc,
            parents: np,
            input: manifold(),
            output: manifold(),
        }
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash(&[0.0, 0.0]), vec![0.0, 0.0]);
        let v = squash(&[1.0, 0.0]);
        assert!((v[0] - 0.5).abs() < 1e-11 && v[1] == 0.0);
        let big = squash(&[30.0, -40.0]);
        assert!(norm(&big) < 1.0);
    }

    #[test]
    fn euclid_single_route_is_squash() {
        let params = EuclidParams {
            w: vec![Array2::eye(3)],
            parents: 1,
            per_pair: false,
        };
        let u = vec![0.3, -1.0, 2.0];
        let tr = euclid_route(&[u.clone()], &params, 1).unwrap();
        assert_eq!(tr.parents[0], squash(&u));
        assert_eq!(tr.couplings[0][0], vec![1.0]);
    }

    #[test]
    fn euclid_first_iteration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EuclidParams::init(4, 3, 2, 2, false, &mut rng);
        let children: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.random(), rng.random()]).collect();
        let tr = euclid_route(&children, &params, 3).unwrap();
        for row in &tr.couplings[0] {
            for &c in row {
                assert!((c - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn euclid_agreement_favours_matching_parent() {
        // parent 0 sees all four children pointing one way; parent 1 sees
        // them scattered
        let children = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ];
        let to_cluster = |u: &Vec<f64>| -> Array2<f64> {
            // maps each child onto (1, 1)
            let mut w = Array2::zeros((2, 2));
            let (a, b) = (u[0], u[1]);
            w[[0, 0]] = a;
            w[[0, 1]] = b;
            w[[1, 0]] = a;
            w[[1, 1]] = b;
            w
        };
        let mut w = Vec::new();
        for u in &children {
            w.push(to_cluster(u));
            w.push(Array2::eye(2));
        }
        let params = EuclidParams {
            w,
            parents: 2,
            per_pair: true,
        };
        let tr = euclid_route(&children, &params, 3).unwrap();
        assert!(norm(&tr.parents[0]) > norm(&tr.parents[1]));
    }

    #[test]
    fn pcr_predict_examples() {
        let m = manifold();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w_sph = crate::params::normal(&mut rng, 2, 2, 1.0);
        let w_euc = crate::params::normal(&mut rng, 2, 2, 1.0);
        let o = pcr_predict(&m.origin(), &w_sph, &w_euc, &m).unwrap();
        assert_eq!(o, m.origin());

        let u = random_point(&mut rng, &m, 0.8);
        let same = pcr_predict(&u, &Array2::eye(2), &Array2::eye(2), &m).unwrap();
        for (a, b) in same.ambient().iter().zip(u.ambient()) {
            assert!((a - b).abs() < 1e-6);
        }

        for _ in 0..1000 {
            let u = random_point(&mut rng, &m, 1.5);
            let ws = crate::params::normal(&mut rng, 2, 2, 1.0);
            let we = crate::params::normal(&mut rng, 2, 2, 1.0);
            let p = pcr_predict(&u, &ws, &we, &m).unwrap();
            assert!(on_manifold(&p, 1e-6));
        }
    }

    #[test]
    fn pcr_aggregate_examples() {
        let m = manifold();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_point(&mut rng, &m, 1.0);
        let single = pcr_aggregate(&[p.clone()], &[1.0], &m).unwrap();
        for (a, b) in single.ambient().iter().zip(p.ambient()) {
            assert!((a - b).abs() < 1e-6);
        }
        let o = pcr_aggregate(&[m.origin(), m.origin()], &[0.3, 0.7], &m).unwrap();
        assert_eq!(o, m.origin());

        // midpoint against a hand-composed evaluation
        let q = random_point(&mut rng, &m, 1.0);
        let mid = pcr_aggregate(&[p.clone(), q.clone()], &[0.5, 0.5], &m).unwrap();
        let lp = diffeo_log_o(&p).unwrap();
        let lq = diffeo_log_o(&q).unwrap();
        let xi: Vec<f64> = lp
            .coords()
            .iter()
            .zip(lq.coords())
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        let n = norm(&xi[..3]);
        let sphere = [n.cos(), n.sin() * xi[1] / n, n.sin() * xi[2] / n];
        let lift = (1.0 + xi[3] * xi[3] + xi[4] * xi[4]).sqrt();
        let want = [
            lift * sphere[0],
            lift * sphere[1],
            lift * sphere[2],
            xi[3],
            xi[4],
        ];
        for (a, b) in mid.ambient().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pcr_activate_examples() {
        let m = manifold();
        assert_eq!(pcr_activate(&m.origin(), Activation::Tanh).unwrap(), m.origin());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_point(&mut rng, &m, 1.0);
        let same = pcr_activate(&s, Activation::Identity).unwrap();
        for (a, b) in same.ambient().iter().zip(s.ambient()) {
            assert!((a - b).abs() < 1e-6);
        }
        for _ in 0..1000 {
            let s = random_point(&mut rng, &m, 3.0);
            assert!(on_manifold(&pcr_activate(&s, Activation::Tanh).unwrap(), 1e-6));
        }
    }

    #[test]
    fn logit_update_examples() {
        let m = manifold();
        let mut b = vec![vec![0.0]];
        let c = update_logits_pcr(&mut b, &[m.origin()], &[vec![m.origin()]]).unwrap();
        assert_eq!(b[0][0], 0.0);
        assert_eq!(c[0][0], 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_point(&mut rng, &m, 1.0);
        let q = random_point(&mut rng, &m, 1.0);
        let mut b = vec![vec![0.0, 0.0]];
        let c = update_logits_pcr(&mut b, &[p.clone(), q], &[vec![p.clone(), p.clone()]]).unwrap();
        let w = diffeo_log_o(&p).unwrap();
        assert!((b[0][0] - w.inner(&w)).abs() < 1e-12 && b[0][0] > 0.0);
        assert!((c[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn curvature_estimate_examples() {
        let m = manifold();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random_point(&mut rng, &m, 1.0);
        assert!((local_curvature_estimate(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let make = |red: [f64; 4]| diffeo_exp_o(&TangentVector::from_reduced(&red, m.sig, m.beta).unwrap());
        let a = make([0.5, 0.0, 0.0, 0.0]);
        let b = make([0.0, 0.0, 0.7, 0.0]);
        let c = make([-1.0, 0.0, 0.0, 0.0]);
        assert!(local_curvature_estimate(&a, &b).unwrap().abs() < 1e-12);
        assert!((local_curvature_estimate(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(local_curvature_estimate(&m.origin(), &m.origin()).unwrap(), 0.0);
    }

    #[test]
    fn scalar_gate_term_examples() {
        assert_eq!(curvature_compat(0.3, 0.3), 0.0);
        assert_eq!(curvature_compat(1.0, -1.0), -2.0);
        assert!((curvature_compat(0.2, 0.7) - curvature_compat(1.2, 0.7)).abs() < 1e-15);

        let w_c = array![[1.0, 0.0, 0.0], [0.5, 0.5, 0.5]];
        assert_eq!(routing_consistency(1.0, 1, &w_c, &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(routing_consistency(0.3, 1, &w_c, &[0.0, 0.0, 0.0]), 0.0);
        let r = routing_consistency((-1f64).exp(), 0, &w_c, &[2.0, 0.0, 0.0]);
        assert!((r + 2.0).abs() < 1e-15);
        assert!(routing_consistency(0.0, 0, &w_c, &[1.0, 0.0, 0.0]).is_finite());

        assert_eq!(gating_weights(-3.0, 2.0, 5.0, [0.0; 3]), 0.5);
        assert_eq!(gating_weights(0.0, 0.0, 0.0, [1.0, 0.0, 0.0]), 0.5);
        let lo = gating_weights(-1.0, 0.2, 0.1, [1.0, 1.0, 1.0]);
        let hi = gating_weights(-0.5, 0.2, 0.1, [1.0, 1.0, 1.0]);
        assert!(hi > lo);
    }

    #[test]
    fn feature_alignment_examples() {
        let m = manifold();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = random_point(&mut rng, &m, 1.0);
        let v = random_point(&mut rng, &m, 1.0);
        let wa = crate::params::normal(&mut rng, 3, 8, 1.0);
        assert_eq!(feature_alignment(&u, &v, &[0.0; 3], &wa).unwrap(), 0.0);
        assert_eq!(
            feature_alignment(&u, &v, &[1.0, 2.0, 3.0], &Array2::zeros((3, 8))).unwrap(),
            0.0
        );
        for _ in 0..100 {
            let wk: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let wa = crate::params::normal(&mut rng, 3, 8, 3.0);
            let a = feature_alignment(&u, &v, &wk, &wa).unwrap();
            assert!(a.abs() <= wk.iter().map(|x| x.abs()).sum::<f64>());
        }
    }

    #[test]
    fn acr_aggregate_reduces_to_pcr() {
        let m = manifold();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let preds: Vec<PseudoPoint> = (0..4).map(|_| random_point(&mut rng, &m, 1.0)).collect();
        let c = softmax(&[0.1, -0.4, 1.0, 0.3]);
        let pcr = pcr_aggregate(&preds, &c, &m).unwrap();
        let nested: Vec<Vec<PseudoPoint>> = preds.iter().map(|p| vec![p.clone()]).collect();
        let acr = acr_aggregate(&nested, &c, &vec![vec![1.0]; 4], &m).unwrap();
        for (a, b) in acr.ambient().iter().zip(pcr.ambient()) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = random_point(&mut rng, &m, 1.0);
        let same = acr_aggregate(&vec![vec![p.clone(); 2]; 3], &[0.2, 0.3, 0.5], &vec![vec![0.3, 0.9]; 3], &m).unwrap();
        for (a, b) in same.ambient().iter().zip(p.ambient()) {
            assert!((a - b).abs() < 1e-6);
        }
        let w = composite_weights(&[0.2, 0.8], &[vec![0.1, 0.4], vec![0.9, 0.3]]);
        let total: f64 = w.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-9);
        let w = composite_weights(&[0.0, 0.0], &[vec![0.5], vec![0.5]]);
        assert_eq!(w, vec![vec![0.5], vec![0.5]]);
    }

    #[test]
    fn degenerate_pipeline_is_identity() {
        let m = manifold();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = random_point(&mut rng, &m, 1.0);
        let cfg = RoutingConfig {
            mode: RoutingMode::Acr,
            perspectives: 1,
            iterations: 1,
            unit_gates: true,
            activation: Activation::Identity,
            ..Default::default()
        };
        let params = PerspectiveParams::identity(&shape(1, 1), &cfg);
        let tr = prr_routing(&[u.clone()], &params, &shape(1, 1), &cfg).unwrap();
        for (a, b) in tr.parents()[0].ambient().iter().zip(u.ambient()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn routing_invariants_hold() {
        let m = manifold();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let children: Vec<PseudoPoint> = (0..5).map(|_| random_point(&mut rng, &m, 1.2)).collect();
        let cfg = RoutingConfig {
            perspectives: 3,
            ..Default::default()
        };
        let params = PerspectiveParams::init(&shape(5, 3), &cfg, &mut rng);
        let tr = prr_routing(&children, &params, &shape(5, 3), &cfg).unwrap();
        assert_eq!(tr.iterations.len(), 3);
        for row in &tr.iterations[0].c {
            for &c in row {
                assert!((c - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        for st in &tr.iterations {
            for row in &st.c {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for g in st.gamma.iter().flatten().flatten() {
                assert!(*g > 0.0 && *g < 1.0);
            }
            for p in st.parents.iter().chain(&st.aggregated).chain(&st.prev_parents) {
                assert!(on_manifold(p, 1e-6));
            }
        }
        let again = prr_routing(&children, &params, &shape(5, 3), &cfg).unwrap();
        assert_eq!(tr, again);
    }

    #[test]
    fn gate_terms_can_be_disabled() {
        let m = manifold();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let children: Vec<PseudoPoint> = (0..3).map(|_| random_point(&mut rng, &m, 1.0)).collect();
        let cfg = RoutingConfig {
            gate_terms: GateTerms {
                curvature: false,
                alignment: false,
                consistency: false,
            },
            ..Default::default()
        };
        let params = PerspectiveParams::init(&shape(3, 2), &cfg, &mut rng);
        let tr = prr_routing(&children, &params, &shape(3, 2), &cfg).unwrap();
        for g in tr.iterations[1].gamma.iter().flatten().flatten() {
            assert_eq!(*g, 0.5);
        }
    }

    #[test]
    fn rejects_wrong_child_count_and_mode() {
        let m = manifold();
        let cfg = RoutingConfig::default();
        let params = PerspectiveParams::identity(&shape(2, 1), &cfg);
        assert!(matches!(
            prr_routing(&[m.origin()], &params, &shape(2, 1), &cfg),
            Err(RoutingError::Shape(_))
        ));
        let euc = RoutingConfig {
            mode: RoutingMode::Euclidean,
            ..Default::default()
        };
        assert!(matches!(
            prr_routing(&[m.origin(), m.origin()], &params, &shape(2, 1), &euc),
            Err(RoutingError::Config(_))
        ));
    }

    #[test]
    fn prediction_failure_carries_indices() {
        // a child sitting at the antipode of the pole has no sphere log
        let m = manifold();
        let beta = Curvature::new(-1.0).unwrap();
        let anti = PseudoPoint::new(vec![-1.0, 0.0, 0.0], vec![0.0, 0.0], beta).unwrap();
        let cfg = RoutingConfig::default();
        let params = PerspectiveParams::identity(&shape(2, 1), &cfg);
        let err = prr_routing(&[m.origin(), anti], &params, &shape(2, 1), &cfg).unwrap_err();
        assert!(matches!(err, RoutingError::Geometry { child: 1, .. }), "{err}");
    }
}
