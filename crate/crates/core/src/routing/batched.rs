//! Differentiable routing over a batch of examples.
//!
//! Capsules of one layer are stacked child-major: row `i * batch + b` holds
//! child `i` of example `b`. Parent outputs are stacked the same way, so one
//! layer's output is the next layer's input.

use super::{EuclidParams, GateForm, LayerShape, PerspectiveParams, RoutingConfig};
use crate::autodiff::{Tape, Var};
use crate::geometry::tape::{exp_o, log_o, project, sphere_wrap};
use crate::policy::NumericPolicy;
use std::rc::Rc;

/// Row bookkeeping for a child-major stack.
#[derive(Debug, Clone)]
pub struct Stacking {
    pub batch: usize,
    pub children: usize,
    /// `row -> example` map, used both to gather per-example rows and to
    /// reduce over children.
    pub example_of_row: Rc<Vec<usize>>,
}

impl Stacking {
    pub fn new(batch: usize, children: usize) -> Self {
        let rows = batch * children;
        Self {
            batch,
            children,
            example_of_row: Rc::new((0..rows).map(|r| r % batch).collect()),
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.children
    }

    /// Repeats per-example rows `[batch, d]` once per child.
    pub fn broadcast(&self, tape: &mut Tape, x: Var) -> Var {
        tape.gather_rows(x, self.example_of_row.clone())
    }

    /// Sums child rows back to `[batch, d]`.
    pub fn reduce(&self, tape: &mut Tape, x: Var) -> Var {
        tape.segment_sum(x, self.example_of_row.clone(), self.batch)
    }

    /// Rows of child `i`.
    pub fn child(&self, tape: &mut Tape, x: Var, i: usize) -> Var {
        tape.slice_rows(x, i * self.batch, (i + 1) * self.batch)
    }
}

/// Output of one batched routing layer.
#[derive(Debug, Clone)]
pub struct Routed {
    /// Parent states stacked parent-major, `[parents * batch, dim]`.
    pub parents: Var,
    /// Coupling matrices `[children * batch, parents]`, one per iteration.
    pub couplings: Vec<Var>,
    /// Gates per iteration and parent, `[children * batch, K]`; empty when
    /// gates are fixed at one.
    pub gates: Vec<Vec<Var>>,
}

fn per_child_linear(
    tape: &mut Tape,
    x: Var,
    st: &Stacking,
    weights: impl Fn(usize) -> Var,
    per_pair: bool,
) -> Var {
    if !per_pair {
        return tape.linear(x, weights(0));
    }
    let parts: Vec<Var> = (0..st.children)
        .map(|i| {
            let xi = st.child(tape, x, i);
            tape.linear(xi, weights(i))
        })
        .collect();
    tape.concat_rows(&parts)
}

/// Pseudo-Riemannian routing (PCR or ACR) of child-major stacked points
/// `children: [N_c * batch, amb_in]`.
pub fn prr_forward(
    tape: &mut Tape,
    children: Var,
    batch: usize,
    params: &PerspectiveParams<Var>,
    shape: &LayerShape,
    cfg: &RoutingConfig,
) -> Routed {
    let st = Stacking::new(batch, shape.children);
    let (np, kk) = (shape.parents, params.perspectives);
    let (inp, out) = (&shape.input, &shape.output);
    let t_in = inp.sig.t();
    let d_in = inp.sig.manifold_dim();
    let d_out = out.sig.manifold_dim();
    let eps = NumericPolicy::global().guard_eps;

    let xi_u = log_o(tape, children, inp);
    let u_sph = tape.slice(xi_u, 0, t_in);
    let u_euc = tape.slice(xi_u, t_in, d_in);

    let mut preds: Vec<Vec<Var>> = Vec::with_capacity(np);
    for j in 0..np {
        let mut row = Vec::with_capacity(kk);
        for k in 0..kk {
            let ys = per_child_linear(tape, u_sph, &st, |i| params.w_sph[params.index(i, j, k)], params.per_pair);
            let ye = per_child_linear(tape, u_euc, &st, |i| params.w_euc[params.index(i, j, k)], params.per_pair);
            let ys = sphere_wrap(tape, ys, out);
            row.push(tape.concat(&[ys, ye]));
        }
        preds.push(row);
    }

    let gated = cfg.gated();
    let gates = if gated { params.gates.as_ref() } else { None };
    let three_term = gates.is_some() && cfg.gate == GateForm::ThreeTerm;
    // child-side halves of the gate inputs do not change across iterations
    let (a_u, h_u, n_u, g_u) = match gates {
        Some(g) if three_term => (
            Some(tape.linear(xi_u, g.align_u)),
            Some(tape.linear(xi_u, g.ctx_u)),
            Some(tape.row_norm(xi_u)),
            None,
        ),
        Some(g) => (None, None, None, g.gate_u.map(|gu| tape.linear(xi_u, gu))),
        None => (None, None, None, None),
    };
    let alphas = gates.map(|g| {
        (
            tape.slice(g.alpha, 0, 1),
            tape.slice(g.alpha, 1, 2),
            tape.slice(g.alpha, 2, 3),
        )
    });

    let mut b = tape.zeros(st.rows(), np);
    let mut prev_logs: Vec<Var> = (0..np).map(|_| tape.zeros(batch, d_out)).collect();
    let mut couplings = Vec::with_capacity(cfg.iterations);
    let mut all_gates = Vec::new();
    let mut parents = Vec::with_capacity(np);
    for it in 0..cfg.iterations {
        let c = tape.softmax_rows(b);
        couplings.push(c);
        let mut iter_gates = Vec::new();
        let mut logs_v = Vec::with_capacity(np);
        parents.clear();
        for j in 0..np {
            let c_j = tape.slice(c, j, j + 1);
            let gamma = gates.map(|g| {
                if three_term {
                    let v_b = st.broadcast(tape, prev_logs[j]);
                    let mut z: Option<Var> = None;
                    let mut push = |tape: &mut Tape, term: Var, alpha: Var| {
                        let t = tape.mul(term, alpha);
                        z = Some(match z {
                            Some(acc) => tape.add(acc, t),
                            None => t,
                        });
                    };
                    let (al_c, al_a, al_r) = alphas.unwrap();
                    if cfg.gate_terms.curvature {
                        let num = tape.row_dot(xi_u, v_b);
                        let nv = tape.row_norm(v_b);
                        let den = tape.mul(n_u.unwrap(), nv);
                        let den = tape.clamp_min(den, eps);
                        let kappa = tape.div(num, den);
                        let diff = tape.sub(kappa, g.beta_k);
                        let sq = tape.square(diff);
                        let term = tape.scale(sq, -0.5);
                        push(tape, term, al_c);
                    }
                    if cfg.gate_terms.alignment {
                        let av = tape.linear(prev_logs[j], g.align_v);
                        let av = st.broadcast(tape, av);
                        let pre = tape.add(a_u.unwrap(), av);
                        let act = tape.tanh(pre);
                        let term = tape.group_dot(act, g.w_align);
                        push(tape, term, al_a);
                    }
                    if cfg.gate_terms.consistency {
                        let hv = tape.linear(prev_logs[j], g.ctx_v);
                        let hv = st.broadcast(tape, hv);
                        let h = tape.add(h_u.unwrap(), hv);
                        let wch = tape.linear(h, g.w_c);
                        let cl = tape.clamp_min(c_j, eps);
                        let lc = tape.ln(cl);
                        let term = tape.mul(lc, wch);
                        push(tape, term, al_r);
                    }
                    let z = z.unwrap_or_else(|| tape.zeros(st.rows(), kk));
                    tape.sigmoid(z)
                } else {
                    let gv = tape.linear(prev_logs[j], g.gate_v.expect("simplified gate weights"));
                    let gv = st.broadcast(tape, gv);
                    let z = tape.add(g_u.expect("simplified gate weights"), gv);
                    tape.sigmoid(z)
                }
            });

            let (numer, weight) = match gamma {
                Some(gm) => {
                    iter_gates.push(gm);
                    let w = tape.mul(c_j, gm);
                    let terms: Vec<(Var, usize, Var)> =
                        (0..kk).map(|k| (w, k, preds[j][k])).collect();
                    let num = tape.weighted_sum(&terms);
                    let ws = tape.row_sum(w);
                    (num, ws)
                }
                None => {
                    let terms: Vec<(Var, usize, Var)> =
                        (0..kk).map(|k| (c, j, preds[j][k])).collect();
                    let num = tape.weighted_sum(&terms);
                    let ws = if kk == 1 { c_j } else { tape.scale(c_j, kk as f64) };
                    (num, ws)
                }
            };
            let num = st.reduce(tape, numer);
            let den = st.reduce(tape, weight);
            let agg = tape.div(num, den);
            let s_j = exp_o(tape, agg, out);
            let xi_s = log_o(tape, s_j, out);
            let act = match cfg.activation {
                super::Activation::Tanh => tape.tanh(xi_s),
                super::Activation::Identity => xi_s,
            };
            let e = exp_o(tape, act, out);
            let v_j = project(tape, e, out);
            logs_v.push(log_o(tape, v_j, out));
            parents.push(v_j);
        }

        if it + 1 < cfg.iterations {
            let mut cols = Vec::with_capacity(np);
            for j in 0..np {
                let v_b = st.broadcast(tape, logs_v[j]);
                let dots: Vec<Var> = (0..kk).map(|k| tape.row_dot(v_b, preds[j][k])).collect();
                let col = match iter_gates.get(j) {
                    Some(&gm) => {
                        let terms: Vec<(Var, usize, Var)> =
                            dots.iter().enumerate().map(|(k, &d)| (gm, k, d)).collect();
                        tape.weighted_sum(&terms)
                    }
                    None => dots
                        .into_iter()
                        .reduce(|a, d| tape.add(a, d))
                        .expect("at least one perspective"),
                };
                cols.push(col);
            }
            let inc = tape.concat(&cols);
            b = tape.add(b, inc);
        }
        if gated {
            all_gates.push(iter_gates);
        }
        prev_logs = logs_v;
    }
    Routed {
        parents: tape.concat_rows(&parents),
        couplings,
        gates: all_gates,
    }
}

/// Batched capsule squashing.
pub fn squash(tape: &mut Tape, s: Var) -> Var {
    let eps = NumericPolicy::global().guard_eps;
    let n2 = tape.row_dot(s, s);
    let n = tape.row_norm(s);
    let d1 = tape.offset(n2, 1.0);
    let k = tape.div(n2, d1);
    let d2 = tape.offset(n, eps);
    let k = tape.div(k, d2);
    tape.mul(s, k)
}

/// Euclidean dynamic routing of child-major stacked vectors.
pub fn euclid_forward(
    tape: &mut Tape,
    children: Var,
    batch: usize,
    child_count: usize,
    params: &EuclidParams<Var>,
    iterations: usize,
) -> Routed {
    let st = Stacking::new(batch, child_count);
    let np = params.parents;
    let preds: Vec<Var> = (0..np)
        .map(|j| per_child_linear(tape, children, &st, |i| params.w[params.index(i, j)], params.per_pair))
        .collect();
    let mut b = tape.zeros(st.rows(), np);
    let mut couplings = Vec::with_capacity(iterations);
    let mut parents = Vec::with_capacity(np);
    for it in 0..iterations {
        let c = tape.softmax_rows(b);
        couplings.push(c);
        parents.clear();
        for (j, &p) in preds.iter().enumerate() {
            let w = tape.weighted_sum(&[(c, j, p)]);
            let s = st.reduce(tape, w);
            parents.push(squash(tape, s));
        }
        if it + 1 < iterations {
            let cols: Vec<Var> = parents
                .iter()
                .zip(&preds)
                .map(|(&v, &p)| {
                    let vb = st.broadcast(tape, v);
                    tape.row_dot(vb, p)
                })
                .collect();
            let inc = tape.concat(&cols);
            b = tape.add(b, inc);
        }
    }
    Routed {
        parents: tape.concat_rows(&parents),
        couplings,
        gates: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tape::{points_to_rows, rows_to_points};
    use crate::geometry::{diffeo_exp_o, Manifold, PseudoPoint, TangentVector};
    use crate::gradcheck::{check_tape_gradients, GradCheckConfig};
    use crate::params::ParamTree;
    use crate::routing::plain::{euclid_route, prr_routing};
    use crate::routing::{GateTerms, RoutingMode};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut ChaCha8Rng, m: &Manifold) -> PseudoPoint {
        let red: Vec<f64> = (0..m.sig.manifold_dim())
            .map(|_| rng.random_range(-1.2..1.2))
            .collect();
        diffeo_exp_o(&TangentVector::from_reduced(&red, m.sig, m.beta).unwrap())
    }

    /// `examples[b][i]` stacked child-major.
    fn stack(examples: &[Vec<PseudoPoint>]) -> Array2<f64> {
        let nc = examples[0].len();
        let mut pts = Vec::new();
        for i in 0..nc {
            for ex in examples {
                pts.push(ex[i].clone());
            }
        }
        points_to_rows(&pts)
    }

    fn compare(cfg: RoutingConfig, seed: u64) {
        let m = Manifold::new(3, 2, -1.0).unwrap();
        let shape = LayerShape {
            children: 4,
            parents: 3,
            input: m,
            output: m,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PerspectiveParams::init(&shape, &cfg, &mut rng);
        let batch = 5;
        let examples: Vec<Vec<PseudoPoint>> = (0..batch)
            .map(|_| (0..4).map(|_| random_point(&mut rng, &m)).collect())
            .collect();

        let mut tape = Tape::new();
        let vars = params.map(&mut |a| tape.constant(a.clone()));
        let x = tape.constant(stack(&examples));
        let routed = prr_forward(&mut tape, x, batch, &vars, &shape, &cfg);
        let got = rows_to_points(tape.value(routed.parents), &m).unwrap();

        for (b, ex) in examples.iter().enumerate() {
            let tr = prr_routing(ex, &params, &shape, &cfg).unwrap();
            for (j, want) in tr.parents().iter().enumerate() {
                let have = &got[j * batch + b];
                for (a, w) in have.ambient().iter().zip(want.ambient()) {
                    assert!((a - w).abs() < 1e-9, "mode {:?} ex {b} parent {j}: {a} vs {w}", cfg.mode);
                }
            }
            let c_last = tape.value(*routed.couplings.last().unwrap());
            for (i, row) in tr.iterations.last().unwrap().c.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    assert!((c_last[[i * batch + b, j]] - c).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn batched_matches_reference_for_every_mode() {
        compare(RoutingConfig::default(), 1);
        compare(
            RoutingConfig {
                mode: RoutingMode::Pcr,
                ..Default::default()
            },
            2,
        );
        compare(
            RoutingConfig {
                gate: GateForm::Simplified,
                ..Default::default()
            },
            3,
        );
        compare(
            RoutingConfig {
                per_pair_weights: true,
                perspectives: 2,
                ..Default::default()
            },
            4,
        );
        compare(
            RoutingConfig {
                unit_gates: true,
                perspectives: 3,
                ..Default::default()
            },
            5,
        );
        compare(
            RoutingConfig {
                gate_terms: GateTerms {
                    curvature: true,
                    alignment: false,
                    consistency: true,
                },
                ..Default::default()
            },
            6,
        );
    }

    #[test]
    fn euclid_batched_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (nc, batch, d) = (3, 4, 5);
        for per_pair in [false, true] {
            let params = EuclidParams::init(nc, 2, d, 4, per_pair, &mut rng);
            let examples: Vec<Vec<Vec<f64>>> = (0..batch)
                .map(|_| {
                    (0..nc)
                        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                        .collect()
                })
                .collect();
            let mut rows = Array2::zeros((nc * batch, d));
            for i in 0..nc {
                for b in 0..batch {
                    for (c, v) in examples[b][i].iter().enumerate() {
                        rows[[i * batch + b, c]] = *v;
                    }
                }
            }
            let mut tape = Tape::new();
            let vars = params.map(&mut |a| tape.constant(a.clone()));
            let x = tape.constant(rows);
            let routed = euclid_forward(&mut tape, x, batch, nc, &vars, 3);
            let got = tape.value(routed.parents).clone();
            for (b, ex) in examples.iter().enumerate() {
                let tr = euclid_route(ex, &params, 3).unwrap();
                for (j, want) in tr.parents.iter().enumerate() {
                    for (c, w) in want.iter().enumerate() {
                        assert!((got[[j * batch + b, c]] - w).abs() < 1e-12);
                    }
                }
            }
        }
    }

    fn gradcheck_layer(cfg: RoutingConfig, seed: u64) {
        let m = Manifold::new(2, 2, -1.0).unwrap();
        let shape = LayerShape {
            children: 3,
            parents: 2,
            input: m,
            output: m,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PerspectiveParams::init(&shape, &cfg, &mut rng);
        let mut leaves: Vec<Array2<f64>> = Vec::new();
        params.visit("", &mut |_, _, a| leaves.push(a.clone()));
        let batch = 2;
        let tangents: Array2<f64> = crate::params::normal(&mut rng, 3 * batch, 4, 0.6);
        leaves.push(tangents);
        let report = check_tape_gradients(
            &leaves,
            |tape, v| {
                let mut it = v.iter().copied();
                let bound = params.map(&mut |_| it.next().unwrap());
                let x = exp_o(tape, v[v.len() - 1], &m);
                let routed = prr_forward(tape, x, batch, &bound, &shape, &cfg);
                let l = log_o(tape, routed.parents, &m);
                let w = tape.constant(crate::params::normal(
                    &mut ChaCha8Rng::seed_from_u64(99),
                    2 * batch,
                    4,
                    1.0,
                ));
                let p = tape.mul(l, w);
                tape.sum_all(p)
            },
            &GradCheckConfig::default(),
        );
        assert!(report.passes(), "{:?}", report);
    }

    #[test]
    fn acr_layer_gradcheck() {
        gradcheck_layer(RoutingConfig::default(), 21);
    }

    #[test]
    fn pcr_layer_gradcheck() {
        gradcheck_layer(
            RoutingConfig {
                mode: RoutingMode::Pcr,
                ..Default::default()
            },
            22,
        );
    }
}
