//! Batched, differentiable versions of the pole log/exp maps.
//!
//! Points are rows of an `[n, s + t + 1]` matrix laid out `(time ∥ space)`.
//! Tangent vectors are rows of an `[n, s + t]` matrix holding the free
//! coordinates: the `t` sphere-tangent coordinates (the pole component is
//! identically zero and dropped) followed by the `s` Euclidean ones.

use super::{Manifold, PseudoPoint, Result, TangentVector};
use crate::autodiff::{Tape, Var};
use ndarray::Array2;

/// `log_o` on each row of `x`.
pub fn log_o(tape: &mut Tape, x: Var, m: &Manifold) -> Var {
    let k = m.sig.time_dim();
    let amb = m.sig.ambient_dim();
    let time = tape.slice(x, 0, k);
    let space = tape.slice(x, k, amb);
    let sph = tape.sph_log_pole(time, m.beta.radius());
    tape.concat(&[sph, space])
}

/// `exp_o` on each row of reduced tangent coordinates `xi`.
pub fn exp_o(tape: &mut Tape, xi: Var, m: &Manifold) -> Var {
    let t = m.sig.t();
    let d = m.sig.manifold_dim();
    let r = m.beta.radius();
    let sph_t = tape.slice(xi, 0, t);
    let euc = tape.slice(xi, t, d);
    let sphere = tape.sph_exp_pole(sph_t, r);
    let time = lift_time(tape, sphere, euc, m);
    tape.concat(&[time, euc])
}

/// Rescales each row's time block so that `<x,x>_ps = beta`.
pub fn project(tape: &mut Tape, x: Var, m: &Manifold) -> Var {
    let k = m.sig.time_dim();
    let amb = m.sig.ambient_dim();
    let time = tape.slice(x, 0, k);
    let space = tape.slice(x, k, amb);
    let sn = tape.row_dot(space, space);
    let num = tape.offset(sn, m.beta.value().abs());
    let tn = tape.row_dot(time, time);
    let ratio = tape.div(num, tn);
    let f = tape.sqrt(ratio);
    let scaled = tape.mul(time, f);
    tape.concat(&[scaled, space])
}

/// `log^sph(exp^sph(y))` at the pole for sphere-tangent rows `y`; identity
/// while `|y| < pi * radius`, wrapping beyond.
pub fn sphere_wrap(tape: &mut Tape, y: Var, m: &Manifold) -> Var {
    let r = m.beta.radius();
    let p = tape.sph_exp_pole(y, r);
    tape.sph_log_pole(p, r)
}

fn lift_time(tape: &mut Tape, sphere: Var, euc: Var, m: &Manifold) -> Var {
    let r = m.beta.radius();
    let en = tape.row_dot(euc, euc);
    let num = tape.offset(en, m.beta.value().abs());
    let root = tape.sqrt(num);
    let lift = tape.scale(root, 1.0 / r);
    tape.mul(sphere, lift)
}

/// Stacks points into rows.
pub fn points_to_rows(points: &[PseudoPoint]) -> Array2<f64> {
    let d = points.first().map_or(0, |p| p.signature().ambient_dim());
    let mut out = Array2::zeros((points.len(), d));
    for (mut row, p) in out.rows_mut().into_iter().zip(points) {
        for (dst, src) in row.iter_mut().zip(p.ambient()) {
            *dst = src;
        }
    }
    out
}

/// Splits rows into points, checking membership.
pub fn rows_to_points(rows: &Array2<f64>, m: &Manifold) -> Result<Vec<PseudoPoint>> {
    rows.rows()
        .into_iter()
        .map(|r| PseudoPoint::from_ambient(&r.to_vec(), m.sig, m.beta))
        .collect()
}

/// Stacks the free coordinates of tangent vectors into rows.
pub fn tangents_to_rows(xs: &[TangentVector]) -> Array2<f64> {
    let d = xs.first().map_or(0, |x| x.reduced().len());
    let mut out = Array2::zeros((xs.len(), d));
    for (mut row, x) in out.rows_mut().into_iter().zip(xs) {
        for (dst, src) in row.iter_mut().zip(x.reduced()) {
            *dst = *src;
        }
    }
    out
}
