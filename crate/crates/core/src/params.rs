//! Parameter containers shared by the plain and taped code paths.
//!
//! Parameter structs are generic over the stored leaf type: `Array2<f64>`
//! for owned values, [`Var`](crate::autodiff::Var) once bound to a tape, or
//! any other per-leaf payload (optimizer moments, gradients).

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Whether a leaf receives decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrices; decayed.
    Matrix,
    /// Biases, gate scalars, curvatures and prototypes; not decayed.
    Other,
}

/// Ordered traversal over named leaves.
pub trait ParamTree<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a T));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Collects `(name, kind, leaf)` in traversal order.
pub fn flatten<'a, T, P: ParamTree<T>>(tree: &'a P) -> Vec<(String, ParamKind, &'a T)> {
    let mut out = Vec::new();
    tree.visit("", &mut |n, k, v| out.push((n, k, v)));
    out
}

/// `N(0, std^2)` entries.
pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let d = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| d.sample(rng))
}

/// Glorot-uniform init for a `[out, in]` matrix.
pub fn glorot<R: Rng>(rng: &mut R, out: usize, inp: usize) -> Array2<f64> {
    let a = (6.0 / (out + inp) as f64).sqrt();
    let d = Uniform::new_inclusive(-a, a).expect("valid range");
    Array2::from_shape_fn((out, inp), |_| d.sample(rng))
}

/// Rows drawn uniformly from the unit sphere.
pub fn unit_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = normal(rng, rows, cols, 1.0);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt().max(f64::MIN_POSITIVE);
        r.mapv_inplace(|x| x / n);
    }
    m
}
