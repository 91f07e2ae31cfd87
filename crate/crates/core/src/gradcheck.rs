//! Central finite-difference validation of tape gradients.
//!
//! ```
//! use ndarray::array;
//! use prcaps_core::gradcheck::{check_tape_gradients, GradCheckConfig};
//!
//! let report = check_tape_gradients(
//!     &[array![[0.3, -1.2]]],
//!     |tape, v| {
//!         let t = tape.tanh(v[0]);
//!         tape.sum_all(t)
//!     },
//!     &GradCheckConfig::default(),
//! );
//! assert!(report.passes());
//! ```

use crate::autodiff::{Tape, Var};
use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Fraction of checked coordinates that must agree.
    pub min_pass_fraction: f64,
    /// Coordinates with `|analytic|` below this are skipped.
    pub analytic_floor: f64,
    /// Sample at most this many coordinates per input; `None` checks all.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            min_pass_fraction: 0.95,
            analytic_floor: 1e-8,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub input: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub skipped: usize,
    pub worst_rel_error: f64,
    pub mismatches: Vec<Mismatch>,
    /// Set when the backward pass itself failed.
    pub error: Option<String>,
    min_pass_fraction: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    pub fn passes(&self) -> bool {
        self.error.is_none() && self.pass_fraction() >= self.min_pass_fraction
    }

    /// Combines reports from several checks into one tally.
    pub fn merge(mut self, other: GradCheckReport) -> GradCheckReport {
        self.checked += other.checked;
        self.passed += other.passed;
        self.skipped += other.skipped;
        self.worst_rel_error = self.worst_rel_error.max(other.worst_rel_error);
        self.mismatches.extend(other.mismatches);
        self.error = self.error.or(other.error);
        self
    }
}

/// Compares the tape gradient of the scalar built by `build` against
/// central differences, for every input leaf.
pub fn check_tape_gradients<F>(
    inputs: &[Array2<f64>],
    build: F,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Array2<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.scalar(out)
    };

    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        skipped: 0,
        worst_rel_error: 0.0,
        mismatches: Vec::new(),
        error: None,
        min_pass_fraction: cfg.min_pass_fraction,
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = match tape.backward(out) {
        Ok(g) => g,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let shape = inputs[idx].dim();
        let analytic = grads.get_or_zeros(*var, shape);
        let total = shape.0 * shape.1;
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(m) if m < total => sample(&mut rng, total, m).into_vec(),
            _ => (0..total).collect(),
        };
        for flat in coords {
            let (r, c) = (flat / shape.1, flat % shape.1);
            let a = analytic[[r, c]];
            let orig = values[idx][[r, c]];
            values[idx][[r, c]] = orig + cfg.step;
            let fp = eval(&values);
            values[idx][[r, c]] = orig - cfg.step;
            let fm = eval(&values);
            values[idx][[r, c]] = orig;
            let n = (fp - fm) / (2.0 * cfg.step);
            if a.abs() < cfg.analytic_floor {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let rel = (a - n).abs() / a.abs().max(n.abs());
            report.worst_rel_error = report.worst_rel_error.max(rel);
            if rel <= cfg.rel_tol {
                report.passed += 1;
            } else {
                report.mismatches.push(Mismatch {
                    input: idx,
                    row: r,
                    col: c,
                    analytic: a,
                    numeric: n,
                });
            }
        }
    }
    report
}
