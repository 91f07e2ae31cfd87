//! Numeric tolerances shared by every geometric routine.

use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Tolerances and guard constants used across the crate.
///
/// One record governs the whole process. Install a custom policy with
/// [`NumericPolicy::install`] before the first geometric call; afterwards the
/// record is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericPolicy {
    /// Relative tolerance for pseudo-hyperboloid membership.
    pub manifold_tol: f64,
    /// Absolute tolerance for sphere-radius checks.
    pub sphere_tol: f64,
    /// Tolerance used when asserting projection idempotence.
    pub idempotence_tol: f64,
    /// Guard added to denominators that may vanish.
    pub guard_eps: f64,
    /// Sphere log rejects `<b,p>/r^2 < -1 + cut_locus_margin`.
    pub cut_locus_margin: f64,
}

impl Default for NumericPolicy {
    fn default() -> Self {
        Self {
            manifold_tol: 1e-6,
            sphere_tol: 1e-9,
            idempotence_tol: 1e-12,
            guard_eps: 1e-12,
            cut_locus_margin: 1e-9,
        }
    }
}

static GLOBAL: OnceLock<NumericPolicy> = OnceLock::new();

impl NumericPolicy {
    /// The active policy (the default unless one was installed).
    pub fn global() -> &'static NumericPolicy {
        GLOBAL.get_or_init(NumericPolicy::default)
    }

    /// Installs `policy` process-wide. Returns `false` if a policy was
    /// already active.
    pub fn install(policy: NumericPolicy) -> bool {
        GLOBAL.set(policy).is_ok()
    }
}
