//! Geometry of the pseudo-hyperboloid `Q_{s,t}^beta`.
//!
//! Points live in the ambient space `R^{s,t+1}` stored as `(time ∥ space)`,
//! with the metric negative on the `t + 1` time-like coordinates and positive
//! on the `s` space-like ones. For `beta < 0` the map `psi` sends a point to
//! the product `S_t(sqrt|beta|) × R^s`, where log/exp maps are well defined
//! away from the antipode of the pole. All tangent spaces used here are taken
//! at the pole `o = (sqrt|beta|, 0, …, 0 ∥ 0)`, expressed in product
//! coordinates.
//!
//! Everything in this module is pure and operates on owned `Vec<f64>` values.
//! The batched, differentiable counterparts live in [`tape`].

pub mod tape;

use crate::policy::NumericPolicy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid signature (s={s}, t={t}): both blocks must be nonempty")]
    InvalidSignature { s: usize, t: usize },
    #[error("invalid curvature {0}: base manifold requires beta < 0")]
    InvalidCurvature(f64),
    #[error("psi undefined: time block has zero norm")]
    PsiUndefined,
    #[error("point is off the manifold (<x,x> - beta = {residual:e})")]
    OffManifold { residual: f64 },
    #[error("sphere component has norm {norm}, expected radius {radius}")]
    OffSphere { norm: f64, radius: f64 },
    #[error("log undefined at cut locus")]
    CutLocus,
    #[error("projection failed: time block vanishes")]
    ProjectionFailed,
    #[error("non-finite coordinates")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Metric signature: `s` space-like and `t + 1` time-like coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    s: usize,
    t: usize,
}

impl Signature {
    pub fn new(s: usize, t: usize) -> Result<Self> {
        if s == 0 || t == 0 {
            return Err(GeometryError::InvalidSignature { s, t });
        }
        Ok(Self { s, t })
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Length of the time block (`t + 1`).
    pub fn time_dim(&self) -> usize {
        self.t + 1
    }

    pub fn ambient_dim(&self) -> usize {
        self.s + self.t + 1
    }

    /// Intrinsic dimension `s + t`; tangent vectors at the pole have this
    /// many free coordinates.
    pub fn manifold_dim(&self) -> usize {
        self.s + self.t
    }
}

/// Curvature parameter of the base manifold. Always strictly negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta < 0.0) || !beta.is_finite() {
            return Err(GeometryError::InvalidCurvature(beta));
        }
        Ok(Self(beta))
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    /// Sphere radius `sqrt|beta|`.
    pub fn radius(&self) -> f64 {
        self.0.abs().sqrt()
    }
}

/// A point of `Q_{s,t}^beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPoint {
    time: Vec<f64>,
    space: Vec<f64>,
    sig: Signature,
    beta: Curvature,
}

impl PseudoPoint {
    /// Builds a point and checks membership at the global manifold tolerance.
    pub fn new(time: Vec<f64>, space: Vec<f64>, beta: Curvature) -> Result<Self> {
        let p = Self::new_unchecked(time, space, beta)?;
        let residual = p.residual();
        if !residual.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if !on_manifold(&p, NumericPolicy::global().manifold_tol) {
            return Err(GeometryError::OffManifold { residual });
        }
        Ok(p)
    }

    /// Builds a point checking only block sizes; membership is not verified.
    pub fn new_unchecked(time: Vec<f64>, space: Vec<f64>, beta: Curvature) -> Result<Self> {
        if time.len() < 2 {
            return Err(GeometryError::InvalidSignature {
                s: space.len(),
                t: time.len().saturating_sub(1),
            });
        }
        let sig = Signature::new(space.len(), time.len() - 1)?;
        Ok(Self {
            time,
            space,
            sig,
            beta,
        })
    }

    /// Splits an ambient `(time ∥ space)` vector.
    pub fn from_ambient(x: &[f64], sig: Signature, beta: Curvature) -> Result<Self> {
        check_len(x, sig.ambient_dim())?;
        let (time, space) = x.split_at(sig.time_dim());
        Self::new(time.to_vec(), space.to_vec(), beta)
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn space(&self) -> &[f64] {
        &self.space
    }

    pub fn signature(&self) -> Signature {
        self.sig
    }

    pub fn beta(&self) -> Curvature {
        self.beta
    }

    pub fn ambient(&self) -> Vec<f64> {
        let mut v = self.time.clone();
        v.extend_from_slice(&self.space);
        v
    }

    /// `<x,x>_ps - beta`.
    pub fn residual(&self) -> f64 {
        self_inner(&self.time, &self.space) - self.beta.value()
    }
}

/// A point of `S_t(sqrt|beta|) × R^s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductPoint {
    sphere: Vec<f64>,
    euclid: Vec<f64>,
}

impl ProductPoint {
    /// Checks that `sphere` has norm `sqrt|beta|` within the sphere tolerance
    /// and renormalizes it exactly.
    pub fn new(sphere: Vec<f64>, euclid: Vec<f64>, beta: Curvature) -> Result<Self> {
        let r = beta.radius();
        let n = norm(&sphere);
        if (n - r).abs() > NumericPolicy::global().sphere_tol * r.max(1.0) {
            return Err(GeometryError::OffSphere { norm: n, radius: r });
        }
        Ok(Self {
            sphere: scaled(&sphere, r / n),
            euclid,
        })
    }

    /// Scales an arbitrary nonzero direction onto the sphere.
    pub fn from_direction(direction: &[f64], euclid: Vec<f64>, beta: Curvature) -> Result<Self> {
        let n = norm(direction);
        if n == 0.0 || !n.is_finite() {
            return Err(GeometryError::PsiUndefined);
        }
        Ok(Self {
            sphere: scaled(direction, beta.radius() / n),
            euclid,
        })
    }

    pub fn sphere(&self) -> &[f64] {
        &self.sphere
    }

    pub fn euclid(&self) -> &[f64] {
        &self.euclid
    }
}

/// Tangent vector at the pole in product coordinates: a sphere block of
/// length `t + 1` (orthogonal to the pole, so its first entry is zero)
/// followed by a Euclidean block of length `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
    sig: Signature,
    beta: Curvature,
}

impl TangentVector {
    pub fn new(coords: Vec<f64>, sig: Signature, beta: Curvature) -> Result<Self> {
        check_len(&coords, sig.ambient_dim())?;
        Ok(Self { coords, sig, beta })
    }

    pub fn zeros(sig: Signature, beta: Curvature) -> Self {
        Self {
            coords: vec![0.0; sig.ambient_dim()],
            sig,
            beta,
        }
    }

    /// Builds a tangent vector from the `s + t` free coordinates, inserting
    /// the zero pole component.
    pub fn from_reduced(reduced: &[f64], sig: Signature, beta: Curvature) -> Result<Self> {
        check_len(reduced, sig.manifold_dim())?;
        let mut coords = Vec::with_capacity(sig.ambient_dim());
        coords.push(0.0);
        coords.extend_from_slice(reduced);
        Ok(Self { coords, sig, beta })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Coordinates without the (zero) pole component.
    pub fn reduced(&self) -> &[f64] {
        &self.coords[1..]
    }

    pub fn sphere_block(&self) -> &[f64] {
        &self.coords[..self.sig.time_dim()]
    }

    pub fn euclid_block(&self) -> &[f64] {
        &self.coords[self.sig.time_dim()..]
    }

    pub fn signature(&self) -> Signature {
        self.sig
    }

    pub fn beta(&self) -> Curvature {
        self.beta
    }

    /// Inner product under the product tangent metric (positive definite).
    pub fn inner(&self, other: &TangentVector) -> f64 {
        dot(&self.coords, &other.coords)
    }

    pub fn scale(&self, alpha: f64) -> TangentVector {
        TangentVector {
            coords: scaled(&self.coords, alpha),
            ..self.clone()
        }
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &TangentVector) -> TangentVector {
        let coords = self
            .coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| a + alpha * b)
            .collect();
        TangentVector {
            coords,
            ..self.clone()
        }
    }

    /// Applies `f` coordinate-wise to the free coordinates.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> TangentVector {
        let mut coords: Vec<f64> = self.coords.iter().map(|&x| f(x)).collect();
        coords[0] = 0.0;
        TangentVector {
            coords,
            ..self.clone()
        }
    }
}

/// The manifold `Q_{s,t}^beta` as a value, bundling signature and curvature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Manifold {
    pub sig: Signature,
    pub beta: Curvature,
}

impl Manifold {
    pub fn new(s: usize, t: usize, beta: f64) -> Result<Self> {
        Ok(Self {
            sig: Signature::new(s, t)?,
            beta: Curvature::new(beta)?,
        })
    }

    pub fn origin(&self) -> PseudoPoint {
        origin(self.sig, self.beta)
    }

    pub fn log_o(&self, y: &PseudoPoint) -> Result<TangentVector> {
        self.check(y)?;
        diffeo_log_o(y)
    }

    pub fn exp_o(&self, xi: &TangentVector) -> PseudoPoint {
        diffeo_exp_o(xi)
    }

    pub fn zero_tangent(&self) -> TangentVector {
        TangentVector::zeros(self.sig, self.beta)
    }

    pub fn check(&self, y: &PseudoPoint) -> Result<()> {
        if y.sig != self.sig {
            return Err(GeometryError::DimensionMismatch {
                expected: self.sig.ambient_dim(),
                got: y.sig.ambient_dim(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Operations

/// Pseudo-Euclidean inner product: `-Σ time + Σ space` for ambient vectors
/// laid out as `(time ∥ space)`.
pub fn ps_inner(x: &[f64], y: &[f64], sig: Signature) -> Result<f64> {
    check_len(x, sig.ambient_dim())?;
    check_len(y, sig.ambient_dim())?;
    let k = sig.time_dim();
    Ok(-dot(&x[..k], &y[..k]) + dot(&x[k..], &y[k..]))
}

/// Membership test `|<x,x> - beta| <= tol * max(1, |beta|)`.
pub fn on_manifold(x: &PseudoPoint, tol: f64) -> bool {
    let beta = x.beta.value();
    x.residual().abs() <= tol * beta.abs().max(1.0)
}

/// The diffeomorphism `Q -> S_t × R^s`.
pub fn psi(x: &PseudoPoint) -> Result<ProductPoint> {
    let n = norm(&x.time);
    if n == 0.0 {
        return Err(GeometryError::PsiUndefined);
    }
    Ok(ProductPoint {
        sphere: scaled(&x.time, x.beta.radius() / n),
        euclid: x.space.clone(),
    })
}

/// Inverse of [`psi`].
pub fn psi_inv(p: &ProductPoint, beta: Curvature) -> Result<PseudoPoint> {
    let r = beta.radius();
    let n = norm(&p.sphere);
    if (n - r).abs() > NumericPolicy::global().sphere_tol * r.max(1.0) {
        return Err(GeometryError::OffSphere { norm: n, radius: r });
    }
    let lift = (beta.value().abs() + dot(&p.euclid, &p.euclid)).sqrt() / r;
    PseudoPoint::new_unchecked(scaled(&p.sphere, lift), p.euclid.clone(), beta)
}

/// Sphere logarithm at `base` on the sphere of the given radius.
///
/// Uses `theta = atan2(|p_perp|, <b_hat,p>)`, which agrees with the
/// arccos form but stays accurate for small angles.
pub fn sph_log(base: &[f64], p: &[f64], radius: f64) -> Result<Vec<f64>> {
    check_len(p, base.len())?;
    let policy = NumericPolicy::global();
    let r2 = radius * radius;
    if dot(base, p) / r2 < -1.0 + policy.cut_locus_margin {
        return Err(GeometryError::CutLocus);
    }
    let b_hat = scaled(base, 1.0 / norm(base));
    let c = dot(&b_hat, p);
    let perp: Vec<f64> = p.iter().zip(&b_hat).map(|(pi, bi)| pi - c * bi).collect();
    let n = norm(&perp);
    if n == 0.0 {
        return Ok(vec![0.0; p.len()]);
    }
    let theta = n.atan2(c);
    Ok(scaled(&perp, radius * theta / n))
}

/// Sphere exponential at `base`; the result is renormalized to `radius`.
pub fn sph_exp(base: &[f64], v: &[f64], radius: f64) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        return base.to_vec();
    }
    let (sin, cos) = (n / radius).sin_cos();
    let out: Vec<f64> = base
        .iter()
        .zip(v)
        .map(|(b, vi)| cos * b + sin * radius * vi / n)
        .collect();
    let m = norm(&out);
    scaled(&out, radius / m)
}

/// Diffeomorphic logarithm at the pole.
pub fn diffeo_log_o(y: &PseudoPoint) -> Result<TangentVector> {
    let beta = y.beta;
    let r = beta.radius();
    let py = psi(y)?;
    let pole = pole_direction(y.sig.time_dim(), r);
    let mut coords = sph_log(&pole, &py.sphere, r)?;
    coords[0] = 0.0;
    coords.extend_from_slice(&py.euclid);
    Ok(TangentVector {
        coords,
        sig: y.sig,
        beta,
    })
}

/// Diffeomorphic exponential at the pole.
pub fn diffeo_exp_o(xi: &TangentVector) -> PseudoPoint {
    let r = xi.beta.radius();
    let pole = pole_direction(xi.sig.time_dim(), r);
    let sphere = sph_exp(&pole, xi.sphere_block(), r);
    let euclid = xi.euclid_block().to_vec();
    let lift = (xi.beta.value().abs() + dot(&euclid, &euclid)).sqrt() / r;
    PseudoPoint {
        time: scaled(&sphere, lift),
        space: euclid,
        sig: xi.sig,
        beta: xi.beta,
    }
}

/// Rescales the time block so that `<x,x>_ps = beta`.
pub fn project_to_q(x: &[f64], sig: Signature, beta: Curvature) -> Result<PseudoPoint> {
    check_len(x, sig.ambient_dim())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let (time, space) = x.split_at(sig.time_dim());
    let tn2 = dot(time, time);
    if tn2.sqrt() <= NumericPolicy::global().guard_eps {
        return Err(GeometryError::ProjectionFailed);
    }
    let factor = ((beta.value().abs() + dot(space, space)) / tn2).sqrt();
    Ok(PseudoPoint {
        time: scaled(time, factor),
        space: space.to_vec(),
        sig,
        beta,
    })
}

/// `sqrt|<v,v>|` under the product tangent metric.
pub fn ps_norm(v: &TangentVector) -> f64 {
    v.inner(v).abs().sqrt()
}

/// The pole `(sqrt|beta|, 0, …, 0 ∥ 0)`.
pub fn origin(sig: Signature, beta: Curvature) -> PseudoPoint {
    PseudoPoint {
        time: pole_direction(sig.time_dim(), beta.radius()),
        space: vec![0.0; sig.s()],
        sig,
        beta,
    }
}

// ---------------------------------------------------------------------------
// helpers

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn scaled(a: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().map(|x| x * alpha).collect()
}

fn self_inner(time: &[f64], space: &[f64]) -> f64 {
    -dot(time, time) + dot(space, space)
}

fn pole_direction(len: usize, radius: f64) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[0] = radius;
    v
}

fn check_len(x: &[f64], expected: usize) -> Result<()> {
    if x.len() != expected {
        return Err(GeometryError::DimensionMismatch {
            expected,
            got: x.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn sig11() -> Signature {
        Signature::new(1, 1).unwrap()
    }

    fn beta1() -> Curvature {
        Curvature::new(-1.0).unwrap()
    }

    fn sample_point() -> PseudoPoint {
        PseudoPoint::new(vec![0.0, 5f64.sqrt()], vec![2.0], beta1()).unwrap()
    }

    #[test]
    fn signature_rejects_empty_blocks() {
        assert!(Signature::new(0, 3).is_err());
        assert!(Signature::new(3, 0).is_err());
        assert_eq!(Signature::new(9, 9).unwrap().ambient_dim(), 19);
    }

    #[test]
    fn curvature_must_be_negative() {
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(0.5).is_err());
        assert!(Curvature::new(f64::NAN).is_err());
    }

    #[test]
    fn ps_inner_examples() {
        let o = origin(sig11(), beta1());
        assert_eq!(ps_inner(&o.ambient(), &o.ambient(), sig11()).unwrap(), -1.0);
        let x = [0.0, 5f64.sqrt(), 2.0];
        assert!((ps_inner(&x, &x, sig11()).unwrap() + 1.0).abs() < 1e-12);
        let y = [1.0, 0.0, 0.0];
        let z = [0.0, 1.0, 3.0];
        assert_eq!(ps_inner(&y, &z, sig11()).unwrap(), 0.0);
        assert!(matches!(
            ps_inner(&[1.0, 2.0], &z, sig11()),
            Err(GeometryError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn membership_examples() {
        assert!(on_manifold(&origin(sig11(), beta1()), 1e-6));
        assert!(on_manifold(&sample_point(), 1e-6));
        let off = PseudoPoint::new_unchecked(vec![1.0, 1.0], vec![0.0], beta1()).unwrap();
        assert!(!on_manifold(&off, 1e-6));
        assert!((off.residual() + 1.0).abs() < 1e-15);
        assert!(PseudoPoint::new(vec![1.0, 1.0], vec![0.0], beta1()).is_err());
    }

    #[test]
    fn psi_examples() {
        let p = psi(&origin(sig11(), beta1())).unwrap();
        assert_eq!(p.sphere(), &[1.0, 0.0]);
        assert_eq!(p.euclid(), &[0.0]);
        let q = psi(&sample_point()).unwrap();
        assert!((q.sphere()[0]).abs() < 1e-15 && (q.sphere()[1] - 1.0).abs() < 1e-15);
        assert_eq!(q.euclid(), &[2.0]);
        let back = psi_inv(&q, beta1()).unwrap();
        for (a, b) in back.ambient().iter().zip(sample_point().ambient()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn psi_rejects_zero_time_block() {
        let bad = PseudoPoint::new_unchecked(vec![0.0, 0.0], vec![1.0], beta1()).unwrap();
        assert_eq!(psi(&bad), Err(GeometryError::PsiUndefined));
    }

    #[test]
    fn psi_inv_examples() {
        let p = ProductPoint::new(vec![1.0, 0.0], vec![0.0], beta1()).unwrap();
        assert_eq!(psi_inv(&p, beta1()).unwrap().ambient(), vec![1.0, 0.0, 0.0]);
        let q = ProductPoint::new(vec![0.0, 1.0], vec![2.0], beta1()).unwrap();
        let x = psi_inv(&q, beta1()).unwrap();
        assert!((x.time()[1] - 5f64.sqrt()).abs() < 1e-15);
        assert!(on_manifold(&x, 1e-12));
        assert!(ProductPoint::new(vec![2.0, 0.0], vec![0.0], beta1()).is_err());
    }

    #[test]
    fn sph_log_exp_examples() {
        let b = [1.0, 0.0];
        assert_eq!(sph_log(&b, &b, 1.0).unwrap(), vec![0.0, 0.0]);
        let v = sph_log(&b, &[0.0, 1.0], 1.0).unwrap();
        assert!(v[0].abs() < 1e-15 && (v[1] - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(sph_exp(&b, &[0.0, 0.0], 1.0), b.to_vec());
        let p = sph_exp(&b, &[0.0, FRAC_PI_2], 1.0);
        assert!(p[0].abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15);
        assert_eq!(sph_log(&b, &[-1.0, 0.0], 1.0), Err(GeometryError::CutLocus));
    }

    #[test]
    fn diffeo_maps_examples() {
        let o = origin(sig11(), beta1());
        let z = diffeo_log_o(&o).unwrap();
        assert!(z.coords().iter().all(|&c| c == 0.0));
        assert_eq!(diffeo_exp_o(&z), o);

        let y = sample_point();
        let xi = diffeo_log_o(&y).unwrap();
        let expected = [0.0, FRAC_PI_2, 2.0];
        for (a, b) in xi.coords().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{:?}", xi.coords());
        }
        let back = diffeo_exp_o(&xi);
        for (a, b) in back.ambient().iter().zip(y.ambient()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        let p = project_to_q(&[2.0, 0.0, 0.0], sig11(), beta1()).unwrap();
        assert_eq!(p.ambient(), vec![1.0, 0.0, 0.0]);
        let y = sample_point();
        let again = project_to_q(&y.ambient(), sig11(), beta1()).unwrap();
        for (a, b) in again.ambient().iter().zip(y.ambient()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            project_to_q(&[0.0, 0.0, 1.0], sig11(), beta1()),
            Err(GeometryError::ProjectionFailed)
        );
    }

    #[test]
    fn ps_norm_examples() {
        let sig = sig11();
        assert_eq!(ps_norm(&TangentVector::zeros(sig, beta1())), 0.0);
        let v = TangentVector::new(vec![0.0, 3.0, 4.0], sig, beta1()).unwrap();
        assert_eq!(ps_norm(&v), 5.0);
        assert!((ps_norm(&v.scale(-2.5)) - 12.5).abs() < 1e-12);
    }

    #[test]
    fn origin_of_default_capsule_manifold() {
        let m = Manifold::new(9, 9, -1.0).unwrap();
        let o = m.origin();
        let amb = o.ambient();
        assert_eq!(amb.len(), 19);
        assert_eq!(amb.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(amb[0], 1.0);
        assert_eq!(ps_inner(&amb, &amb, m.sig).unwrap(), -1.0);
    }

    fn arb_point() -> impl Strategy<Value = PseudoPoint> {
        (1usize..5, 1usize..5, 0.1f64..4.0).prop_flat_map(|(s, t, b)| {
            (
                prop::collection::vec(-3.0f64..3.0, s + t),
                Just((s, t, b)),
            )
                .prop_map(|(red, (s, t, b))| {
                    let m = Manifold::new(s, t, -b).unwrap();
                    // keep the sphere block inside the injectivity radius
                    let mut red = red;
                    let sn = norm(&red[..t]);
                    let limit = 0.9 * std::f64::consts::PI * m.beta.radius();
                    if sn > limit {
                        for x in &mut red[..t] {
                            *x *= limit / sn;
                        }
                    }
                    let xi = TangentVector::from_reduced(&red, m.sig, m.beta).unwrap();
                    diffeo_exp_o(&xi)
                })
        })
    }

    proptest! {
        #[test]
        fn exp_outputs_are_members(p in arb_point()) {
            prop_assert!(on_manifold(&p, 1e-6));
        }

        #[test]
        fn psi_round_trip(p in arb_point()) {
            let back = psi_inv(&psi(&p).unwrap(), p.beta()).unwrap();
            for (a, b) in back.ambient().iter().zip(p.ambient()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }

        #[test]
        fn log_exp_round_trip(p in arb_point()) {
            let back = diffeo_exp_o(&diffeo_log_o(&p).unwrap());
            for (a, b) in back.ambient().iter().zip(p.ambient()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }

        #[test]
        fn ps_inner_symmetric_bilinear(
            x in prop::collection::vec(-5.0f64..5.0, 5),
            y in prop::collection::vec(-5.0f64..5.0, 5),
            z in prop::collection::vec(-5.0f64..5.0, 5),
            a in -3.0f64..3.0,
        ) {
            let sig = Signature::new(2, 2).unwrap();
            let xy = ps_inner(&x, &y, sig).unwrap();
            prop_assert_eq!(xy, ps_inner(&y, &x, sig).unwrap());
            let ax_z: Vec<f64> = x.iter().zip(&z).map(|(xi, zi)| a * xi + zi).collect();
            let lhs = ps_inner(&ax_z, &y, sig).unwrap();
            let rhs = a * xy + ps_inner(&z, &y, sig).unwrap();
            let scale = x.iter().chain(&y).chain(&z).map(|v| v * v).sum::<f64>().max(1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale * (1.0 + a.abs()));
        }
    }
}
