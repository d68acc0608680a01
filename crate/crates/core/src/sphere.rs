//! Closed-form geometry on the unit hypersphere and the weighted Karcher
//! mean solver built on it.
//!
//! Angles are computed as `2·atan2(‖p − q‖, ‖p + q‖)`, which equals
//! `arccos(clamp(⟨p,q⟩))` but stays accurate for nearly coincident or
//! nearly antipodal points and is exactly symmetric in its arguments.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, normalize_weights};

/// Vectors shorter than this have no usable direction.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Angles (and tangent norms) below this are treated as zero.
pub const SMALL_ANGLE: f64 = 1e-12;
/// Allowed deviation from unit norm when constructing a [`UnitVector`].
pub const UNIT_TOLERANCE: f64 = 1e-6;
/// Relative tangency tolerance: `|⟨p,v⟩| ≤ TANGENT_TOLERANCE · ‖v‖`.
pub const TANGENT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_ANTIPODAL_EPS: f64 = 1e-8;

/// A point on the unit sphere `S^{d-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Accepts coordinates whose norm is within [`UNIT_TOLERANCE`] of one and
    /// re-normalizes them.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument("unit vector needs d >= 1".into()));
        }
        check_finite(&coords)?;
        let n = norm(&coords);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "norm {n} is not within {UNIT_TOLERANCE} of 1"
            )));
        }
        Ok(Self::renormalized(coords, n))
    }

    /// The `i`-th standard basis vector in dimension `dim`.
    pub fn basis(dim: usize, i: usize) -> Self {
        assert!(i < dim, "basis index {i} out of range for dimension {dim}");
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        UnitVector(v)
    }

    fn renormalized(mut coords: Vec<f64>, n: f64) -> Self {
        if n != 1.0 {
            coords.iter_mut().for_each(|c| *c /= n);
        }
        UnitVector(coords)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A tangent vector at the base point it was produced for (or is applied to).
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(pub Vec<f64>);

impl TangentVector {
    pub fn zeros(dim: usize) -> Self {
        TangentVector(vec![0.0; dim])
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KarcherConfig {
    /// Step size applied to the averaged tangent vector, in (0, 1].
    pub eta: f64,
    /// Absolute threshold on the weighted tangent residual norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Points with `⟨p,q⟩ ≤ -1 + antipodal_eps` are rejected.
    pub antipodal_eps: f64,
}

impl Default for KarcherConfig {
    fn default() -> Self {
        KarcherConfig {
            eta: 1.0,
            tol: 1e-6,
            max_iter: 50,
            antipodal_eps: DEFAULT_ANTIPODAL_EPS,
        }
    }
}

impl KarcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eta must lie in (0, 1], got {}",
                self.eta
            )));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.antipodal_eps > 0.0 && self.antipodal_eps < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "antipodal_eps must lie in (0, 1), got {}",
                self.antipodal_eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KarcherResult {
    pub mean: UnitVector,
    /// Number of fixed-point updates applied after initialization.
    pub iterations: usize,
    /// `‖Σ α_i Log_mean(u_i)‖` at exit.
    pub residual: f64,
    pub converged: bool,
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::InvalidArgument(format!(
            "non-finite coordinate at index {index}"
        ))),
        None => Ok(()),
    }
}

fn check_dims(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    Ok(())
}

/// Split `v` into its direction and length. Vectors shorter than
/// [`DEGENERATE_NORM`] yield [`Error::Degenerate`].
pub fn normalize_to_sphere(v: &[f64]) -> Result<(UnitVector, f64)> {
    if v.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot normalize an empty vector".into(),
        ));
    }
    check_finite(v)?;
    let n = norm(v);
    if n < DEGENERATE_NORM {
        return Err(Error::Degenerate { norm: n });
    }
    Ok((UnitVector::renormalized(v.to_vec(), n), n))
}

fn angle(p: &[f64], q: &[f64]) -> f64 {
    let (mut diff, mut sum) = (0.0f64, 0.0f64);
    for (a, b) in p.iter().zip(q) {
        diff += (a - b) * (a - b);
        sum += (a + b) * (a + b);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

/// Component of `q` orthogonal to `p` and its length.
fn orthogonal_part(p: &[f64], q: &[f64]) -> (Vec<f64>, f64) {
    let c = dot(p, q).clamp(-1.0, 1.0);
    let w: Vec<f64> = q.iter().zip(p).map(|(qi, pi)| qi - c * pi).collect();
    let s = norm(&w);
    (w, s)
}

pub fn geodesic_distance(p: &UnitVector, q: &UnitVector) -> f64 {
    assert_eq!(p.dim(), q.dim(), "dimension mismatch");
    angle(&p.0, &q.0)
}

/// Riemannian logarithm: the tangent vector at `p` pointing along the
/// shortest geodesic to `q`, with length equal to the geodesic distance.
pub fn sphere_log(p: &UnitVector, q: &UnitVector) -> Result<TangentVector> {
    sphere_log_eps(p, q, DEFAULT_ANTIPODAL_EPS)
}

pub fn sphere_log_eps(p: &UnitVector, q: &UnitVector, antipodal_eps: f64) -> Result<TangentVector> {
    check_dims(&p.0, &q.0)?;
    let mut out = vec![0.0; p.dim()];
    accumulate_log(&p.0, &q.0, 1.0, antipodal_eps, &mut out)?;
    Ok(TangentVector(out))
}

/// `acc += weight * Log_p(q)`.
fn accumulate_log(
    p: &[f64],
    q: &[f64],
    weight: f64,
    antipodal_eps: f64,
    acc: &mut [f64],
) -> Result<()> {
    let inner = dot(p, q);
    if inner <= -1.0 + antipodal_eps {
        return Err(Error::Antipodal {
            inner,
            iteration: None,
        });
    }
    let theta = angle(p, q);
    if theta < SMALL_ANGLE {
        return Ok(());
    }
    let (w, s) = orthogonal_part(p, q);
    if s == 0.0 {
        return Ok(());
    }
    axpy(weight * theta / s, &w, acc);
    Ok(())
}

/// Riemannian exponential: walk from `p` along `v` for length `‖v‖`.
pub fn sphere_exp(p: &UnitVector, v: &TangentVector) -> Result<UnitVector> {
    check_dims(&p.0, &v.0)?;
    let n = v.norm();
    if n < SMALL_ANGLE {
        return Ok(p.clone());
    }
    let inner = dot(&p.0, &v.0);
    if inner.abs() > TANGENT_TOLERANCE * n {
        return Err(Error::NotTangent { inner });
    }
    let (c, s) = (n.cos(), n.sin() / n);
    let out: Vec<f64> =
        p.0.iter()
            .zip(&v.0)
            .map(|(pi, vi)| c * pi + s * vi)
            .collect();
    let on = norm(&out);
    Ok(UnitVector::renormalized(out, on))
}

/// Constant-speed geodesic interpolation from `p` (t = 0) to `q` (t = 1).
pub fn slerp(p: &UnitVector, q: &UnitVector, t: f64) -> Result<UnitVector> {
    check_dims(&p.0, &q.0)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "t must lie in [0, 1], got {t}"
        )));
    }
    let inner = dot(&p.0, &q.0);
    if inner <= -1.0 + DEFAULT_ANTIPODAL_EPS {
        return Err(Error::Antipodal {
            inner,
            iteration: None,
        });
    }
    if t == 0.0 {
        return Ok(p.clone());
    }
    if t == 1.0 {
        return Ok(q.clone());
    }
    let theta = angle(&p.0, &q.0);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - t, t)
    } else {
        let sin_theta = theta.sin();
        (
            ((1.0 - t) * theta).sin() / sin_theta,
            (t * theta).sin() / sin_theta,
        )
    };
    let out: Vec<f64> =
        p.0.iter()
            .zip(&q.0)
            .map(|(pi, qi)| a * pi + b * qi)
            .collect();
    let n = norm(&out);
    Ok(UnitVector::renormalized(out, n))
}

fn validate_points(points: &[UnitVector], weights: &[f64]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("need at least one point".into()));
    }
    if points.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: points.len(),
            actual: weights.len(),
        });
    }
    let dim = points[0].dim();
    if let Some(p) = points.iter().find(|p| p.dim() != dim) {
        return Err(Error::LengthMismatch {
            expected: dim,
            actual: p.dim(),
        });
    }
    normalize_weights(weights)
}

/// Weighted sum of squared geodesic distances from `x` to `points`.
/// Weights are normalized to sum to one.
pub fn frechet_objective(x: &UnitVector, points: &[UnitVector], weights: &[f64]) -> Result<f64> {
    let alpha = validate_points(points, weights)?;
    check_dims(&x.0, &points[0].0)?;
    Ok(points
        .iter()
        .zip(&alpha)
        .map(|(u, a)| a * geodesic_distance(x, u).powi(2))
        .sum())
}

fn canonical_cmp(a: (&UnitVector, f64), b: (&UnitVector, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then_with(|| {
        a.0 .0
            .iter()
            .zip(&b.0 .0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Weighted Karcher mean by fixed-point iteration
/// `x ← Exp_x(η Σ α_i Log_x(u_i))`, stopped once the weighted residual
/// `‖Σ α_i Log_x(u_i)‖` drops below `cfg.tol`.
///
/// Starts from the normalized weighted chord mean, or from the heaviest
/// point when the chord mean vanishes. Points are visited in a canonical
/// order (weight, then coordinates), so the result does not depend on how
/// the inputs were permuted. Hitting `max_iter` returns the last iterate
/// with `converged = false`.
pub fn karcher_mean(
    points: &[UnitVector],
    weights: &[f64],
    cfg: &KarcherConfig,
) -> Result<KarcherResult> {
    cfg.validate()?;
    validate_points(points, weights)?;

    // Sort on the raw weights, then normalize in that order, so a joint
    // permutation of the inputs cannot change a single bit of the result.
    let mut active: Vec<(&UnitVector, f64)> = points
        .iter()
        .zip(weights.iter().copied())
        .filter(|(_, w)| *w > 0.0)
        .collect();
    active.sort_by(|a, b| canonical_cmp(*a, *b));
    let total: f64 = active.iter().map(|(_, w)| w).sum();
    active.iter_mut().for_each(|(_, w)| *w /= total);

    if active.len() == 1 || active.iter().all(|(u, _)| u.0 == active[0].0 .0) {
        return Ok(KarcherResult {
            mean: active[0].0.clone(),
            iterations: 0,
            residual: 0.0,
            converged: true,
        });
    }

    let dim = active[0].0.dim();
    let mut chord = vec![0.0; dim];
    for (u, a) in &active {
        axpy(*a, &u.0, &mut chord);
    }
    let chord_norm = norm(&chord);
    let mut x = if chord_norm < DEGENERATE_NORM {
        // Heaviest point; canonical order makes ties deterministic.
        let (u, _) = active
            .iter()
            .rev()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        (*u).clone()
    } else {
        UnitVector::renormalized(chord, chord_norm)
    };

    let mut grad = vec![0.0; dim];
    let mut iterations = 0;
    loop {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (u, a) in &active {
            accumulate_log(&x.0, &u.0, *a, cfg.antipodal_eps, &mut grad).map_err(|e| match e {
                Error::Antipodal { inner, .. } => Error::Antipodal {
                    inner,
                    iteration: Some(iterations),
                },
                e => e,
            })?;
        }
        let residual = norm(&grad);
        if residual < cfg.tol {
            return Ok(KarcherResult {
                mean: x,
                iterations,
                residual,
                converged: true,
            });
        }
        if iterations == cfg.max_iter {
            return Ok(KarcherResult {
                mean: x,
                iterations,
                residual,
                converged: false,
            });
        }
        // The weighted log sum is tangent at x up to rounding; exp cannot reject it.
        let step = TangentVector(grad.iter().map(|g| cfg.eta * g).collect());
        x = sphere_exp(&x, &step)?;
        iterations += 1;
    }
}
