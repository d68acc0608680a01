//! Per-tensor merge rules. Every function works on flattened (row-major)
//! tensors and returns a fresh buffer of the same length.

use serde::{Deserialize, Serialize};

use crate::delta::{
    dare_drop, della_drop, disjoint_merge, elect_signs, task_vector, trim_topk, SparsifySpec,
};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, normalize_weights, scale};
use crate::rng::tensor_stream;
use crate::sphere::{
    karcher_mean, normalize_to_sphere, slerp, sphere_exp, KarcherConfig, TangentVector, UnitVector,
    DEGENERATE_NORM,
};

/// Convergence record of one spherical solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

impl SolverStats {
    const TRIVIAL: SolverStats = SolverStats {
        iterations: 0,
        residual: 0.0,
        converged: true,
    };
}

/// How sparsified deltas are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    Lerp,
    Ties,
}

fn aligned_len(tensors: &[&[f64]], weights: &[f64]) -> Result<usize> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one tensor".into()))?;
    if tensors.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: tensors.len(),
            actual: weights.len(),
        });
    }
    for t in tensors {
        if t.len() != first.len() {
            return Err(Error::LengthMismatch {
                expected: first.len(),
                actual: t.len(),
            });
        }
    }
    Ok(first.len())
}

fn weighted_sum(tensors: &[&[f64]], alpha: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (t, a) in tensors.iter().zip(alpha) {
        axpy(*a, t, &mut out);
    }
    out
}

fn all_identical(tensors: &[&[f64]]) -> bool {
    tensors.iter().all(|t| *t == tensors[0])
}

/// Weighted Euclidean average `Σ α_i θ_i`.
pub fn merge_lerp(tensors: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    let n = aligned_len(tensors, weights)?;
    let alpha = normalize_weights(weights)?;
    Ok(weighted_sum(tensors, &alpha, n))
}

/// Two-way spherical interpolation of directions, rescaled by the
/// interpolated norm `(1 - t)‖a‖ + t‖b‖`.
pub fn merge_slerp(a: &[f64], b: &[f64], t: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if t == 0.0 {
        return Ok(a.to_vec());
    }
    if t == 1.0 {
        return Ok(b.to_vec());
    }
    if a == b {
        return Ok(a.to_vec());
    }
    let (Ok((ua, na)), Ok((ub, nb))) = (normalize_to_sphere(a), normalize_to_sphere(b)) else {
        // A zero-length endpoint has no direction; lerp is exact there.
        return Ok(a
            .iter()
            .zip(b)
            .map(|(x, y)| (1.0 - t) * x + t * y)
            .collect());
    };
    let dir = slerp(&ua, &ub, t)?;
    let mut out = dir.into_inner();
    scale((1.0 - t) * na + t * nb, &mut out);
    Ok(out)
}

/// Directions of the usable sources plus the representative norm.
struct Directions {
    points: Vec<UnitVector>,
    weights: Vec<f64>,
    rep_norm: f64,
}

/// Normalize every positively weighted source. Sources too short to have a
/// direction drop out of the spherical average; the representative norm
/// still uses all sources with their original weights.
fn directions(tensors: &[&[f64]], alpha: &[f64]) -> Result<Directions> {
    let mut d = Directions {
        points: Vec::new(),
        weights: Vec::new(),
        rep_norm: 0.0,
    };
    for (t, a) in tensors.iter().zip(alpha) {
        if *a == 0.0 {
            continue;
        }
        match normalize_to_sphere(t) {
            Ok((u, n)) => {
                d.rep_norm += a * n;
                d.points.push(u);
                d.weights.push(*a);
            }
            Err(Error::Degenerate { norm }) => d.rep_norm += a * norm,
            Err(e) => return Err(e),
        }
    }
    Ok(d)
}

/// One tangent-space average from the chord basepoint:
/// `Exp_b(Σ α_i Log_b(u_i))` with `b` the normalized weighted chord mean,
/// rescaled by the weighted mean source norm. Falls back to [`merge_lerp`]
/// when the chord mean vanishes.
pub fn merge_multislerp(tensors: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    let n = aligned_len(tensors, weights)?;
    let alpha = normalize_weights(weights)?;
    if all_identical(tensors) {
        return Ok(tensors[0].to_vec());
    }
    let dirs = directions(tensors, &alpha)?;
    if dirs.points.is_empty() {
        return Ok(weighted_sum(tensors, &alpha, n));
    }
    let total: f64 = dirs.weights.iter().sum();
    let mut chord = vec![0.0; n];
    for (u, w) in dirs.points.iter().zip(&dirs.weights) {
        axpy(w / total, u.as_slice(), &mut chord);
    }
    let base = match normalize_to_sphere(&chord) {
        Ok((b, _)) => b,
        Err(Error::Degenerate { norm }) => {
            log::warn!("multislerp basepoint degenerate (chord norm {norm:.3e}); using lerp");
            return Ok(weighted_sum(tensors, &alpha, n));
        }
        Err(e) => return Err(e),
    };
    let mut tangent = vec![0.0; n];
    for (u, w) in dirs.points.iter().zip(&dirs.weights) {
        let log = crate::sphere::sphere_log(&base, u)?;
        axpy(w / total, log.as_slice(), &mut tangent);
    }
    let mut out = sphere_exp(&base, &TangentVector(tangent))?.into_inner();
    scale(dirs.rep_norm, &mut out);
    Ok(out)
}

/// Spherical Karcher merge: weighted Karcher mean of the source directions,
/// rescaled by `Σ α_i ‖θ_i‖`.
///
/// Zero-length sources drop out of the direction average. If every source
/// is zero-length the weighted Euclidean mean is returned.
pub fn merge_karcher(
    tensors: &[&[f64]],
    weights: &[f64],
    cfg: &KarcherConfig,
) -> Result<(Vec<f64>, SolverStats)> {
    cfg.validate()?;
    let n = aligned_len(tensors, weights)?;
    let alpha = normalize_weights(weights)?;
    if all_identical(tensors) {
        return Ok((tensors[0].to_vec(), SolverStats::TRIVIAL));
    }
    let dirs = directions(tensors, &alpha)?;
    if dirs.points.is_empty() {
        return Ok((weighted_sum(tensors, &alpha, n), SolverStats::TRIVIAL));
    }
    let result = karcher_mean(&dirs.points, &dirs.weights, cfg)?;
    let mut out = result.mean.into_inner();
    scale(dirs.rep_norm, &mut out);
    Ok((
        out,
        SolverStats {
            iterations: result.iterations,
            residual: result.residual,
            converged: result.converged,
        },
    ))
}

fn deltas(base: &[f64], experts: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    experts.iter().map(|e| task_vector(e, base)).collect()
}

fn as_slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// `base + λ · Σ α_i (θ_i − base)`.
pub fn merge_task_arithmetic(
    base: &[f64],
    experts: &[&[f64]],
    weights: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    aligned_len(experts, weights)?;
    let alpha = normalize_weights(weights)?;
    let d = deltas(base, experts)?;
    Ok(add_scaled(
        base,
        lambda,
        &weighted_sum(&as_slices(&d), &alpha, base.len()),
    ))
}

fn add_scaled(base: &[f64], lambda: f64, delta: &[f64]) -> Vec<f64> {
    base.iter()
        .zip(delta)
        .map(|(b, d)| b + lambda * d)
        .collect()
}

fn ties_combine(
    base: &[f64],
    deltas: &[Vec<f64>],
    weights: &[f64],
    density: Option<f64>,
) -> Result<Vec<f64>> {
    let trimmed: Vec<Vec<f64>> = match density {
        Some(k) => deltas.iter().map(|d| trim_topk(d, k)).collect(),
        None => deltas.to_vec(),
    };
    let refs = as_slices(&trimmed);
    let signs = elect_signs(&refs, weights)?;
    let merged = disjoint_merge(&refs, weights, &signs)?;
    Ok(add_scaled(base, 1.0, &merged))
}

fn check_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    Ok(())
}

/// TIES: trim each task vector to its top `density` fraction, elect a sign
/// per coordinate, and average only the agreeing entries.
pub fn merge_ties(
    base: &[f64],
    experts: &[&[f64]],
    weights: &[f64],
    density: f64,
) -> Result<Vec<f64>> {
    check_density(density)?;
    aligned_len(experts, weights)?;
    let d = deltas(base, experts)?;
    ties_combine(base, &d, weights, Some(density))
}

fn combine_dropped(
    base: &[f64],
    dropped: Vec<Vec<f64>>,
    weights: &[f64],
    combine: Combine,
    density: Option<f64>,
) -> Result<Vec<f64>> {
    match combine {
        Combine::Lerp => {
            let alpha = normalize_weights(weights)?;
            Ok(add_scaled(
                base,
                1.0,
                &weighted_sum(&as_slices(&dropped), &alpha, base.len()),
            ))
        }
        Combine::Ties => ties_combine(base, &dropped, weights, density),
    }
}

/// Options shared by the seeded drop-and-rescale merges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropMerge<'a> {
    pub combine: Combine,
    /// Optional TIES trim applied after dropping (ties combine only).
    pub density: Option<f64>,
    pub seed: u64,
    /// Tensor name used to key the random streams.
    pub tensor: &'a str,
}

/// DARE: drop-and-rescale every task vector with its own stream
/// (keyed by seed, tensor name and model index), then combine.
pub fn merge_dare(
    base: &[f64],
    experts: &[&[f64]],
    weights: &[f64],
    drop_rate: f64,
    opts: DropMerge<'_>,
) -> Result<Vec<f64>> {
    aligned_len(experts, weights)?;
    if let Some(k) = opts.density {
        check_density(k)?;
    }
    let d = deltas(base, experts)?;
    let dropped = d
        .iter()
        .enumerate()
        .map(|(i, delta)| {
            dare_drop(
                delta,
                drop_rate,
                &mut tensor_stream(opts.seed, opts.tensor, i),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    combine_dropped(base, dropped, weights, opts.combine, opts.density)
}

/// DELLA: as [`merge_dare`] with magnitude-aware drop probabilities.
/// `spec.seed` is ignored in favor of `opts.seed`.
pub fn merge_della(
    base: &[f64],
    experts: &[&[f64]],
    weights: &[f64],
    spec: &SparsifySpec,
    opts: DropMerge<'_>,
) -> Result<Vec<f64>> {
    aligned_len(experts, weights)?;
    spec.validate()?;
    if let Some(k) = opts.density {
        check_density(k)?;
    }
    let d = deltas(base, experts)?;
    let dropped = d
        .iter()
        .enumerate()
        .map(|(i, delta)| della_drop(delta, spec, &mut tensor_stream(opts.seed, opts.tensor, i)))
        .collect::<Result<Vec<_>>>()?;
    combine_dropped(base, dropped, weights, opts.combine, opts.density)
}

/// Interpolation ratio `t = m·c / (1 + (m − 1)·c)` from the mean pairwise
/// cosine `c` between task vectors, with `c` clamped into
/// `(−1/(m−1) + 1e−6, 1]`. Zero-length deltas count as cosine 1.
pub fn model_stock_ratio(deltas: &[&[f64]]) -> f64 {
    let m = deltas.len();
    let norms: Vec<f64> = deltas.iter().map(|d| norm(d)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            let cos = if norms[i] < DEGENERATE_NORM || norms[j] < DEGENERATE_NORM {
                1.0
            } else {
                dot(deltas[i], deltas[j]) / (norms[i] * norms[j])
            };
            total += cos;
            pairs += 1;
        }
    }
    let mf = m as f64;
    let c = (total / pairs as f64).clamp(-1.0 / (mf - 1.0) + 1e-6, 1.0);
    mf * c / (1.0 + (mf - 1.0) * c)
}

/// Model Stock: interpolate between the base and the expert mean by the
/// ratio from [`model_stock_ratio`].
pub fn merge_model_stock(base: &[f64], experts: &[&[f64]]) -> Result<Vec<f64>> {
    if experts.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "model_stock requires at least 2 experts, got {}",
            experts.len()
        )));
    }
    let n = aligned_len(experts, &vec![1.0; experts.len()])?;
    let d = deltas(base, experts)?;
    let t = model_stock_ratio(&as_slices(&d));
    let uniform = vec![1.0 / experts.len() as f64; experts.len()];
    let mean = weighted_sum(experts, &uniform, n);
    Ok(mean
        .iter()
        .zip(base)
        .map(|(e, b)| t * e + (1.0 - t) * b)
        .collect())
}
