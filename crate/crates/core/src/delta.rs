//! Task vectors and the sparsification / sign-election primitives used by
//! TIES, DARE and DELLA merges.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::normalize_weights;
use crate::rng::Stream;

/// Difference between an expert tensor and the matching base tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub name: String,
    pub delta: Vec<f64>,
}

impl TaskVector {
    pub fn new(name: impl Into<String>, expert: &[f64], base: &[f64]) -> Result<Self> {
        Ok(TaskVector {
            name: name.into(),
            delta: task_vector(expert, base)?,
        })
    }
}

/// Sparsification hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsifySpec {
    /// Fraction of entries kept by TIES trimming, in (0, 1].
    pub density: f64,
    /// DARE drop probability, in [0, 1).
    pub drop_rate: f64,
    /// Half-width of DELLA's magnitude-dependent drop band.
    pub della_window: f64,
    pub seed: u64,
}

impl Default for SparsifySpec {
    fn default() -> Self {
        SparsifySpec {
            density: 0.5,
            drop_rate: 0.5,
            della_window: 0.1,
            seed: 0,
        }
    }
}

impl SparsifySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "density must lie in (0, 1], got {}",
                self.density
            )));
        }
        if !(self.drop_rate >= 0.0 && self.drop_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "drop_rate must lie in [0, 1), got {}",
                self.drop_rate
            )));
        }
        let w = self.della_window;
        if !(w >= 0.0 && self.drop_rate - w >= 0.0 && self.drop_rate + w < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "window {w} must satisfy 0 <= drop_rate - window and drop_rate + window < 1 (drop_rate {})",
                self.drop_rate
            )));
        }
        Ok(())
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

fn check_aligned(deltas: &[&[f64]], weights: &[f64]) -> Result<usize> {
    let n = deltas
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one delta".into()))?
        .len();
    check_len(deltas.len(), weights.len())?;
    for d in deltas {
        check_len(n, d.len())?;
    }
    Ok(n)
}

pub fn task_vector(expert: &[f64], base: &[f64]) -> Result<Vec<f64>> {
    check_len(base.len(), expert.len())?;
    Ok(expert.iter().zip(base).map(|(e, b)| e - b).collect())
}

/// `⌈density · n⌉`, treating products within rounding noise of an integer
/// as that integer (so 0.3 · 10 keeps 3, not 4).
pub fn keep_count(n: usize, density: f64) -> usize {
    let x = density * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k as usize).min(n)
}

/// Keep the `⌈density · n⌉` largest-magnitude entries and zero the rest.
/// Among equal magnitudes the lower index wins.
pub fn trim_topk(delta: &[f64], density: f64) -> Vec<f64> {
    let n = delta.len();
    let k = keep_count(n, density);
    if k >= n {
        return delta.to_vec();
    }
    let mut out = vec![0.0; n];
    if k == 0 {
        return out;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let by_rank = |a: &usize, b: &usize| delta[*b].abs().total_cmp(&delta[*a].abs()).then(a.cmp(b));
    idx.select_nth_unstable_by(k - 1, by_rank);
    for &i in &idx[..k] {
        out[i] = delta[i];
    }
    out
}

/// Per coordinate, the sign of the weighted sum of deltas (`+1` on ties).
pub fn elect_signs(deltas: &[&[f64]], weights: &[f64]) -> Result<Vec<i8>> {
    let n = check_aligned(deltas, weights)?;
    let alpha = normalize_weights(weights)?;
    let mut sums = vec![0.0f64; n];
    for (d, a) in deltas.iter().zip(&alpha) {
        for (s, v) in sums.iter_mut().zip(d.iter()) {
            *s += a * v;
        }
    }
    Ok(sums.iter().map(|s| if *s < 0.0 { -1 } else { 1 }).collect())
}

/// Weighted mean over the nonzero entries that agree with the elected sign,
/// with weights renormalized over the agreeing models. Coordinates where
/// nobody agrees are zero.
pub fn disjoint_merge(deltas: &[&[f64]], weights: &[f64], signs: &[i8]) -> Result<Vec<f64>> {
    let n = check_aligned(deltas, weights)?;
    check_len(n, signs.len())?;
    let alpha = normalize_weights(weights)?;
    let mut out = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        let s = f64::from(signs[j]);
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (d, a) in deltas.iter().zip(&alpha) {
            let v = d[j];
            if v != 0.0 && v.signum() == s {
                num += a * v;
                den += a;
            }
        }
        if den > 0.0 {
            *o = num / den;
        }
    }
    Ok(out)
}

fn drop_with(delta: &[f64], rng: &mut Stream, prob: impl Fn(usize) -> f64) -> Vec<f64> {
    delta
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            // One draw per coordinate, kept or not, so masks line up across methods.
            let u: f64 = rng.random();
            let p = prob(j);
            if u < p {
                0.0
            } else {
                v / (1.0 - p)
            }
        })
        .collect()
}

/// Zero each coordinate with probability `p` and rescale survivors by
/// `1 / (1 - p)`.
pub fn dare_drop(delta: &[f64], p: f64, rng: &mut Stream) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "drop rate must lie in [0, 1), got {p}"
        )));
    }
    Ok(drop_with(delta, rng, |_| p))
}

/// Per-coordinate drop probabilities for DELLA: linear in magnitude rank,
/// from `drop_rate + window` at the smallest magnitude down to
/// `drop_rate - window` at the largest. Equal magnitudes share their
/// average rank.
pub fn della_drop_probabilities(delta: &[f64], drop_rate: f64, window: f64) -> Vec<f64> {
    let n = delta.len();
    if n <= 1 || window == 0.0 {
        return vec![drop_rate; n];
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|a, b| delta[*a].abs().total_cmp(&delta[*b].abs()));
    let mut rank = vec![0.0f64; n];
    let mut start = 0;
    while start < n {
        let mag = delta[idx[start]].abs();
        let mut end = start + 1;
        while end < n && delta[idx[end]].abs() == mag {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            rank[i] = avg;
        }
        start = end;
    }
    let span = (n - 1) as f64;
    rank.iter()
        .map(|r| drop_rate + window * (1.0 - 2.0 * r / span))
        .collect()
}

/// Magnitude-aware drop-and-rescale. With `della_window == 0` this consumes
/// the stream exactly like [`dare_drop`] and returns identical output.
pub fn della_drop(delta: &[f64], spec: &SparsifySpec, rng: &mut Stream) -> Result<Vec<f64>> {
    spec.validate()?;
    let probs = della_drop_probabilities(delta, spec.drop_rate, spec.della_window);
    Ok(drop_with(delta, rng, |j| probs[j]))
}
