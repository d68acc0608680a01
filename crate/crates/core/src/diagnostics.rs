//! Representation-collapse diagnostics: activation variance and spectral
//! rank measures of the feature covariance, with bootstrap uncertainty.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::normalize_weights;
use crate::rng::keyed_stream;
use crate::tensor_io::{Checkpoint, CheckpointHandle, LoadOptions, Precision};

/// `n × d` samples-by-features matrix for one layer, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub layer: String,
    pub samples: DMatrix<f64>,
}

impl ActivationMatrix {
    pub fn new(layer: impl Into<String>, samples: DMatrix<f64>) -> Result<Self> {
        let layer = layer.into();
        if samples.nrows() < 2 || samples.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer {layer}: need at least 2 samples and 1 feature, got {}x{}",
                samples.nrows(),
                samples.ncols()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "layer {layer}: non-finite activation"
            )));
        }
        Ok(ActivationMatrix { layer, samples })
    }

    /// Build from a flat row-major buffer of `n · d` values.
    pub fn from_row_major(
        layer: impl Into<String>,
        n: usize,
        d: usize,
        data: &[f64],
    ) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::LengthMismatch {
                expected: n * d,
                actual: data.len(),
            });
        }
        Self::new(layer, DMatrix::from_row_slice(n, d, data))
    }

    pub fn n(&self) -> usize {
        self.samples.nrows()
    }

    pub fn d(&self) -> usize {
        self.samples.ncols()
    }
}

/// Subtract column means; constant columns become exact zeros.
fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let first = col[0];
        if col.iter().all(|v| *v == first) {
            col.fill(0.0);
        } else {
            let mean = col.sum() / n;
            col.add_scalar_mut(-mean);
        }
    }
    c
}

fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let centered = centered(x);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    // Symmetrize to absorb rounding in the product.
    (&cov + cov.transpose()) * 0.5
}

/// Eigenvalues of the unbiased feature covariance, sorted descending,
/// with negative rounding noise clamped to zero.
pub fn covariance_spectrum(x: &ActivationMatrix) -> Vec<f64> {
    let eig = SymmetricEigen::new(covariance(&x.samples));
    let mut values: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

/// Mean over features of the per-feature sample variance (n − 1 denominator).
pub fn mean_activation_variance(x: &ActivationMatrix) -> f64 {
    let n = x.n() as f64;
    let total: f64 = centered(&x.samples)
        .column_iter()
        .map(|col| col.norm_squared() / (n - 1.0))
        .sum();
    total / x.d() as f64
}

fn max_eigenvalue(spectrum: &[f64]) -> f64 {
    spectrum.iter().copied().fold(0.0, f64::max)
}

/// Spectrum scaled by its largest eigenvalue, or `None` if all zero.
fn scaled(spectrum: &[f64]) -> Option<Vec<f64>> {
    let max = max_eigenvalue(spectrum);
    (max > 0.0).then(|| spectrum.iter().map(|l| l / max).collect())
}

/// `exp` of the Shannon entropy of the normalized spectrum; 0 for an
/// all-zero spectrum.
pub fn effective_rank(spectrum: &[f64]) -> f64 {
    let Some(q) = scaled(spectrum) else {
        return 0.0;
    };
    // H = ln S - Σ q ln q / S with q = λ / λ_max and S = Σ q.
    let total: f64 = q.iter().sum();
    let weighted: f64 = q.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum();
    (total.ln() - weighted / total).exp()
}

/// Trace over the largest eigenvalue; 0 for an all-zero spectrum.
pub fn stable_rank(spectrum: &[f64]) -> f64 {
    scaled(spectrum).map_or(0.0, |q| q.iter().sum())
}

/// `(Σλ)² / Σλ²`; 0 for an all-zero spectrum.
pub fn participation_ratio(spectrum: &[f64]) -> f64 {
    let Some(q) = scaled(spectrum) else {
        return 0.0;
    };
    let sum: f64 = q.iter().sum();
    sum * sum / q.iter().map(|v| v * v).sum::<f64>()
}

/// Count of eigenvalues above `rel_tol · λ_max`. The default tolerance is
/// `d · ε` of the working precision.
pub fn numerical_rank(spectrum: &[f64], rel_tol: Option<f64>, precision: Precision) -> usize {
    let max = max_eigenvalue(spectrum);
    if max <= 0.0 {
        return 0;
    }
    let tol = rel_tol.unwrap_or(spectrum.len() as f64 * precision.epsilon());
    spectrum.iter().filter(|l| **l > tol * max).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralStats {
    pub mean_variance: f64,
    pub eff_rank: f64,
    pub stable_rank: f64,
    pub participation_ratio: f64,
    pub num_rank: usize,
    /// The covariance is identically zero; rank measures are reported as 0.
    pub degenerate: bool,
}

pub fn spectral_stats(x: &ActivationMatrix, precision: Precision) -> SpectralStats {
    let spectrum = covariance_spectrum(x);
    SpectralStats {
        mean_variance: mean_activation_variance(x),
        eff_rank: effective_rank(&spectrum),
        stable_rank: stable_rank(&spectrum),
        participation_ratio: participation_ratio(&spectrum),
        num_rank: numerical_rank(&spectrum, None, precision),
        degenerate: spectrum.iter().all(|l| *l == 0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

pub const METRICS: [&str; 5] = [
    "mean_variance",
    "eff_rank",
    "stable_rank",
    "participation_ratio",
    "num_rank",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: String,
    pub samples: usize,
    pub features: usize,
    pub mean_variance: MeanStd,
    pub eff_rank: MeanStd,
    pub stable_rank: MeanStd,
    pub participation_ratio: MeanStd,
    pub num_rank: MeanStd,
    /// Draws whose covariance was identically zero.
    pub degenerate_draws: usize,
}

impl LayerStats {
    pub fn metric(&self, name: &str) -> Option<MeanStd> {
        Some(match name {
            "mean_variance" => self.mean_variance,
            "eff_rank" => self.eff_rank,
            "stable_rank" => self.stable_rank,
            "participation_ratio" => self.participation_ratio,
            "num_rank" => self.num_rank,
            _ => return None,
        })
    }
}

/// Resample rows with replacement `draws` times and summarize every metric.
/// Draw `k` uses the stream keyed by `(seed, layer, k)`, so results do not
/// depend on how draws are scheduled.
pub fn bootstrap_stats(
    x: &ActivationMatrix,
    draws: usize,
    seed: u64,
    precision: Precision,
) -> Result<LayerStats> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be at least 1".into()));
    }
    let n = x.n();
    let per_draw: Vec<SpectralStats> = (0..draws)
        .into_par_iter()
        .map(|k| {
            let mut rng = keyed_stream(seed, &format!("bootstrap/{}", x.layer), k as u64);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resampled = ActivationMatrix {
                layer: x.layer.clone(),
                samples: x.samples.select_rows(&rows),
            };
            spectral_stats(&resampled, precision)
        })
        .collect();
    let summarize =
        |f: fn(&SpectralStats) -> f64| MeanStd::of(&per_draw.iter().map(f).collect::<Vec<_>>());
    Ok(LayerStats {
        layer: x.layer.clone(),
        samples: n,
        features: x.d(),
        mean_variance: summarize(|s| s.mean_variance),
        eff_rank: summarize(|s| s.eff_rank),
        stable_rank: summarize(|s| s.stable_rank),
        participation_ratio: summarize(|s| s.participation_ratio),
        num_rank: summarize(|s| s.num_rank as f64),
        degenerate_draws: per_draw.iter().filter(|s| s.degenerate).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub draws: usize,
    pub seed: u64,
    pub samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub config: ReportConfig,
    pub layers: Vec<LayerStats>,
}

impl DiagnosticsReport {
    pub fn build(
        layers: &[ActivationMatrix],
        draws: usize,
        seed: u64,
        precision: Precision,
    ) -> Result<Self> {
        let stats = layers
            .iter()
            .map(|x| bootstrap_stats(x, draws, seed, precision))
            .collect::<Result<Vec<_>>>()?;
        Ok(DiagnosticsReport {
            config: ReportConfig {
                draws,
                seed,
                samples: layers.iter().map(ActivationMatrix::n).collect(),
            },
            layers: stats,
        })
    }

    /// One row per layer per metric: `layer,metric,mean,std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,metric,mean,std\n");
        for l in &self.layers {
            for m in METRICS {
                let v = l.metric(m).expect("known metric");
                writeln!(out, "{},{},{},{}", l.layer, m, v.mean, v.std).expect("write to string");
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Identity,
    Relu,
    Tanh,
}

impl Nonlinearity {
    fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Identity => v,
            Nonlinearity::Relu => v.max(0.0),
            Nonlinearity::Tanh => v.tanh(),
        }
    }
}

/// Affine layer with weight shaped `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: DMatrix<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Propagate `inputs` through `layers`, recording activations after each
/// nonlinearity. Entry 0 is the input itself, labelled `layer_0`.
pub fn toy_forward_collect(
    layers: &[DenseLayer],
    inputs: &DMatrix<f64>,
    nonlinearity: Nonlinearity,
) -> Result<Vec<ActivationMatrix>> {
    let mut out = vec![ActivationMatrix::new("layer_0", inputs.clone())?];
    let mut current = inputs.clone();
    for (k, layer) in layers.iter().enumerate() {
        let label = format!("layer_{}", k + 1);
        if layer.weight.ncols() != current.ncols() {
            return Err(Error::InvalidArgument(format!(
                "{label}: weight expects {} inputs but receives {}",
                layer.weight.ncols(),
                current.ncols()
            )));
        }
        let mut pre = &current * layer.weight.transpose();
        if let Some(b) = &layer.bias {
            if b.len() != pre.ncols() {
                return Err(Error::InvalidArgument(format!(
                    "{label}: bias has {} entries for {} outputs",
                    b.len(),
                    pre.ncols()
                )));
            }
            for mut row in pre.row_iter_mut() {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
            }
        }
        pre.apply(|v| *v = nonlinearity.apply(*v));
        out.push(ActivationMatrix::new(label, pre.clone())?);
        current = pre;
    }
    Ok(out)
}

/// Read `layer_<k>` 2-D tensors from a container, ordered by `k`.
pub fn load_activation_layers(
    path: impl AsRef<Path>,
    options: LoadOptions,
) -> Result<Vec<ActivationMatrix>> {
    let handle = CheckpointHandle::open_with(path, options)?;
    let mut layers: Vec<(u64, ActivationMatrix)> = Vec::new();
    for name in handle.names() {
        let Some(k) = name
            .strip_prefix("layer_")
            .and_then(|k| k.parse::<u64>().ok())
        else {
            log::warn!("ignoring tensor {name}: not named layer_<k>");
            continue;
        };
        let t = handle.load_tensor(name)?;
        let [n, d] = t.shape[..] else {
            return Err(Error::InvalidTensor {
                tensor: name.to_string(),
                reason: format!("activation tensors must be 2-D, got shape {:?}", t.shape),
            });
        };
        layers.push((k, ActivationMatrix::from_row_major(name, n, d, &t.data)?));
    }
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layer_<k> tensors found".into()));
    }
    layers.sort_by_key(|(k, _)| *k);
    Ok(layers.into_iter().map(|(_, l)| l).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormRow {
    pub name: String,
    pub source_norms: Vec<f64>,
    pub merged_norm: f64,
    /// `‖merged‖ / Σ α_i ‖θ_i‖`.
    pub shrinkage_ratio: f64,
}

/// Per-tensor norms of the sources and the merge, and the shrinkage ratio
/// relative to the weighted mean source norm.
pub fn weight_norm_report(
    sources: &[&Checkpoint],
    weights: &[f64],
    merged: &Checkpoint,
) -> Result<Vec<NormRow>> {
    if sources.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: sources.len(),
            actual: weights.len(),
        });
    }
    let alpha = normalize_weights(weights)?;
    let mut rows = BTreeMap::new();
    for t in merged.iter() {
        let mut source_norms = Vec::with_capacity(sources.len());
        for s in sources {
            let src = s.get(&t.name).ok_or_else(|| {
                Error::Alignment(format!("{} missing from a source checkpoint", t.name))
            })?;
            if src.shape != t.shape {
                return Err(Error::Alignment(format!(
                    "{}: shapes {:?} vs {:?}",
                    t.name, src.shape, t.shape
                )));
            }
            source_norms.push(src.norm());
        }
        let rep: f64 = source_norms.iter().zip(&alpha).map(|(n, a)| n * a).sum();
        let merged_norm = t.norm();
        rows.insert(
            t.name.clone(),
            NormRow {
                name: t.name.clone(),
                source_norms,
                merged_norm,
                shrinkage_ratio: if rep > 0.0 { merged_norm / rep } else { 1.0 },
            },
        );
    }
    Ok(rows.into_values().collect())
}
