use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::methods::{
    merge_dare, merge_della, merge_karcher, merge_lerp, merge_model_stock, merge_multislerp,
    merge_slerp, merge_task_arithmetic, merge_ties, Combine, DropMerge, SolverStats,
};
use crate::delta::SparsifySpec;
use crate::error::{Error, Result};
use crate::linalg::{norm, normalize_weights};
use crate::sphere::KarcherConfig;
use crate::tensor_io::{
    validate_aligned, AlignmentReport, CheckpointHandle, CheckpointWriter, DType, LoadOptions,
    Precision, TensorLayout, TensorRecord, WriteOptions,
};

/// Names of the supported merge rules, as spelled in recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Karcher,
    Lerp,
    Slerp,
    Multislerp,
    TaskArithmetic,
    Ties,
    DareLerp,
    DareTies,
    DellaLerp,
    DellaTies,
    ModelStock,
}

impl MethodKind {
    pub const ALL: [MethodKind; 11] = [
        MethodKind::Karcher,
        MethodKind::Lerp,
        MethodKind::Slerp,
        MethodKind::Multislerp,
        MethodKind::TaskArithmetic,
        MethodKind::Ties,
        MethodKind::DareLerp,
        MethodKind::DareTies,
        MethodKind::DellaLerp,
        MethodKind::DellaTies,
        MethodKind::ModelStock,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Karcher => "karcher",
            MethodKind::Lerp => "lerp",
            MethodKind::Slerp => "slerp",
            MethodKind::Multislerp => "multislerp",
            MethodKind::TaskArithmetic => "task_arithmetic",
            MethodKind::Ties => "ties",
            MethodKind::DareLerp => "dare_lerp",
            MethodKind::DareTies => "dare_ties",
            MethodKind::DellaLerp => "della_lerp",
            MethodKind::DellaTies => "della_ties",
            MethodKind::ModelStock => "model_stock",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Whether the rule works on task vectors relative to a base checkpoint.
    pub fn requires_base(self) -> bool {
        matches!(
            self,
            MethodKind::TaskArithmetic
                | MethodKind::Ties
                | MethodKind::DareLerp
                | MethodKind::DareTies
                | MethodKind::DellaLerp
                | MethodKind::DellaTies
                | MethodKind::ModelStock
        )
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A merge rule together with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeMethod {
    Karcher(KarcherConfig),
    Lerp,
    Slerp {
        t: f64,
    },
    Multislerp,
    TaskArithmetic {
        lambda: f64,
    },
    Ties {
        density: f64,
    },
    Dare {
        drop_rate: f64,
        combine: Combine,
        density: Option<f64>,
    },
    Della {
        drop_rate: f64,
        window: f64,
        combine: Combine,
        density: Option<f64>,
    },
    ModelStock,
}

impl MergeMethod {
    /// `kind` with its documented default hyperparameters.
    pub fn with_defaults(kind: MethodKind) -> Self {
        let spec = SparsifySpec::default();
        match kind {
            MethodKind::Karcher => MergeMethod::Karcher(KarcherConfig::default()),
            MethodKind::Lerp => MergeMethod::Lerp,
            MethodKind::Slerp => MergeMethod::Slerp { t: 0.5 },
            MethodKind::Multislerp => MergeMethod::Multislerp,
            MethodKind::TaskArithmetic => MergeMethod::TaskArithmetic { lambda: 1.0 },
            MethodKind::Ties => MergeMethod::Ties {
                density: spec.density,
            },
            MethodKind::DareLerp | MethodKind::DareTies => MergeMethod::Dare {
                drop_rate: spec.drop_rate,
                combine: combine_of(kind),
                density: None,
            },
            MethodKind::DellaLerp | MethodKind::DellaTies => MergeMethod::Della {
                drop_rate: spec.drop_rate,
                window: spec.della_window,
                combine: combine_of(kind),
                density: None,
            },
            MethodKind::ModelStock => MergeMethod::ModelStock,
        }
    }

    pub fn kind(&self) -> MethodKind {
        match self {
            MergeMethod::Karcher(_) => MethodKind::Karcher,
            MergeMethod::Lerp => MethodKind::Lerp,
            MergeMethod::Slerp { .. } => MethodKind::Slerp,
            MergeMethod::Multislerp => MethodKind::Multislerp,
            MergeMethod::TaskArithmetic { .. } => MethodKind::TaskArithmetic,
            MergeMethod::Ties { .. } => MethodKind::Ties,
            MergeMethod::Dare {
                combine: Combine::Lerp,
                ..
            } => MethodKind::DareLerp,
            MergeMethod::Dare { .. } => MethodKind::DareTies,
            MergeMethod::Della {
                combine: Combine::Lerp,
                ..
            } => MethodKind::DellaLerp,
            MergeMethod::Della { .. } => MethodKind::DellaTies,
            MergeMethod::ModelStock => MethodKind::ModelStock,
        }
    }

    /// Check the source count, base presence and parameter ranges.
    pub fn validate(&self, sources: usize, has_base: bool) -> Result<()> {
        let kind = self.kind();
        if sources == 0 {
            return Err(Error::InvalidArgument(format!(
                "{kind} requires at least 1 model"
            )));
        }
        match self {
            MergeMethod::Slerp { t } => {
                if sources != 2 {
                    return Err(Error::InvalidArgument(format!(
                        "slerp requires exactly 2 models, got {sources}"
                    )));
                }
                if !(0.0..=1.0).contains(t) {
                    return Err(Error::InvalidArgument(format!(
                        "t must lie in [0, 1], got {t}"
                    )));
                }
            }
            MergeMethod::ModelStock if sources < 2 => {
                return Err(Error::InvalidArgument(format!(
                    "model_stock requires a base model plus at least 2 models, got {sources}"
                )));
            }
            MergeMethod::Karcher(cfg) => cfg.validate()?,
            MergeMethod::Ties { density } => check_unit("density", *density)?,
            MergeMethod::Dare {
                drop_rate, density, ..
            } => {
                sparsify(*drop_rate, 0.0).validate()?;
                if let Some(d) = density {
                    check_unit("density", *d)?;
                }
            }
            MergeMethod::Della {
                drop_rate,
                window,
                density,
                ..
            } => {
                sparsify(*drop_rate, *window).validate()?;
                if let Some(d) = density {
                    check_unit("density", *d)?;
                }
            }
            MergeMethod::TaskArithmetic { lambda } if !lambda.is_finite() => {
                return Err(Error::InvalidArgument(format!(
                    "lambda must be finite, got {lambda}"
                )));
            }
            _ => {}
        }
        if kind.requires_base() && !has_base {
            return Err(Error::InvalidArgument(format!(
                "{kind} requires a base_model"
            )));
        }
        Ok(())
    }
}

fn combine_of(kind: MethodKind) -> Combine {
    match kind {
        MethodKind::DareTies | MethodKind::DellaTies => Combine::Ties,
        _ => Combine::Lerp,
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "{name} must lie in (0, 1], got {v}"
        )));
    }
    Ok(())
}

fn sparsify(drop_rate: f64, window: f64) -> SparsifySpec {
    SparsifySpec {
        density: 1.0,
        drop_rate,
        della_window: window,
        seed: 0,
    }
}

/// Everything needed to produce one merged checkpoint.
#[derive(Debug)]
pub struct MergeJob {
    pub sources: Vec<CheckpointHandle>,
    pub base: Option<CheckpointHandle>,
    /// Raw source weights; normalized to sum to one.
    pub weights: Vec<f64>,
    pub method: MergeMethod,
    pub seed: u64,
    pub output: PathBuf,
    /// Storage dtype of the output; `None` keeps the first source's dtype per tensor.
    pub output_dtype: Option<DType>,
    pub precision: Precision,
    /// Abort on any alignment mismatch or per-tensor failure.
    pub strict: bool,
    pub clamp_overflow: bool,
    /// Worker count; `None` uses every logical core.
    pub threads: Option<usize>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSummary {
    pub name: String,
    pub iterations: Option<usize>,
    pub residual: Option<f64>,
    pub converged: Option<bool>,
    pub norm_in: Vec<f64>,
    pub norm_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedTensor {
    pub name: String,
    pub reason: String,
}

/// Outcome of [`run_merge`]. `wall_ms` is the only non-deterministic field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeSummary {
    pub method: MethodKind,
    pub parameters: MergeMethod,
    pub seed: u64,
    pub weights: Vec<f64>,
    pub tensors_merged: usize,
    pub tensors_skipped: usize,
    pub skipped: Vec<SkippedTensor>,
    pub per_tensor: Vec<TensorSummary>,
    pub alignment: AlignmentReport,
    pub wall_ms: u64,
}

impl MergeSummary {
    /// JSON with `wall_ms` zeroed, suitable for byte comparison between runs.
    pub fn deterministic_json(&self) -> String {
        let mut copy = self.clone();
        copy.wall_ms = 0;
        serde_json::to_string_pretty(&copy).expect("summary serializes")
    }
}

enum Outcome {
    Merged {
        data: Vec<f64>,
        stats: Option<SolverStats>,
        norm_in: Vec<f64>,
    },
    Copied {
        data: Vec<f64>,
        reason: String,
    },
}

struct Plan<'a> {
    job: &'a MergeJob,
    alpha: Vec<f64>,
    load: LoadOptions,
}

impl Plan<'_> {
    fn merge_tensor(&self, name: &str) -> Result<Outcome> {
        let job = self.job;
        let sources = job
            .sources
            .iter()
            .map(|h| h.load_tensor_with(name, self.load))
            .collect::<Result<Vec<TensorRecord>>>()?;
        let base = match &job.base {
            Some(h) => Some(h.load_tensor_with(name, self.load)?),
            None => None,
        };
        let refs: Vec<&[f64]> = sources.iter().map(|t| t.data.as_slice()).collect();
        let base_ref = base.as_ref().map(|b| b.data.as_slice());
        let need_base =
            || base_ref.ok_or_else(|| Error::InvalidArgument("base model missing".into()));
        let w = &self.alpha;

        let mut stats = None;
        let mut data = match &job.method {
            MergeMethod::Karcher(cfg) => {
                let (out, s) = merge_karcher(&refs, w, cfg)?;
                if !s.converged {
                    log::warn!(
                        "{name}: karcher mean did not converge after {} iterations (residual {:.3e})",
                        s.iterations,
                        s.residual
                    );
                }
                stats = Some(s);
                out
            }
            MergeMethod::Lerp => merge_lerp(&refs, w)?,
            MergeMethod::Slerp { t } => merge_slerp(refs[0], refs[1], *t)?,
            MergeMethod::Multislerp => merge_multislerp(&refs, w)?,
            MergeMethod::TaskArithmetic { lambda } => {
                merge_task_arithmetic(need_base()?, &refs, w, *lambda)?
            }
            MergeMethod::Ties { density } => merge_ties(need_base()?, &refs, w, *density)?,
            MergeMethod::Dare {
                drop_rate,
                combine,
                density,
            } => merge_dare(
                need_base()?,
                &refs,
                w,
                *drop_rate,
                DropMerge {
                    combine: *combine,
                    density: *density,
                    seed: job.seed,
                    tensor: name,
                },
            )?,
            MergeMethod::Della {
                drop_rate,
                window,
                combine,
                density,
            } => merge_della(
                need_base()?,
                &refs,
                w,
                &sparsify(*drop_rate, *window),
                DropMerge {
                    combine: *combine,
                    density: *density,
                    seed: job.seed,
                    tensor: name,
                },
            )?,
            MergeMethod::ModelStock => merge_model_stock(need_base()?, &refs)?,
        };
        data.iter_mut().for_each(|v| *v = job.precision.round(*v));
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: name.to_string(),
                index,
            });
        }
        Ok(Outcome::Merged {
            data,
            stats,
            norm_in: refs.iter().map(|r| norm(r)).collect(),
        })
    }

    /// Fallback content for a tensor that could not be merged.
    fn copy_tensor(&self, name: &str, reason: String) -> Result<Outcome> {
        let job = self.job;
        let opts = LoadOptions {
            strict_finite: false,
            ..self.load
        };
        let from = match &job.base {
            Some(b)
                if b.info(name).map(|i| &i.shape)
                    == job.sources[0].info(name).map(|i| &i.shape) =>
            {
                b
            }
            _ => &job.sources[0],
        };
        let t = from.load_tensor_with(name, opts)?;
        Ok(Outcome::Copied {
            data: t.data,
            reason,
        })
    }

    fn process(&self, name: &str, mergeable: bool) -> Result<Outcome> {
        if !mergeable {
            log::warn!("{name}: not aligned across checkpoints; copying from the first model");
            return self.copy_tensor(name, "not aligned across checkpoints".into());
        }
        match self.merge_tensor(name) {
            Ok(o) => Ok(o),
            Err(e) if self.job.strict => Err(e.in_tensor(name)),
            Err(e) => {
                log::warn!("{name}: merge failed ({e}); copying original tensor");
                self.copy_tensor(name, e.to_string())
            }
        }
    }
}

/// Merge every aligned tensor of `job.sources` with `job.method` and stream
/// the result to `job.output`.
///
/// Tensors are processed in parallel in bounded batches and written in name
/// order, so the output is identical for any thread count.
pub fn run_merge(job: &MergeJob) -> Result<MergeSummary> {
    let started = Instant::now();
    job.method.validate(job.sources.len(), job.base.is_some())?;
    if job.weights.len() != job.sources.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights given for {} models",
            job.weights.len(),
            job.sources.len()
        )));
    }
    let alpha = normalize_weights(&job.weights)?;

    let mut handles: Vec<&CheckpointHandle> = job.sources.iter().collect();
    handles.extend(job.base.iter());
    let alignment = validate_aligned(&handles);
    if job.strict && !alignment.is_clean() {
        return Err(Error::Alignment(alignment.describe_mismatches()));
    }

    // Output set: every mergeable tensor, plus (permissive) mismatched
    // tensors the first model carries, copied verbatim.
    let first = &job.sources[0];
    let mut names: Vec<(String, bool)> = alignment
        .mergeable
        .iter()
        .map(|n| (n.clone(), true))
        .collect();
    let mut skipped = Vec::new();
    if !job.strict {
        for name in first.names() {
            if alignment
                .mergeable
                .binary_search_by(|m| m.as_str().cmp(name))
                .is_err()
            {
                names.push((name.to_string(), false));
            }
        }
        for m in &alignment.missing {
            if first.info(&m.name).is_none() {
                skipped.push(SkippedTensor {
                    name: m.name.clone(),
                    reason: "absent from the first model; omitted".into(),
                });
            }
        }
        names.sort();
    }

    let layout = names
        .iter()
        .map(|(name, _)| {
            let info = first
                .info(name)
                .expect("output tensors exist in the first model");
            TensorLayout {
                name: name.clone(),
                shape: info.shape.clone(),
                dtype: job.output_dtype.unwrap_or(info.dtype),
            }
        })
        .collect();
    let mut writer = CheckpointWriter::create(
        &job.output,
        layout,
        &job.metadata,
        WriteOptions {
            clamp_overflow: job.clamp_overflow,
        },
    )?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(job.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    let plan = Plan {
        job,
        alpha: alpha.clone(),
        load: LoadOptions {
            precision: job.precision,
            strict_finite: true,
        },
    };

    let mut per_tensor = Vec::new();
    let batch = (pool.current_num_threads() * 2).max(1);
    for chunk in names.chunks(batch) {
        let outcomes: Vec<Result<Outcome>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|(name, mergeable)| plan.process(name, *mergeable))
                .collect()
        });
        for ((name, _), outcome) in chunk.iter().zip(outcomes) {
            match outcome? {
                Outcome::Merged {
                    data,
                    stats,
                    norm_in,
                } => {
                    writer.write_tensor(name, &data)?;
                    log::debug!("merged {name}");
                    per_tensor.push(TensorSummary {
                        name: name.clone(),
                        iterations: stats.map(|s| s.iterations),
                        residual: stats.map(|s| s.residual),
                        converged: stats.map(|s| s.converged),
                        norm_in,
                        norm_out: norm(&data),
                    });
                }
                Outcome::Copied { data, reason } => {
                    writer.write_tensor(name, &data)?;
                    skipped.push(SkippedTensor {
                        name: name.clone(),
                        reason,
                    });
                }
            }
        }
    }
    writer.finish()?;
    skipped.sort_by(|a, b| a.name.cmp(&b.name));

    Ok(MergeSummary {
        method: job.method.kind(),
        parameters: job.method.clone(),
        seed: job.seed,
        weights: alpha,
        tensors_merged: per_tensor.len(),
        tensors_skipped: skipped.len(),
        skipped,
        per_tensor,
        alignment,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}
