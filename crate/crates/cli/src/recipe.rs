//! Merge recipes: a TOML document naming the method, the models and their
//! weights, an optional base model, hyperparameters and the output file.
//!
//! ```toml
//! method = "karcher"
//! base_model = "base.safetensors"
//!
//! [[models]]
//! path = "expert_a.safetensors"
//!
//! [[models]]
//! path = "expert_b.safetensors"
//! weight = 2.0
//!
//! [parameters]
//! max_iter = 100
//! seed = 7
//!
//! [output]
//! path = "merged.safetensors"
//! dtype = "bf16"
//! ```

use std::path::{Path, PathBuf};

use karcher_merge::merge::{MergeMethod, MethodKind};
use karcher_merge::sphere::KarcherConfig;
use karcher_merge::tensor_io::{DType, Precision};
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecipe {
    method: String,
    models: Vec<RawModel>,
    base_model: Option<PathBuf>,
    #[serde(default)]
    parameters: RawParameters,
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    path: PathBuf,
    #[serde(default = "unit_weight")]
    weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParameters {
    t: Option<f64>,
    density: Option<f64>,
    drop_rate: Option<f64>,
    window: Option<f64>,
    lambda: Option<f64>,
    eta: Option<f64>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    seed: Option<u64>,
    precision: Option<String>,
    strict: Option<bool>,
}

impl RawParameters {
    /// Method-specific parameters that were set, by name.
    fn given(&self) -> Vec<&'static str> {
        [
            ("t", self.t.is_some()),
            ("density", self.density.is_some()),
            ("drop_rate", self.drop_rate.is_some()),
            ("window", self.window.is_some()),
            ("lambda", self.lambda.is_some()),
            ("eta", self.eta.is_some()),
            ("tol", self.tol.is_some()),
            ("max_iter", self.max_iter.is_some()),
        ]
        .into_iter()
        .filter_map(|(k, set)| set.then_some(k))
        .collect()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    path: PathBuf,
    dtype: Option<String>,
    #[serde(default)]
    clamp_overflow: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub path: PathBuf,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub path: PathBuf,
    /// `None` keeps each tensor's dtype from the first model.
    pub dtype: Option<DType>,
    pub clamp_overflow: bool,
}

/// A validated merge recipe with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub models: Vec<ModelSpec>,
    pub base_model: Option<PathBuf>,
    pub seed: u64,
    pub precision: Precision,
    pub strict: bool,
    pub output: OutputSpec,
}

impl MergeRecipe {
    pub fn weights(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.weight).collect()
    }
}

/// Parameters each method accepts besides `seed`, `precision`, `strict`.
fn accepted(kind: MethodKind) -> &'static [&'static str] {
    match kind {
        MethodKind::Karcher => &["eta", "tol", "max_iter"],
        MethodKind::Slerp => &["t"],
        MethodKind::TaskArithmetic => &["lambda"],
        MethodKind::Ties => &["density"],
        MethodKind::DareLerp => &["drop_rate"],
        MethodKind::DareTies => &["drop_rate", "density"],
        MethodKind::DellaLerp => &["drop_rate", "window"],
        MethodKind::DellaTies => &["drop_rate", "window", "density"],
        MethodKind::Lerp | MethodKind::Multislerp | MethodKind::ModelStock => &[],
    }
}

fn build_method(kind: MethodKind, p: &RawParameters) -> MergeMethod {
    let method = MergeMethod::with_defaults(kind);
    match method {
        MergeMethod::Karcher(d) => MergeMethod::Karcher(KarcherConfig {
            eta: p.eta.unwrap_or(d.eta),
            tol: p.tol.unwrap_or(d.tol),
            max_iter: p.max_iter.unwrap_or(d.max_iter),
            ..d
        }),
        MergeMethod::Slerp { t } => MergeMethod::Slerp {
            t: p.t.unwrap_or(t),
        },
        MergeMethod::TaskArithmetic { lambda } => MergeMethod::TaskArithmetic {
            lambda: p.lambda.unwrap_or(lambda),
        },
        MergeMethod::Ties { density } => MergeMethod::Ties {
            density: p.density.unwrap_or(density),
        },
        MergeMethod::Dare {
            drop_rate,
            combine,
            density,
        } => MergeMethod::Dare {
            drop_rate: p.drop_rate.unwrap_or(drop_rate),
            combine,
            density: p.density.or(density),
        },
        MergeMethod::Della {
            drop_rate,
            window,
            combine,
            density,
        } => MergeMethod::Della {
            drop_rate: p.drop_rate.unwrap_or(drop_rate),
            window: p.window.unwrap_or(window),
            combine,
            density: p.density.or(density),
        },
        other => other,
    }
}

fn resolve(dir: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        dir.join(p)
    }
}

/// Parse `value` as a TOML value, falling back to a bare string.
fn override_value(value: &str) -> toml::Value {
    value
        .parse::<toml::Value>()
        .unwrap_or_else(|_| toml::Value::String(value.to_string()))
}

/// Apply one `dotted.key=value` override to a parsed document. Numeric
/// segments index into arrays, e.g. `models.1.weight=2`.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), String> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override {assignment:?} is not of the form key=value"))?;
    let segments: Vec<&str> = key.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(format!("override key {key:?} has an empty segment"));
    }
    let (last, parents) = segments.split_last().expect("non-empty key");
    let mut node: &mut toml::Value = doc
        .entry(segments[0])
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    if parents.is_empty() {
        *node = override_value(value.trim());
        return Ok(());
    }
    for seg in parents.iter().skip(1).chain(std::iter::once(last)) {
        node = match node {
            toml::Value::Table(t) => t
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| format!("override key {key:?}: {seg:?} is not an array index"))?;
                let len = a.len();
                a.get_mut(i).ok_or_else(|| {
                    format!("override key {key:?}: index {i} out of range ({len} entries)")
                })?
            }
            _ => {
                return Err(format!(
                    "override key {key:?}: {seg:?} is not inside a table"
                ))
            }
        };
    }
    *node = override_value(value.trim());
    Ok(())
}

/// Parse and validate a recipe. Relative paths are resolved against
/// `base_dir`; `overrides` are `key=value` assignments applied before
/// validation.
pub fn parse_recipe(
    text: &str,
    base_dir: &Path,
    overrides: &[String],
) -> Result<MergeRecipe, String> {
    let raw: RawRecipe = if overrides.is_empty() {
        toml::from_str(text).map_err(|e| e.to_string())?
    } else {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        doc.try_into().map_err(|e: toml::de::Error| e.to_string())?
    };

    let kind = MethodKind::parse(&raw.method).ok_or_else(|| {
        let known: Vec<&str> = MethodKind::ALL.iter().map(|k| k.as_str()).collect();
        format!(
            "unknown method {:?}; expected one of {}",
            raw.method,
            known.join(", ")
        )
    })?;
    let allowed = accepted(kind);
    if let Some(bad) = raw
        .parameters
        .given()
        .into_iter()
        .find(|k| !allowed.contains(k))
    {
        return Err(format!("parameter `{bad}` does not apply to method {kind}"));
    }
    for (i, m) in raw.models.iter().enumerate() {
        if !(m.weight.is_finite() && m.weight >= 0.0) {
            return Err(format!(
                "models[{i}].weight must be finite and non-negative, got {}",
                m.weight
            ));
        }
    }
    if !raw.models.is_empty() && raw.models.iter().all(|m| m.weight == 0.0) {
        return Err("model weights are all zero".into());
    }
    let precision = match &raw.parameters.precision {
        Some(s) => Precision::parse(s)
            .ok_or_else(|| format!("parameter `precision`: unknown value {s:?}"))?,
        None => Precision::default(),
    };
    let dtype = match &raw.output.dtype {
        Some(s) => {
            Some(DType::parse(s).ok_or_else(|| format!("output.dtype: unknown dtype {s:?}"))?)
        }
        None => None,
    };

    let method = build_method(kind, &raw.parameters);
    method
        .validate(raw.models.len(), raw.base_model.is_some())
        .map_err(|e| match e {
            karcher_merge::Error::InvalidArgument(m) => m,
            e => e.to_string(),
        })?;

    Ok(MergeRecipe {
        method,
        models: raw
            .models
            .into_iter()
            .map(|m| ModelSpec {
                path: resolve(base_dir, m.path),
                weight: m.weight,
            })
            .collect(),
        base_model: raw.base_model.map(|p| resolve(base_dir, p)),
        seed: raw.parameters.seed.unwrap_or(0),
        precision,
        strict: raw.parameters.strict.unwrap_or(true),
        output: OutputSpec {
            path: resolve(base_dir, raw.output.path),
            dtype,
            clamp_overflow: raw.output.clamp_overflow,
        },
    })
}

/// Read and parse the recipe at `path`.
pub fn load_recipe(path: &Path, overrides: &[String]) -> Result<MergeRecipe> {
    let text = std::fs::read_to_string(path).map_err(|e| karcher_merge::Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    parse_recipe(&text, dir, overrides).map_err(|message| CliError::Recipe {
        path: path.to_path_buf(),
        message,
    })
}
