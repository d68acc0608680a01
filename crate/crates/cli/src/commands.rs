use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use karcher_merge::diagnostics::{
    load_activation_layers, toy_forward_collect, DenseLayer, DiagnosticsReport, Nonlinearity,
};
use karcher_merge::merge::{run_merge, MergeJob, MergeSummary};
use karcher_merge::rng::keyed_stream;
use karcher_merge::tensor_io::{CheckpointHandle, LoadOptions, Precision};
use karcher_merge::Error;
use nalgebra::DMatrix;
use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::recipe::load_recipe;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

/// `<dir>/<stem>.summary.json` next to the merged checkpoint.
pub fn summary_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().unwrap_or_default().to_string_lossy();
    output.with_file_name(format!("{stem}.summary.json"))
}

#[derive(Debug, Clone, Default)]
pub struct MergeArgs {
    pub recipe: PathBuf,
    pub overrides: Vec<String>,
    pub threads: Option<usize>,
    pub precision: Option<Precision>,
}

#[derive(Debug)]
pub struct MergeOutcome {
    pub summary: MergeSummary,
    pub checkpoint: PathBuf,
    pub summary_path: PathBuf,
}

/// Run the recipe, writing the merged checkpoint and its summary JSON.
pub fn cmd_merge(args: &MergeArgs) -> Result<MergeOutcome> {
    let recipe = load_recipe(&args.recipe, &args.overrides)?;
    let precision = args.precision.unwrap_or(recipe.precision);
    let load = LoadOptions {
        precision,
        strict_finite: true,
    };
    let sources = recipe
        .models
        .iter()
        .map(|m| CheckpointHandle::open_with(&m.path, load))
        .collect::<karcher_merge::Result<Vec<_>>>()?;
    let base = match &recipe.base_model {
        Some(p) => Some(CheckpointHandle::open_with(p, load)?),
        None => None,
    };
    let metadata = BTreeMap::from([
        ("merge_method".to_string(), recipe.method.kind().to_string()),
        ("merge_seed".to_string(), recipe.seed.to_string()),
    ]);
    let job = MergeJob {
        sources,
        base,
        weights: recipe.weights(),
        method: recipe.method.clone(),
        seed: recipe.seed,
        output: recipe.output.path.clone(),
        output_dtype: recipe.output.dtype,
        precision,
        strict: recipe.strict,
        clamp_overflow: recipe.output.clamp_overflow,
        threads: args.threads,
        metadata,
    };
    let summary = run_merge(&job)?;
    let summary_path = summary_path(&recipe.output.path);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&summary_path, &json)?;
    log::info!(
        "merged {} tensors ({} skipped) into {}",
        summary.tensors_merged,
        summary.tensors_skipped,
        recipe.output.path.display()
    );
    Ok(MergeOutcome {
        summary,
        checkpoint: recipe.output.path,
        summary_path,
    })
}

/// Toy network description for `diagnose --toy-forward`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyForwardSpec {
    pub layers: Vec<ToyLayer>,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub input_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLayer {
    /// Tensor name of the `[out, in]` weight.
    pub weight: String,
    pub bias: Option<String>,
}

fn default_samples() -> usize {
    256
}

#[derive(Debug, Clone)]
pub struct DiagnoseArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub draws: usize,
    pub seed: u64,
    pub toy_forward: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

fn exact() -> LoadOptions {
    LoadOptions {
        precision: Precision::F64,
        strict_finite: true,
    }
}

fn toy_activations(
    weights: &Path,
    spec_path: &Path,
) -> Result<Vec<karcher_merge::diagnostics::ActivationMatrix>> {
    let spec_err = |message: String| CliError::Spec {
        what: "toy-forward spec",
        path: spec_path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: ToyForwardSpec = toml::from_str(&text).map_err(|e| spec_err(e.to_string()))?;
    if spec.layers.is_empty() {
        return Err(spec_err("at least one layer is required".into()));
    }
    let handle = CheckpointHandle::open_with(weights, exact())?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let w = handle.load_tensor(&l.weight)?;
        let [rows, cols] = w.shape[..] else {
            return Err(spec_err(format!(
                "weight {} must be 2-D, got shape {:?}",
                l.weight, w.shape
            )));
        };
        let bias = match &l.bias {
            Some(b) => Some(handle.load_tensor(b)?.data),
            None => None,
        };
        layers.push(DenseLayer {
            weight: DMatrix::from_row_slice(rows, cols, &w.data),
            bias,
        });
    }
    let d0 = layers[0].weight.ncols();
    let mut rng = keyed_stream(spec.input_seed, "toy-forward/inputs", 0);
    let inputs = DMatrix::from_fn(spec.samples, d0, |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    Ok(toy_forward_collect(&layers, &inputs, spec.nonlinearity)?)
}

/// Compute the diagnostics report and write it as JSON (and CSV when asked).
pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<DiagnosticsReport> {
    let layers = match &args.toy_forward {
        Some(spec) => toy_activations(&args.input, spec)?,
        None => load_activation_layers(&args.input, exact())?,
    };
    for l in &layers {
        log::info!("{}: {} samples x {} features", l.layer, l.n(), l.d());
    }
    let report = DiagnosticsReport::build(&layers, args.draws, args.seed, Precision::F64)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&args.out, &json)?;
    if let Some(csv) = &args.csv {
        write_file(csv, &report.to_csv())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectRow {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub norm: f64,
}

pub fn inspect_rows(path: &Path) -> Result<Vec<InspectRow>> {
    let handle = CheckpointHandle::open_with(
        path,
        LoadOptions {
            precision: Precision::F64,
            strict_finite: false,
        },
    )?;
    let names: Vec<String> = handle.names().map(str::to_string).collect();
    names
        .into_iter()
        .map(|name| {
            let t = handle.load_tensor(&name)?;
            Ok(InspectRow {
                dtype: t.dtype.to_string(),
                norm: t.norm(),
                shape: t.shape,
                name,
            })
        })
        .collect()
}

/// Render the tensor table of a checkpoint, as text or JSON.
pub fn cmd_inspect(path: &Path, json: bool) -> Result<String> {
    let rows = inspect_rows(path)?;
    if json {
        return Ok(serde_json::to_string_pretty(&rows).expect("rows serialize"));
    }
    let shapes: Vec<String> = rows.iter().map(|r| format!("{:?}", r.shape)).collect();
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
    let shape_w = shapes.iter().map(String::len).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:name_w$}  {:5}  {:shape_w$}  norm\n",
        "name", "dtype", "shape"
    );
    for (r, s) in rows.iter().zip(&shapes) {
        writeln!(
            out,
            "{:name_w$}  {:5}  {:shape_w$}  {:.9e}",
            r.name, r.dtype, s, r.norm
        )
        .expect("write to string");
    }
    Ok(out)
}
