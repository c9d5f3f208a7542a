//! Experiment runner: 2D distillation, toy 3D optimisation, metrics, snapshots and reports.

mod backend;
mod config;
mod report;
mod run2d;
mod run3d;
pub mod scenes;

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{Checkpoint, SceneParameters};
use crate::tensor::Tensor;

pub use config::{
    ConditioningSection, ExperimentConfig, InitSection, LossSection, SceneSection, ScheduleSection, SgcSection,
};
pub use backend::{load_png, LoadedBackend, SELF_GUIDANCE_STEPS};
pub use report::{render_tile, report, ReportSummary};
pub use run2d::run_2d_distillation;
pub use run3d::{run_3d_toy, SceneFixture};

/// Per-step metric rows under a fixed header.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.column(name).and_then(|c| c.last().copied())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let columns = reader.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| Error::Report(format!("{}: bad value {f:?}: {e}", path.display()))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }
}

/// Append-only CSV sink that mirrors rows into a [`MetricsTable`].
struct MetricsSink {
    table: MetricsTable,
    writer: Option<csv::Writer<File>>,
}

impl MetricsSink {
    fn new(columns: &[&str], out_dir: Option<&Path>) -> Result<Self> {
        let writer = match out_dir {
            Some(dir) => {
                let mut w = csv::Writer::from_path(dir.join(METRICS_FILE))?;
                w.write_record(columns)?;
                w.flush()?;
                Some(w)
            }
            None => None,
        };
        Ok(Self {
            table: MetricsTable::new(columns),
            writer,
        })
    }

    fn push(&mut self, row: Vec<f64>) -> Result<()> {
        debug_assert_eq!(row.len(), self.table.columns.len());
        if let Some(w) = &mut self.writer {
            w.write_record(row.iter().map(|v| v.to_string()))?;
            w.flush()?;
        }
        self.table.rows.push(row);
        Ok(())
    }
}

/// Named images captured at one step (rows of the snapshot grid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub images: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Distill2d,
    Toy3d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub kind: RunKind,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub metrics: MetricsTable,
    pub snapshots: Vec<Snapshot>,
    pub snapshot_paths: Vec<PathBuf>,
    pub final_params: SceneParameters,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    pub out_dir: Option<PathBuf>,
    /// Final scalar results (distances, correlations).
    pub summary: BTreeMap<String, f64>,
}

/// Inputs that are not part of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Point whose distance to θ is tracked in 2D runs.
    pub target: Option<Tensor>,
    /// Visual tokens v for the configured backend.
    pub visual_tokens: Option<Array2<f64>>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_FILE: &str = "run.json";
pub const SNAPSHOTS_FILE: &str = "snapshots.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LAST_GOOD_FILE: &str = "last_good.json";

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: RunKind,
    pub config_hash: String,
    pub loss: String,
    pub iterations: usize,
    pub wall_clock_secs: f64,
    pub snapshot_paths: Vec<PathBuf>,
    pub summary: BTreeMap<String, f64>,
}

fn prepare_out_dir(dir: Option<&Path>, config: &ExperimentConfig) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir.join("snapshots"))?;
        std::fs::write(dir.join(CONFIG_FILE), config.to_toml()?)?;
    }
    Ok(())
}

/// Save the last finite parameters and turn a failure into the run error.
fn abort_run(
    err: Error,
    step: usize,
    renderer: &str,
    last_good: &SceneParameters,
    out_dir: Option<&Path>,
) -> Error {
    let checkpoint = out_dir.map(|d| d.join(LAST_GOOD_FILE));
    if let Some(path) = &checkpoint {
        let ck = Checkpoint {
            renderer: renderer.to_string(),
            step,
            params: last_good.clone(),
        };
        if let Err(e) = ck.save(path) {
            return e;
        }
    }
    let diverged = match &err {
        Error::NonFinite { .. } | Error::InversionDiverged { .. } => true,
        Error::Backend { source, .. } => matches!(**source, Error::NonFinite { .. }),
        _ => false,
    };
    if diverged {
        Error::RunDiverged { step, checkpoint }
    } else {
        err
    }
}

fn write_snapshot_pngs(dir: &Path, snap: &Snapshot) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (name, image) in &snap.images {
        let path = dir.join("snapshots").join(format!("step_{:05}_{name}.png", snap.step));
        render_tile(image, 64)?.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[allow(clippy::too_many_arguments)]
fn finish_run(
    kind: RunKind,
    config: &ExperimentConfig,
    metrics: MetricsTable,
    snapshots: Vec<Snapshot>,
    final_params: SceneParameters,
    renderer: &str,
    started: std::time::Instant,
    out_dir: Option<&Path>,
    summary: BTreeMap<String, f64>,
) -> Result<RunRecord> {
    let mut snapshot_paths = Vec::new();
    let mut checkpoint = None;
    let wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        for snap in &snapshots {
            snapshot_paths.extend(write_snapshot_pngs(dir, snap)?);
        }
        std::fs::write(dir.join(SNAPSHOTS_FILE), serde_json::to_vec(&snapshots)?)?;
        let path = dir.join(CHECKPOINT_FILE);
        Checkpoint {
            renderer: renderer.to_string(),
            step: config.iterations,
            params: final_params.clone(),
        }
        .save(&path)?;
        checkpoint = Some(path);
        let manifest = RunManifest {
            kind,
            config_hash: config.hash(),
            loss: config.loss.mode.name().to_string(),
            iterations: config.iterations,
            wall_clock_secs,
            snapshot_paths: snapshot_paths.clone(),
            summary: summary.clone(),
        };
        std::fs::write(dir.join(RUN_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    }
    Ok(RunRecord {
        kind,
        config: config.clone(),
        config_hash: config.hash(),
        metrics,
        snapshots,
        snapshot_paths,
        final_params,
        checkpoint,
        wall_clock_secs,
        out_dir: out_dir.map(Path::to_path_buf),
        summary,
    })
}

fn is_snapshot_step(step: usize, config: &ExperimentConfig) -> bool {
    step.is_multiple_of(config.snapshot_every) || step + 1 == config.iterations
}
