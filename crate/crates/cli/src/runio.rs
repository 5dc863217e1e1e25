//! Run directories, persisted ensembles and model loading.

use std::fs;
use std::path::{Path, PathBuf};

use qds_core::checkpoint::Checkpoint;
use qds_core::corrdiff::{make_schedule, Pipeline, ScheduleKind};
use qds_core::data::{Dataset, Normalization, Split};
use qds_core::tensor::Tensor;
use qds_core::unet::UNet;
use qds_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MODEL_CKPT: &str = "model.ckpt";
pub const REGRESSION_CKPT: &str = "regression.ckpt";
pub const ENSEMBLE_META: &str = "ensemble.json";
pub const MEMBERS_FILE: &str = "members.f32";
pub const REGRESSION_FILE: &str = "regression.f32";
pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;

/// Creates the output directory (timestamped under `runs/` when unset),
/// records it in `cfg` and writes `resolved_config.json`.
pub fn prepare_out(cfg: &mut RunConfig) -> Result<PathBuf> {
    let dir = match &cfg.out {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
            PathBuf::from("runs").join(format!("{}-{stamp}", cfg.command))
        }
    };
    fs::create_dir_all(&dir)?;
    cfg.out = Some(dir.clone());
    cfg.write(&dir)?;
    Ok(dir)
}

pub fn data_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .dir
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset given (--data DIR or data.dir)".into()))
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    Dataset::read(&data_dir(cfg)?.join(split.name()))
}

pub fn write_f32(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let name = path
        .file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let bytes = fs::read(path).map_err(|e| Error::Format {
        field: name.clone(),
        reason: e.to_string(),
    })?;
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Format {
            field: name,
            reason: format!(
                "{} bytes, expected {} for shape {shape:?}",
                bytes.len(),
                4 * n
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(shape, data)
}

/// Metadata of a persisted evaluation ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub format_version: u32,
    pub label: String,
    pub run: PathBuf,
    pub stage: String,
    pub hybrid: bool,
    pub split: Split,
    pub members: usize,
    /// Dataset sample index of each stored timestep.
    pub time_ids: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl EnsembleMeta {
    pub fn members_shape(&self) -> [usize; 5] {
        [
            self.time_ids.len(),
            self.members,
            2,
            self.height,
            self.width,
        ]
    }

    pub fn regression_shape(&self) -> [usize; 4] {
        [self.time_ids.len(), 2, self.height, self.width]
    }
}

pub struct StoredEnsemble {
    pub meta: EnsembleMeta,
    /// `[N, M, 2, H, W]`.
    pub members: Tensor,
    /// `[N, 2, H, W]`.
    pub regression: Tensor,
}

impl StoredEnsemble {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(ENSEMBLE_META),
            serde_json::to_string_pretty(&self.meta)? + "\n",
        )?;
        write_f32(&dir.join(MEMBERS_FILE), &self.members)?;
        write_f32(&dir.join(REGRESSION_FILE), &self.regression)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(ENSEMBLE_META)).map_err(|e| Error::Format {
            field: ENSEMBLE_META.into(),
            reason: format!("{}: {e}", dir.display()),
        })?;
        let meta: EnsembleMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            field: ENSEMBLE_META.into(),
            reason: e.to_string(),
        })?;
        if meta.format_version != ENSEMBLE_FORMAT_VERSION {
            return Err(Error::Format {
                field: ENSEMBLE_META.into(),
                reason: format!("unsupported format_version {}", meta.format_version),
            });
        }
        let members = read_f32(&dir.join(MEMBERS_FILE), &meta.members_shape())?;
        let regression = read_f32(&dir.join(REGRESSION_FILE), &meta.regression_shape())?;
        Ok(Self {
            meta,
            members,
            regression,
        })
    }
}

/// Metadata stored in training checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub stage: String,
    pub stats: Normalization,
    #[serde(default)]
    pub schedule_steps: Option<usize>,
    #[serde(default)]
    pub schedule_kind: Option<ScheduleKind>,
}

pub fn model_meta(ck: &Checkpoint) -> Result<ModelMeta> {
    serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Format {
        field: "checkpoint meta".into(),
        reason: e.to_string(),
    })
}

/// A trained run: its label, stage and inference pipeline.
pub struct LoadedRun {
    pub label: String,
    pub stage: String,
    pub pipeline: Pipeline,
}

pub fn run_label(dir: &Path) -> String {
    dir.file_name().map_or_else(
        || dir.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

/// Loads a regression or diffusion run directory.
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let path = dir.join(MODEL_CKPT);
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} has no {MODEL_CKPT}",
            dir.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    let meta = model_meta(&ck)?;
    let pipeline = match meta.stage.as_str() {
        "regression" => Pipeline {
            regression: UNet::from_checkpoint(&ck)?,
            diffusion: None,
            sched: make_schedule(2, ScheduleKind::Linear)?,
            stats: meta.stats,
        },
        "diffusion" => {
            let reg = Checkpoint::load(&dir.join(REGRESSION_CKPT))?;
            let steps = meta.schedule_steps.ok_or_else(|| Error::Format {
                field: "checkpoint meta".into(),
                reason: "diffusion checkpoint lacks schedule_steps".into(),
            })?;
            Pipeline {
                regression: UNet::from_checkpoint(&reg)?,
                diffusion: Some(UNet::from_checkpoint(&ck)?),
                sched: make_schedule(steps, meta.schedule_kind.unwrap_or(ScheduleKind::Linear))?,
                stats: meta.stats,
            }
        }
        other => {
            return Err(Error::Format {
                field: "checkpoint meta".into(),
                reason: format!("unknown stage {other:?}"),
            })
        }
    };
    Ok(LoadedRun {
        label: run_label(dir),
        stage: meta.stage,
        pipeline,
    })
}

/// CSV float formatting: shortest round-trip representation.
pub fn fmt_f64(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}
