//! Run configuration: defaults, JSON config files and dotted-key overrides.
//!
//! Every command resolves one [`RunConfig`] and writes it to
//! `resolved_config.json` in its output directory. Feeding that file back
//! through `qds rerun` replays the command.

use std::fs;
use std::path::{Path, PathBuf};

use qds_core::ansatz::Variant;
use qds_core::corrdiff::ScheduleKind;
use qds_core::data::{FieldSpec, Split};
use qds_core::hybrid::HybridBottleneckConfig;
use qds_core::optim::AdamConfig;
use qds_core::qsim::{Backend, NoiseParams};
use qds_core::unet::UNetConfig;
use qds_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Subcommand this configuration was resolved for.
    pub command: String,
    pub seed: u64,
    /// Output directory; empty means a timestamped directory under `runs/`.
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub regression: NetConfig,
    pub diffusion: DiffusionConfig,
    pub ansatz: AnsatzConfig,
    pub hybrid: HybridConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub backend: BackendConfig,
    pub compare: CompareConfig,
    pub diagnostics: DiagnosticsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory holding `train/`, `val/` and `ood/`.
    pub dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_ood: usize,
    pub size: usize,
    pub gamma: f64,
    pub sigma: f64,
    pub mean_u: f64,
    pub mean_v: f64,
    pub rho: f64,
    pub ood_gamma: f64,
    pub ood_mean_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub widths: Vec<usize>,
    pub bottleneck_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub widths: Vec<usize>,
    pub bottleneck_channels: usize,
    pub time_embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnsatzConfig {
    pub variant: Variant,
    pub n_qubits: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridConfig {
    pub enabled: bool,
    pub n_circuits: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Regression,
    Diffusion,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Stage::Regression),
            "diffusion" => Ok(Stage::Diffusion),
            _ => Err(Error::Config(format!(
                "unknown stage {s:?} (regression, diffusion)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: u64,
    /// Regression run directory the diffusion stage builds on.
    pub regression_run: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub members: usize,
    /// Score only the first `limit` samples of the split.
    pub limit: Option<usize>,
    pub runs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// `exact` or `noisy`.
    pub kind: String,
    pub p_dep: f64,
    pub p_ro: f64,
    pub shots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub run: Option<PathBuf>,
    pub times: usize,
    pub members: usize,
    pub p_dep: Vec<f64>,
    pub p_ro: f64,
    pub shots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Evaluation directories to read ensembles from.
    pub inputs: Vec<PathBuf>,
    pub neighborhoods: Vec<usize>,
    pub quantile: f64,
    pub pdf_bins: usize,
    pub joint_bins: usize,
    pub joint_range: f64,
    pub svg: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = FieldSpec::default();
        Self {
            dir: None,
            n_train: 256,
            n_val: 100,
            n_ood: 100,
            size: s.height,
            gamma: s.gamma,
            sigma: s.sigma,
            mean_u: s.mean_u,
            mean_v: s.mean_v,
            rho: s.rho,
            ood_gamma: 3.0,
            ood_mean_shift: 1.5,
        }
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 8, 16, 16],
            bottleneck_channels: 16,
        }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            schedule: ScheduleKind::Linear,
            widths: vec![8, 8, 16, 16],
            bottleneck_channels: 16,
            time_embed_dim: 32,
        }
    }
}

impl Default for AnsatzConfig {
    fn default() -> Self {
        Self {
            variant: Variant::B,
            n_qubits: 12,
            layers: 2,
        }
    }
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            n_circuits: 1,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            stage: Stage::Regression,
            steps: 500,
            batch: 16,
            lr: adam.lr,
            clip_norm: adam.clip_norm,
            checkpoint_every: 50,
            regression_run: None,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Val,
            members: 4,
            limit: None,
            runs: Vec::new(),
        }
    }
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: "exact".into(),
            p_dep: 0.0,
            p_ro: 0.0,
            shots: 32,
        }
    }
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            run: None,
            times: 20,
            members: 16,
            p_dep: vec![1e-4, 1e-3, 1e-2],
            p_ro: 0.0,
            shots: 32,
        }
    }
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            neighborhoods: qds_core::metrics::DEFAULT_NEIGHBORHOODS.to_vec(),
            quantile: 0.99,
            pdf_bins: 40,
            joint_bins: 32,
            joint_range: 12.0,
            svg: true,
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with an optional JSON config file, then with
    /// `key.path = value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            let user: Value = serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("config {} is not valid JSON: {e}", path.display()))
            })?;
            merge(&mut value, user, "")?;
        }
        for (key, raw) in overrides {
            set_dotted(&mut value, key, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        Ok(cfg)
    }

    pub fn field_spec(&self) -> FieldSpec {
        let d = &self.data;
        FieldSpec {
            height: d.size,
            width: d.size,
            gamma: d.gamma,
            sigma: d.sigma,
            mean_u: d.mean_u,
            mean_v: d.mean_v,
            rho: d.rho,
            seed: self.seed,
        }
    }

    pub fn ood_spec(&self) -> FieldSpec {
        self.field_spec()
            .shifted(self.data.ood_gamma, self.data.ood_mean_shift)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            clip_norm: self.train.clip_norm,
            ..AdamConfig::default()
        }
    }

    pub fn regression_unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            out_channels: 2,
            widths: self.regression.widths.clone(),
            bottleneck_channels: self.regression.bottleneck_channels,
            time_embed_dim: 0,
            hybrid: None,
        }
    }

    pub fn diffusion_unet(&self) -> UNetConfig {
        let d = &self.diffusion;
        UNetConfig {
            in_channels: qds_core::corrdiff::DIFFUSION_IN_CHANNELS,
            out_channels: 2,
            widths: d.widths.clone(),
            bottleneck_channels: d.bottleneck_channels,
            time_embed_dim: d.time_embed_dim,
            hybrid: self.hybrid.enabled.then_some(HybridBottleneckConfig {
                n_qubits: self.ansatz.n_qubits,
                n_circuits: self.hybrid.n_circuits,
                variant: self.ansatz.variant,
                layers: self.ansatz.layers,
                total_channels: d.bottleneck_channels,
            }),
        }
    }

    pub fn backend(&self) -> Result<Backend> {
        let b = &self.backend;
        match b.kind.as_str() {
            "exact" => Ok(Backend::Exact),
            "noisy" => {
                let p = NoiseParams {
                    p_dep: b.p_dep,
                    p_ro: b.p_ro,
                    shots: b.shots,
                    seed: self.seed,
                };
                p.validate()?;
                Ok(Backend::Noisy(p))
            }
            other => Err(Error::Config(format!(
                "unknown backend {other:?} (exact, noisy)"
            ))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(RESOLVED_CONFIG), self.to_json()?)?;
        Ok(())
    }
}

fn merge(base: &mut Value, user: Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let here = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v,
                    None => return Err(Error::Config(format!("unknown config key {here:?}"))),
                }
            }
            Ok(())
        }
        (b, u) => {
            *b = u;
            Ok(())
        }
    }
}

/// Parses an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dotted(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!(
                "config key {key:?} descends into a non-object"
            )));
        };
        let Some(next) = map.get_mut(*part) else {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        };
        if i + 1 == parts.len() {
            let mut v = parse_value(raw);
            // numeric-looking strings stay strings where the default is a string
            if next.is_string() && !v.is_string() && !v.is_null() {
                v = Value::String(raw.to_string());
            }
            *next = v;
            return Ok(());
        }
        node = next;
    }
    Ok(())
}

/// Splits `--a.b value` and `--a.b=value` pairs out of an argument list.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let is_dotted =
            a.starts_with("--") && a[2..].split('=').next().is_some_and(|k| k.contains('.'));
        if !is_dotted {
            rest.push(a);
            continue;
        }
        let body = &a[2..];
        if let Some((k, v)) = body.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| Error::Config(format!("override --{body} needs a value")))?;
            overrides.push((body.to_string(), v));
        }
    }
    Ok((rest, overrides))
}
