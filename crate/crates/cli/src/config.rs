//! Experiment configuration: JSON file plus `--set key.path=value`
//! overrides, checked for unknown keys and semantic violations.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use slr_core::acquisition::DatasetConfig;
use slr_core::analysis::Injection;
use slr_core::cg::CgConfig;
use slr_core::lifting::{LiftingConfig, Stacking, Weighting};
use slr_core::slr::{IrlsConfig, SplitConfig};
use slr_core::unrolled::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Synth,
    Irls,
    Calib,
    Split,
    Train,
    Recon,
    Probe,
    Metrics,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Synth => "synth",
            Pipeline::Irls => "irls",
            Pipeline::Calib => "calib",
            Pipeline::Split => "split",
            Pipeline::Train => "train",
            Pipeline::Recon => "recon",
            Pipeline::Probe => "probe",
            Pipeline::Metrics => "metrics",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `manifest.json` written by `synth`.
    pub manifest: Option<PathBuf>,
    /// Split reconstructed, probed or scored.
    pub split: String,
    pub train_split: String,
    pub val_split: String,
    /// Use only the first `limit` examples of each split.
    pub limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            split: "test".into(),
            train_split: "train".into(),
            val_split: "val".into(),
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    pub lambda: f64,
    /// Singular values below `rank_tol * sigma_max` span the null space.
    pub rank_tol: f64,
    pub lifting: LiftingConfig,
    pub cg: CgConfig,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-6,
            rank_tol: 1e-6,
            lifting: LiftingConfig {
                stacking: Stacking::HorizontalMultichannel,
                window: [5, 5],
            },
            cg: CgConfig {
                max_iters: 200,
                tol: 1e-10,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QSourceKind {
    Recompute,
    Calibrated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRunConfig {
    pub solver: SplitConfig,
    pub q_source: QSourceKind,
    /// Used with `q_source = calibrated`.
    pub rank_tol: f64,
}

impl Default for SplitRunConfig {
    fn default() -> Self {
        Self {
            solver: SplitConfig::default(),
            q_source: QSourceKind::Recompute,
            rank_tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub layers: usize,
    pub filters: usize,
    pub kernel: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            filters: 16,
            kernel: 3,
        }
    }
}

/// Unset fields fall back to the checkpoint (when one is given) or to the
/// defaults of a fresh model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub weighting: Option<Weighting>,
    pub cnn: Option<CnnConfig>,
    /// Present for H-DSLR.
    pub image_cnn: Option<CnnConfig>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeOperatorKind {
    /// The `N_k` branch of `model.checkpoint`.
    Model,
    /// Circular bank of annihilating filters of a drawn edge phantom.
    Annihilator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeRunConfig {
    pub operator: ProbeOperatorKind,
    pub sigma: f64,
    pub realizations: usize,
    pub subtract_reference: bool,
    pub injection: Injection,
    /// Index into `data.split` of the reference image (model operator).
    pub example: usize,
    /// Grid of the drawn phantom (annihilator operator).
    pub shape: [usize; 2],
    /// Edge threshold relative to the peak pixel norm (model operator).
    pub edge_tol: f64,
}

impl Default for ProbeRunConfig {
    fn default() -> Self {
        Self {
            operator: ProbeOperatorKind::Model,
            sigma: 0.01,
            realizations: 1000,
            subtract_reference: true,
            injection: Injection::Weighted,
            example: 0,
            shape: [32, 32],
            edge_tol: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricsSource {
    ZeroFilled,
    /// `{id}_recon.cten` files in `metrics.reconstructions`.
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub source: MetricsSource,
    pub reconstructions: Option<PathBuf>,
    pub label: String,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            source: MetricsSource::ZeroFilled,
            reconstructions: None,
            label: "zero-filled".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write magnitude and error-map PGMs for each reconstruction.
    pub images: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { images: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub pipeline: Option<Pipeline>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub output: OutputConfig,
    pub dataset: DatasetConfig,
    pub data: DataConfig,
    pub irls: IrlsConfig,
    pub calib: CalibConfig,
    pub split: SplitRunConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeRunConfig,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pipeline: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
            output: OutputConfig::default(),
            dataset: DatasetConfig::default(),
            data: DataConfig::default(),
            irls: IrlsConfig::default(),
            calib: CalibConfig::default(),
            split: SplitRunConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeRunConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Parses `key.path=value`; the value is read as JSON and falls back to a
/// plain string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), String> {
    let (key, raw) = s.split_once('=').ok_or_else(|| format!("override `{s}` is not of the form key=value"))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(format!("override key `{key}` has an empty component"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

pub fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<(), String> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Map::new());
            } else {
                return Err(format!("cannot set `{}`: `{}` is not an object", path.join("."), path[..i].join(".")));
            }
        }
        let obj = node.as_object_mut().expect("checked above");
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

/// Every key of `user` that the schema (given by the serialized defaults)
/// does not know. Subtrees whose default is `null` are left to serde.
pub fn unknown_keys(user: &Value, schema: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(s)) = (user, schema) else {
        return;
    };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match s.get(k) {
            None => out.push(format!("unknown key `{path}`")),
            Some(sv) => unknown_keys(v, sv, &path, out),
        }
    }
}

/// Reads the config file (if any), applies overrides and deserializes,
/// collecting every problem found.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, Vec<String>> {
    let mut errs = Vec::new();
    let mut root = match path {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(text) => match serde_json::from_str::<Value>(&text) {
                Ok(v) if v.is_object() => v,
                Ok(_) => return Err(vec![format!("{}: top level must be a JSON object", p.display())]),
                Err(e) => return Err(vec![format!("{}: {e}", p.display())]),
            },
            Err(e) => return Err(vec![format!("{}: {e}", p.display())]),
        },
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        match parse_override(o).and_then(|(p, v)| apply_override(&mut root, &p, v)) {
            Ok(()) => {}
            Err(e) => errs.push(e),
        }
    }
    let schema = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
    unknown_keys(&root, &schema, "", &mut errs);
    if !errs.is_empty() {
        return Err(errs);
    }
    serde_json::from_value(overlay(schema, root)).map_err(|e| vec![e.to_string()])
}

/// `user` laid over `defaults`, recursing where both sides are objects.
fn overlay(defaults: Value, user: Value) -> Value {
    match (defaults, user) {
        (Value::Object(mut d), Value::Object(u)) => {
            for (k, v) in u {
                let merged = match d.remove(&k) {
                    Some(dv) => overlay(dv, v),
                    None => v,
                };
                d.insert(k, merged);
            }
            Value::Object(d)
        }
        (_, u) => u,
    }
}

/// Semantic checks for `pipeline`, listing every violation.
pub fn validate(cfg: &ExperimentConfig, pipeline: Pipeline) -> Vec<String> {
    let mut errs = Vec::new();
    if let Some(p) = cfg.pipeline {
        if p != pipeline {
            errs.push(format!("config is for pipeline `{}` but `{}` was requested", p.name(), pipeline.name()));
        }
    }
    if pipeline != Pipeline::Synth && cfg.data.manifest.is_none() {
        if !(pipeline == Pipeline::Probe && cfg.probe.operator == ProbeOperatorKind::Annihilator) {
            errs.push("data.manifest is required".into());
        }
    }
    if cfg.data.limit == Some(0) {
        errs.push("data.limit must be >= 1".into());
    }
    match pipeline {
        Pipeline::Synth => errs.extend(cfg.dataset.validate()),
        Pipeline::Irls => errs.extend(cfg.irls.validate()),
        Pipeline::Calib => {
            if !(cfg.calib.lambda > 0.0) {
                errs.push("calib.lambda must be positive".into());
            }
            if !(cfg.calib.rank_tol > 0.0 && cfg.calib.rank_tol < 1.0) {
                errs.push("calib.rank_tol must lie in (0, 1)".into());
            }
            check_window(&cfg.calib.lifting, "calib.lifting", &mut errs);
            if cfg.calib.cg.max_iters == 0 || !(cfg.calib.cg.tol > 0.0) {
                errs.push("calib.cg needs max_iters >= 1 and tol > 0".into());
            }
        }
        Pipeline::Split => {
            errs.extend(cfg.split.solver.validate());
            if !(cfg.split.rank_tol > 0.0 && cfg.split.rank_tol < 1.0) {
                errs.push("split.rank_tol must lie in (0, 1)".into());
            }
        }
        Pipeline::Train => {
            errs.extend(cfg.train.validate());
            validate_model(&cfg.model, &mut errs);
            if cfg.model.checkpoint.is_some() {
                errs.push("model.checkpoint is not used by train; checkpoints go to <output_dir>/checkpoint".into());
            }
        }
        Pipeline::Recon => validate_model(&cfg.model, &mut errs),
        Pipeline::Probe => {
            let p = &cfg.probe;
            if !(p.sigma > 0.0 && p.sigma.is_finite()) {
                errs.push("probe.sigma must be positive".into());
            }
            if p.realizations == 0 {
                errs.push("probe.realizations must be >= 1".into());
            }
            match p.operator {
                ProbeOperatorKind::Model if cfg.model.checkpoint.is_none() => {
                    errs.push("probe.operator = model needs model.checkpoint".into())
                }
                ProbeOperatorKind::Annihilator if p.shape[0] < 16 || p.shape[1] < 16 => {
                    errs.push("probe.shape must be at least 16x16".into())
                }
                _ => {}
            }
        }
        Pipeline::Metrics => {
            if cfg.metrics.source == MetricsSource::Files && cfg.metrics.reconstructions.is_none() {
                errs.push("metrics.source = files needs metrics.reconstructions".into());
            }
        }
    }
    errs
}

fn check_window(l: &LiftingConfig, prefix: &str, errs: &mut Vec<String>) {
    if l.window.iter().any(|&v| v == 0) {
        errs.push(format!("{prefix}.window entries must be >= 1"));
    }
}

fn validate_model(m: &ModelConfig, errs: &mut Vec<String>) {
    for (name, v) in [("lambda1", m.lambda1), ("lambda2", m.lambda2)] {
        if let Some(v) = v {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("model.{name} must be non-negative"));
            }
        }
    }
    for (name, c) in [("cnn", m.cnn), ("image_cnn", m.image_cnn)] {
        if let Some(c) = c {
            if c.layers == 0 {
                errs.push(format!("model.{name}.layers must be >= 1"));
            }
            if c.filters == 0 {
                errs.push(format!("model.{name}.filters must be >= 1"));
            }
            if c.kernel % 2 == 0 {
                errs.push(format!("model.{name}.kernel must be odd"));
            }
        }
    }
    if m.lambda2.is_some_and(|v| v > 0.0) && m.image_cnn.is_none() && m.checkpoint.is_none() {
        errs.push("model.lambda2 > 0 needs model.image_cnn".into());
    }
}
