//! Command implementations behind the `xai-eval` binary: configuration,
//! provenance and the five pipeline stages.

mod compare;
mod evaluate;
mod explain;
mod gen_data;
mod sanity;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attribution::{AttributionConfig, AttributionError, ConstantMap, Explainer, Method, RandomMap};
use crate::attribution::ConfiguredMethod;
use crate::io::LoadError;
use crate::metrics::MetricError;
use crate::model::{DifferentiableModel, ModelError};
use crate::refnet::RefNet;
use crate::sanity::SanityError;
use crate::stats::StatsError;
use crate::tensor::{ImageTensor, TensorError};

pub use compare::{cmd_compare, CompareConfig};
pub use evaluate::{cmd_evaluate, EvaluateConfig};
pub use explain::{cmd_explain, ExplainConfig, ExplainEntry, ExplainManifest, ModelSource};
pub use gen_data::{cmd_gen_data, GenDataConfig};
pub use sanity::{cmd_sanity, SanityConfig};

pub const EXPLAIN_MANIFEST: &str = "explain_manifest.json";
pub const RUN_SUMMARY: &str = "run_summary.json";
pub const CONTROL_PERFECT: &str = "control_perfect";
pub const CONTROL_RANDOM: &str = "control_random";
pub const CONTROL_CONSTANT: &str = "control_constant";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl From<LoadError> for PipelineError {
    fn from(e: LoadError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<csv::Error> for PipelineError {
    fn from(e: csv::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<TensorError> for PipelineError {
    fn from(e: TensorError) -> Self {
        PipelineError::Numeric(e.to_string())
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InputShape { .. } | ModelError::InvalidTarget { .. } => PipelineError::Data(e.to_string()),
            ModelError::Config(_) | ModelError::UnknownLayer { .. } => PipelineError::Config(e.to_string()),
            ModelError::Tensor(_) => PipelineError::Numeric(e.to_string()),
        }
    }
}

impl From<AttributionError> for PipelineError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::Model(m) => m.into(),
            AttributionError::Config(_)
            | AttributionError::PatchTooLarge { .. }
            | AttributionError::BatchTooSmall(_)
            | AttributionError::NoConvLayer => PipelineError::Config(e.to_string()),
            AttributionError::BaselineShape { .. } | AttributionError::TargetCount { .. } => {
                PipelineError::Data(e.to_string())
            }
            AttributionError::Tensor(_) => PipelineError::Numeric(e.to_string()),
        }
    }
}

impl From<MetricError> for PipelineError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::ShapeMismatch { .. } | MetricError::InvalidRecord(_) => PipelineError::Data(e.to_string()),
            _ => PipelineError::Numeric(e.to_string()),
        }
    }
}

impl From<StatsError> for PipelineError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::TooFewGroups(_) | StatsError::Bootstrap(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Numeric(e.to_string()),
        }
    }
}

impl From<SanityError> for PipelineError {
    fn from(e: SanityError) -> Self {
        match e {
            SanityError::Model(m) => m.into(),
            SanityError::Attribution(a) => a.into(),
            SanityError::Stats(s) => s.into(),
            SanityError::NoImages | SanityError::SingleImage(_) | SanityError::TargetCount { .. } => {
                PipelineError::Data(e.to_string())
            }
            SanityError::Tensor(_) => PipelineError::Numeric(e.to_string()),
        }
    }
}

/// The declarative config file: one flat table per command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen_data: GenDataConfig,
    pub explain: ExplainConfig,
    pub evaluate: EvaluateConfig,
    pub sanity: SanityConfig,
    pub compare: CompareConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Method parameters settable from a config file. The seed lives on the
/// owning command section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodParams {
    pub ig_steps: usize,
    pub baseline_value: f64,
    pub gs_samples: usize,
    pub gs_noise_std: f64,
    pub fp_patch: usize,
    pub fp_repeats: usize,
    /// Value painted by `control_constant`.
    pub constant_value: f64,
}

impl Default for MethodParams {
    fn default() -> Self {
        let d = AttributionConfig::default();
        Self {
            ig_steps: d.ig_steps,
            baseline_value: d.baseline_value,
            gs_samples: d.gs_samples,
            gs_noise_std: d.gs_noise_std,
            fp_patch: d.fp_patch,
            fp_repeats: d.fp_repeats,
            constant_value: 1.0,
        }
    }
}

impl MethodParams {
    pub fn attribution(&self, seed: u64) -> AttributionConfig {
        AttributionConfig {
            ig_steps: self.ig_steps,
            baseline_value: self.baseline_value,
            gs_samples: self.gs_samples,
            gs_noise_std: self.gs_noise_std,
            fp_patch: self.fp_patch,
            fp_repeats: self.fp_repeats,
            seed,
        }
    }
}

/// Which class each explanation is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Arg-max logit, lowest index on ties.
    #[default]
    Predicted,
    Label,
}

pub(crate) fn require_seed(seed: Option<u64>, section: &str) -> Result<u64> {
    seed.ok_or_else(|| PipelineError::Config(format!("[{section}] seed must be set (config or --seed)")))
}

pub(crate) fn require_path(path: &Option<PathBuf>, section: &str, key: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| PipelineError::Config(format!("[{section}] {key} must be set")))
}

/// Hex SHA-256 of the canonical JSON form of a resolved config section.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub(crate) fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

impl Provenance {
    pub fn new<T: Serialize>(command: &str, config: &T, seeds: Vec<u64>) -> Self {
        Provenance {
            tool: "xai-eval".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: config_hash(config),
            seeds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Top-level summary written last by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub provenance: Provenance,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputFile>,
    pub counts: serde_json::Map<String, serde_json::Value>,
    pub warnings: Vec<String>,
}

/// Collects written files so the run summary can list and hash them.
pub(crate) struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub counts: serde_json::Map<String, serde_json::Value>,
}

impl OutputDir {
    pub fn create(root: PathBuf) -> Result<Self> {
        fs::create_dir_all(&root)
            .map_err(|e| PipelineError::Data(format!("cannot create {}: {e}", root.display())))?;
        Ok(OutputDir { root, written: vec![], warnings: vec![], counts: Default::default() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, relative: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(relative.as_ref());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).map_err(|e| PipelineError::Data(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(relative.as_ref().to_path_buf());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, relative: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("output serializes");
        text.push('\n');
        self.write(relative, text.as_bytes())
    }

    /// Records a file written by other means (e.g. a saved model directory).
    pub fn record(&mut self, relative: impl AsRef<Path>) {
        self.written.push(relative.as_ref().to_path_buf());
    }

    pub fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.warnings.push(message);
    }

    pub fn count(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.counts.insert(key.to_string(), value.into());
    }

    pub fn finish<T: Serialize>(mut self, provenance: Provenance, config: &T) -> Result<RunSummary> {
        let mut outputs = Vec::with_capacity(self.written.len());
        for rel in &self.written {
            let path = self.root.join(rel);
            outputs.push(OutputFile {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(&path)?,
                bytes: fs::metadata(&path)?.len(),
            });
        }
        log::info!("{}: {} outputs under {}", provenance.command, outputs.len(), self.root.display());
        let summary = RunSummary {
            provenance,
            config: serde_json::to_value(config).expect("config serializes"),
            outputs,
            counts: std::mem::take(&mut self.counts),
            warnings: std::mem::take(&mut self.warnings),
        };
        self.write_json(RUN_SUMMARY, &summary)?;
        Ok(summary)
    }
}

/// Loads a saved refnet, or builds one from `seed` for the given input shape.
pub(crate) fn load_model(
    path: &Option<PathBuf>,
    seed: Option<u64>,
    shape: (usize, usize, usize),
    classes: usize,
) -> Result<(RefNet, ModelSource)> {
    match (path, seed) {
        (Some(p), None) => {
            let net = RefNet::load(p)?;
            if net.input_shape() != shape {
                return Err(PipelineError::Data(format!(
                    "model input {:?} does not match images {:?}",
                    net.input_shape(),
                    shape
                )));
            }
            Ok((net, ModelSource::Path { path: p.to_string_lossy().into_owned() }))
        }
        (None, Some(s)) => Ok((RefNet::init(s, shape, classes.max(2))?, ModelSource::Seed { seed: s })),
        (Some(_), Some(_)) => Err(PipelineError::Config("set either model or model_seed, not both".into())),
        (None, None) => Err(PipelineError::Config("one of model or model_seed must be set".into())),
    }
}

pub(crate) fn targets_for(
    model: &dyn DifferentiableModel,
    images: &[ImageTensor],
    labels: &[usize],
    mode: TargetMode,
) -> Result<Vec<usize>> {
    match mode {
        TargetMode::Label => {
            for &l in labels {
                model.check_target(l)?;
            }
            Ok(labels.to_vec())
        }
        TargetMode::Predicted => images
            .iter()
            .map(|x| {
                let logits = model.forward(x)?;
                let mut best = 0;
                for (k, v) in logits.iter().enumerate() {
                    if *v > logits[best] {
                        best = k;
                    }
                }
                Ok(best)
            })
            .collect(),
    }
}

/// Model-driven explainers by id. `control_perfect` needs masks and is
/// handled by the explain command itself.
pub(crate) fn explainer_for(id: &str, params: &MethodParams, seed: u64) -> Result<Box<dyn Explainer>> {
    if let Some(method) = Method::parse(id) {
        let config = params.attribution(seed);
        config.validate()?;
        return Ok(Box::new(ConfiguredMethod { method, config }));
    }
    match id {
        CONTROL_RANDOM => Ok(Box::new(RandomMap { seed })),
        CONTROL_CONSTANT => Ok(Box::new(ConstantMap { value: params.constant_value })),
        _ => Err(PipelineError::Config(format!("unknown method id {id:?}"))),
    }
}

pub(crate) fn default_methods() -> Vec<String> {
    Method::ALL.iter().map(|m| m.id().to_string()).collect()
}

pub(crate) fn check_method_ids(ids: &[String], allow_perfect: bool) -> Result<()> {
    if ids.is_empty() {
        return Err(PipelineError::Config("method list is empty".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        let known = Method::parse(id).is_some()
            || id == CONTROL_RANDOM
            || id == CONTROL_CONSTANT
            || (allow_perfect && id == CONTROL_PERFECT);
        if !known {
            return Err(PipelineError::Config(format!("unknown method id {id:?}")));
        }
        if !seen.insert(id) {
            return Err(PipelineError::Config(format!("method {id:?} listed twice")));
        }
    }
    Ok(())
}
