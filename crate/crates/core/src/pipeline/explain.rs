use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_method_ids, default_methods, explainer_for, load_model, require_path, require_seed, targets_for,
    MethodParams, OutputDir, PipelineError, Provenance, Result, RunSummary, TargetMode, CONTROL_PERFECT,
    EXPLAIN_MANIFEST,
};
use crate::attribution::{AttributionConfig, Method};
use crate::io::{read_image, read_mask, Manifest, ManifestRecord};
use crate::npy::{self, Dtype};
use crate::tensor::{Heatmap, ImageTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Seed for the stochastic methods.
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    /// Directory written by `RefNet::save`; exclusive with `model_seed`.
    pub model: Option<PathBuf>,
    pub model_seed: Option<u64>,
    pub model_id: String,
    pub split: String,
    pub methods: Vec<String>,
    pub target: TargetMode,
    pub params: MethodParams,
    pub out: Option<PathBuf>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            seed: None,
            manifest: None,
            model: None,
            model_seed: None,
            model_id: "refnet".into(),
            split: "test".into(),
            methods: default_methods(),
            target: TargetMode::default(),
            params: MethodParams::default(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Path { path: String },
    Seed { seed: u64 },
    /// Written by an external exporter.
    External { description: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainEntry {
    pub image_id: String,
    pub method_id: String,
    /// Relative to the directory holding the explain manifest.
    pub heatmap_path: String,
    pub target: usize,
    pub height: usize,
    pub width: usize,
}

/// `explain_manifest.json`, shared with external exporters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainManifest {
    pub provenance: Provenance,
    pub model_id: String,
    pub model: ModelSource,
    pub dataset_manifest: String,
    pub split: String,
    pub target_mode: TargetMode,
    pub attribution: AttributionConfig,
    pub methods: Vec<String>,
    pub entries: Vec<ExplainEntry>,
}

impl ExplainManifest {
    /// Reads `dir/explain_manifest.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(EXPLAIN_MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
    }

    /// Parses a manifest and rejects heatmap paths that escape its directory.
    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: ExplainManifest = serde_json::from_str(text).map_err(|e| PipelineError::Data(e.to_string()))?;
        for e in &manifest.entries {
            let p = Path::new(&e.heatmap_path);
            if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return Err(PipelineError::Data(format!("heatmap path {:?} leaves the directory", e.heatmap_path)));
            }
        }
        Ok(manifest)
    }
}

pub(crate) fn load_split(manifest: &Manifest, split: &str) -> Result<(Vec<ManifestRecord>, Vec<ImageTensor>)> {
    let records: Vec<ManifestRecord> = manifest.split(split).cloned().collect();
    if records.is_empty() {
        return Err(PipelineError::Data(format!("split {split:?} has no records")));
    }
    let images = records
        .par_iter()
        .map(|r| read_image(manifest.resolve(&r.image_path)).map_err(PipelineError::from))
        .collect::<Result<Vec<_>>>()?;
    let shape = images[0].shape();
    if let Some((r, x)) = records.iter().zip(&images).find(|(_, x)| x.shape() != shape) {
        return Err(PipelineError::Data(format!(
            "image {} has shape {:?}, expected {:?}",
            r.image_id,
            x.shape(),
            shape
        )));
    }
    Ok((records, images))
}

/// Writes `{image_id}.{method}.npy` per image and method plus `explain_manifest.json`.
pub fn cmd_explain(config: &ExplainConfig) -> Result<RunSummary> {
    let seed = require_seed(config.seed, "explain")?;
    let manifest_path = require_path(&config.manifest, "explain", "manifest")?;
    check_method_ids(&config.methods, true)?;
    let attribution = config.params.attribution(seed);
    attribution.validate()?;
    let mut out = OutputDir::create(require_path(&config.out, "explain", "out")?)?;
    let provenance = Provenance::new("explain", config, vec![seed]);

    let manifest = Manifest::load(&manifest_path)?;
    let (records, images) = load_split(&manifest, &config.split)?;
    let classes = records.iter().map(|r| r.label).max().unwrap_or(0) + 1;
    let (model, source) = load_model(&config.model, config.model_seed, images[0].shape(), classes)?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let targets = targets_for(&model, &images, &labels, config.target)?;
    let (_, h, w) = images[0].shape();

    let mut entries = Vec::new();
    for method_id in &config.methods {
        let maps: Vec<Option<Heatmap>> = if method_id == CONTROL_PERFECT {
            records
                .iter()
                .map(|r| match &r.mask_path {
                    Some(p) => {
                        let mask = read_mask(manifest.resolve(p))?;
                        if mask.shape() != (h, w) {
                            return Err(PipelineError::Data(format!(
                                "mask of {} is {:?}, image is {:?}",
                                r.image_id,
                                mask.shape(),
                                (h, w)
                            )));
                        }
                        Ok(Some(mask.to_heatmap()))
                    }
                    None => Ok(None),
                })
                .collect::<Result<_>>()?
        } else {
            let explainer = explainer_for(method_id, &config.params, seed)?;
            explainer.explain_batch(&model, &images, &targets)?.into_iter().map(Some).collect()
        };
        let mut missing = 0;
        for ((record, map), &target) in records.iter().zip(maps).zip(&targets) {
            let Some(map) = map else {
                missing += 1;
                continue;
            };
            let file = format!("{}.{}.npy", record.image_id, method_id);
            out.write(&file, &npy::encode(&[h, w], map.values(), Dtype::F8))?;
            entries.push(ExplainEntry {
                image_id: record.image_id.clone(),
                method_id: method_id.clone(),
                heatmap_path: file,
                target,
                height: h,
                width: w,
            });
        }
        if missing > 0 {
            out.warn(format!("{method_id}: {missing} images without a mask skipped"));
        }
    }

    out.count("images", records.len());
    out.count("heatmaps", entries.len());
    let explain_manifest = ExplainManifest {
        provenance: provenance.clone(),
        model_id: config.model_id.clone(),
        model: source,
        dataset_manifest: manifest_path.to_string_lossy().into_owned(),
        split: config.split.clone(),
        target_mode: config.target,
        attribution,
        methods: config.methods.clone(),
        entries,
    };
    out.write_json(EXPLAIN_MANIFEST, &explain_manifest)?;
    out.finish(provenance, config)
}

/// Heatmap of one manifest entry.
pub(crate) fn read_entry(dir: &Path, entry: &ExplainEntry) -> Result<Heatmap> {
    let map = crate::io::read_heatmap(dir.join(&entry.heatmap_path))?;
    if map.shape() != (entry.height, entry.width) {
        return Err(PipelineError::Data(format!(
            "{} is {:?}, manifest says {:?}",
            entry.heatmap_path,
            map.shape(),
            (entry.height, entry.width)
        )));
    }
    if entry.method_id == Method::GradCam.id() && map.values().iter().any(|&v| v < 0.0) {
        return Err(PipelineError::Data(format!("{} has negative grad_cam values", entry.heatmap_path)));
    }
    Ok(map)
}
