use std::path::PathBuf;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::explain::load_split;
use super::{
    check_method_ids, default_methods, explainer_for, load_model, require_path, require_seed, targets_for,
    MethodParams, OutputDir, PipelineError, Provenance, Result, RunSummary, TargetMode, CONTROL_PERFECT,
};
use crate::io::Manifest;
use crate::sanity::{input_randomization_check, layer_randomization_check, write_sanity_csv, SanityReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SanityConfig {
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub model_seed: Option<u64>,
    pub model_id: String,
    pub split: String,
    pub methods: Vec<String>,
    /// Images drawn uniformly from the split.
    pub batch: usize,
    /// Layers re-initialized, capped at the model's layer count.
    pub n_layers: usize,
    /// Compare min-max normalized maps in the input randomization check.
    pub normalized: bool,
    pub target: TargetMode,
    pub params: MethodParams,
    pub out: Option<PathBuf>,
}

impl Default for SanityConfig {
    fn default() -> Self {
        Self {
            seed: None,
            manifest: None,
            model: None,
            model_seed: None,
            model_id: "refnet".into(),
            split: "test".into(),
            methods: default_methods(),
            batch: 32,
            n_layers: 10,
            normalized: true,
            target: TargetMode::default(),
            params: MethodParams::default(),
            out: None,
        }
    }
}

#[derive(Serialize)]
struct SanityOutput<'a> {
    provenance: &'a Provenance,
    image_ids: &'a [String],
    reports: &'a [SanityReport],
}

/// Runs both fidelity checks for every configured method on one seeded batch.
pub fn cmd_sanity(config: &SanityConfig) -> Result<RunSummary> {
    let seed = require_seed(config.seed, "sanity")?;
    check_method_ids(&config.methods, false)?;
    if config.methods.iter().any(|m| m == CONTROL_PERFECT) {
        return Err(PipelineError::Config(format!("{CONTROL_PERFECT} is not available in sanity")));
    }
    if config.batch < 2 {
        return Err(PipelineError::Config("[sanity] batch must be at least 2".into()));
    }
    let manifest = Manifest::load(require_path(&config.manifest, "sanity", "manifest")?)?;
    let mut out = OutputDir::create(require_path(&config.out, "sanity", "out")?)?;
    let provenance = Provenance::new("sanity", config, vec![seed]);

    let (records, images) = load_split(&manifest, &config.split)?;
    if records.len() < 2 {
        return Err(PipelineError::Data("sanity checks need at least 2 images".into()));
    }
    let mut picks =
        index::sample(&mut ChaCha8Rng::seed_from_u64(seed), records.len(), config.batch.min(records.len())).into_vec();
    picks.sort_unstable();
    let batch: Vec<_> = picks.iter().map(|&i| images[i].clone()).collect();
    let ids: Vec<String> = picks.iter().map(|&i| records[i].image_id.clone()).collect();
    let labels: Vec<usize> = picks.iter().map(|&i| records[i].label).collect();
    let classes = records.iter().map(|r| r.label).max().unwrap_or(0) + 1;
    let (model, _) = load_model(&config.model, config.model_seed, batch[0].shape(), classes)?;
    let targets = targets_for(&model, &batch, &labels, config.target)?;

    let mut reports = Vec::with_capacity(config.methods.len());
    for method_id in &config.methods {
        let explainer = explainer_for(method_id, &config.params, seed)?;
        let layers = layer_randomization_check(&model, explainer.as_ref(), &batch, &targets, config.n_layers, seed)?;
        let inputs =
            input_randomization_check(&model, explainer.as_ref(), &batch, &targets, seed, config.normalized)?;
        reports.push(SanityReport::new(&config.model_id, method_id, seed, config.n_layers, &ids, &layers, &inputs));
    }

    let mut csv_bytes = Vec::new();
    write_sanity_csv(&mut csv_bytes, &reports)?;
    out.write("sanity.csv", &csv_bytes)?;
    let mut per_image = csv::Writer::from_writer(Vec::new());
    per_image.write_record(["model_id", "method_id", "image_id", "degradation", "distance"])?;
    for r in &reports {
        for row in &r.per_image {
            per_image.write_record([
                r.model_id.as_str(),
                r.method_id.as_str(),
                row.image_id.as_str(),
                &row.degradation.to_string(),
                &row.distance.to_string(),
            ])?;
        }
    }
    let per_image = per_image.into_inner().map_err(|e| PipelineError::Data(e.to_string()))?;
    out.write("sanity_per_image.csv", &per_image)?;
    out.write_json("sanity.json", &SanityOutput { provenance: &provenance, image_ids: &ids, reports: &reports })?;
    out.count("images", ids.len());
    out.count("methods", reports.len());
    out.finish(provenance, config)
}
