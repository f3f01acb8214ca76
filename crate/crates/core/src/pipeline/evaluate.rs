use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::explain::read_entry;
use super::{require_path, ExplainEntry, ExplainManifest, OutputDir, PipelineError, Provenance, Result, RunSummary};
use crate::io::{read_mask, Manifest};
use crate::metrics::{
    aggregate, dpp, rra, write_aggregate_csv, write_scores_csv, write_scores_jsonl, AggregateRow, GroupKey,
    ScoreRecord, ScoreRow,
};
use crate::tensor::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// One uniform sample of images is drawn per seed.
    pub seeds: Vec<u64>,
    pub manifest: Option<PathBuf>,
    /// Directory holding `explain_manifest.json`.
    pub explanations: Option<PathBuf>,
    pub images_per_seed: usize,
    /// Defaults to every method in the explain manifest.
    pub methods: Option<Vec<String>>,
    /// Defaults to the explain manifest's model id.
    pub model_id: Option<String>,
    pub out: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![],
            manifest: None,
            explanations: None,
            images_per_seed: 200,
            methods: None,
            model_id: None,
            out: None,
        }
    }
}

const GROUP_BY: [GroupKey; 2] = [GroupKey::Model, GroupKey::Method];

#[derive(Serialize)]
struct AggregateReport<'a> {
    provenance: &'a Provenance,
    group_by: Vec<&'static str>,
    rows: &'a [AggregateRow],
    /// Image ids drawn for each seed, in evaluation order.
    sampled: BTreeMap<u64, Vec<String>>,
    excluded: BTreeMap<String, String>,
}

/// Scores every sampled (image, method) pair with RRA and DPP and writes
/// `scores.csv`, `scores.jsonl`, `aggregate.csv` and `aggregate.json`.
pub fn cmd_evaluate(config: &EvaluateConfig) -> Result<RunSummary> {
    if config.seeds.is_empty() {
        return Err(PipelineError::Config("[evaluate] seeds must be set (config or --seed)".into()));
    }
    let mut unique = config.seeds.clone();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != config.seeds.len() {
        return Err(PipelineError::Config("[evaluate] seeds must be distinct".into()));
    }
    if config.images_per_seed == 0 {
        return Err(PipelineError::Config("[evaluate] images_per_seed must be positive".into()));
    }
    let manifest = Manifest::load(require_path(&config.manifest, "evaluate", "manifest")?)?;
    let explain_dir = require_path(&config.explanations, "evaluate", "explanations")?;
    let explained = ExplainManifest::load(&explain_dir)?;
    let mut out = OutputDir::create(require_path(&config.out, "evaluate", "out")?)?;
    let provenance = Provenance::new("evaluate", config, config.seeds.clone());

    let methods = config.methods.clone().unwrap_or_else(|| explained.methods.clone());
    if methods.is_empty() {
        return Err(PipelineError::Config("[evaluate] no methods to evaluate".into()));
    }
    if let Some(m) = methods.iter().find(|m| !explained.methods.contains(m)) {
        return Err(PipelineError::Config(format!("method {m:?} not in the explain manifest")));
    }
    let model_id = config.model_id.clone().unwrap_or_else(|| explained.model_id.clone());

    let mut by_image: BTreeMap<&str, HashMap<&str, &ExplainEntry>> = BTreeMap::new();
    let mut image_order: Vec<&str> = Vec::new();
    for e in &explained.entries {
        let slot = by_image.entry(&e.image_id).or_default();
        if slot.is_empty() {
            image_order.push(&e.image_id);
        }
        slot.insert(&e.method_id, e);
    }
    let records: HashMap<&str, _> = manifest.records.iter().map(|r| (r.image_id.as_str(), r)).collect();

    let mut candidates: Vec<(&str, BinaryMask)> = Vec::new();
    let mut excluded = BTreeMap::new();
    for id in image_order {
        let record = records
            .get(id)
            .ok_or_else(|| PipelineError::Data(format!("explained image {id:?} is not in the dataset manifest")))?;
        let Some(mask_path) = &record.mask_path else {
            excluded.insert(id.to_string(), "no mask".to_string());
            continue;
        };
        let mask = read_mask(manifest.resolve(mask_path))?;
        if mask.count() == 0 {
            excluded.insert(id.to_string(), "empty mask".to_string());
            continue;
        }
        candidates.push((id, mask));
    }
    if !excluded.is_empty() {
        out.warn(format!("{} images excluded for missing or empty masks", excluded.len()));
    }
    if candidates.is_empty() {
        return Err(PipelineError::Data("no explained image has a usable mask".into()));
    }

    let mut scores: Vec<ScoreRecord> = Vec::new();
    let mut sampled = BTreeMap::new();
    let mut missing_entries = 0;
    for &seed in &config.seeds {
        let k = config.images_per_seed.min(candidates.len());
        let mut picks = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), candidates.len(), k).into_vec();
        picks.sort_unstable();
        log::debug!("seed {seed}: {} of {} candidate images", picks.len(), candidates.len());
        sampled.insert(seed, picks.iter().map(|&i| candidates[i].0.to_string()).collect());
        let rows: Vec<Vec<Option<ScoreRecord>>> = picks
            .par_iter()
            .map(|&i| {
                let (id, mask) = &candidates[i];
                methods
                    .iter()
                    .map(|m| {
                        let Some(entry) = by_image[id].get(m.as_str()) else {
                            return Ok(None);
                        };
                        let map = read_entry(&explain_dir, entry)?;
                        Ok(Some(ScoreRecord {
                            image_id: id.to_string(),
                            model_id: model_id.clone(),
                            method_id: m.clone(),
                            seed,
                            rra: rra(&map, mask)?,
                            dpp: dpp(&map, mask)?,
                        }))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for r in rows.into_iter().flatten() {
            match r {
                Some(r) => scores.push(r),
                None => missing_entries += 1,
            }
        }
    }
    if missing_entries > 0 {
        out.warn(format!("{missing_entries} (image, method) pairs have no heatmap"));
    }

    let flat: Vec<ScoreRow> = scores.iter().map(ScoreRecord::row).collect();
    let mut csv_bytes = Vec::new();
    write_scores_csv(&mut csv_bytes, &flat)?;
    out.write("scores.csv", &csv_bytes)?;
    let mut jsonl = Vec::new();
    write_scores_jsonl(&mut jsonl, &scores)?;
    out.write("scores.jsonl", &jsonl)?;

    let rows = aggregate(&flat, &GROUP_BY)?;
    let mut agg_csv = Vec::new();
    write_aggregate_csv(&mut agg_csv, &rows, &GROUP_BY)?;
    out.write("aggregate.csv", &agg_csv)?;
    out.write_json(
        "aggregate.json",
        &AggregateReport {
            provenance: &provenance,
            group_by: GROUP_BY.iter().map(|k| k.column()).collect(),
            rows: &rows,
            sampled,
            excluded,
        },
    )?;
    out.count("scores", flat.len());
    out.count("candidates", candidates.len());
    out.finish(provenance, config)
}
