use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{require_seed, OutputDir, PipelineError, Provenance, Result, RunSummary};
use crate::metrics::{read_scores_csv, Metric, ScoreRow};
use crate::seed::derive_seed;
use crate::stats::{
    adjust_results, compare_groups, rank_groups, write_results_csv, ComparisonOptions, RankedGroup, TestResult,
    DEFAULT_TIE_TOLERANCE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Seed for the bootstrap power resamples.
    pub seed: Option<u64>,
    /// Score files (or evaluate output directories), one group each.
    pub scores: Vec<PathBuf>,
    /// Group labels in the order of `scores`. Default: each file's model id.
    pub group_ids: Option<Vec<String>>,
    pub metrics: Vec<String>,
    /// Label written to the `group` column of every result row.
    pub setting: String,
    pub n_boot: usize,
    pub alpha: f64,
    pub tie_tolerance: f64,
    pub out: Option<PathBuf>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            seed: None,
            scores: vec![],
            group_ids: None,
            metrics: vec!["rra".into(), "dpp".into()],
            setting: "comparison".into(),
            n_boot: 1000,
            alpha: 0.05,
            tie_tolerance: DEFAULT_TIE_TOLERANCE,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct RankingRow {
    setting: String,
    metric: String,
    method_id: String,
    group_id: String,
    mean: f64,
    rank: usize,
    /// Whether the adjusted p-value of this (metric, method) test is below alpha.
    significant: bool,
}

#[derive(Serialize)]
struct ComparisonReport<'a> {
    provenance: &'a Provenance,
    alpha: f64,
    groups: Vec<GroupSource>,
    methods: &'a [String],
    results: &'a [TestResult],
    rankings: &'a [RankingRow],
}

#[derive(Serialize)]
struct GroupSource {
    id: String,
    path: String,
    rows: usize,
}

fn score_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("scores.csv")
    } else {
        path.to_path_buf()
    }
}

fn load_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let file = File::open(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    let rows = read_scores_csv(file).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(PipelineError::Data(format!("{}: no score rows", path.display())));
    }
    Ok(rows)
}

/// Model id shared by every row, else the file stem. Repeats get `_2`, `_3`...
fn default_ids(paths: &[PathBuf], tables: &[Vec<ScoreRow>]) -> Vec<String> {
    let mut ids = Vec::with_capacity(tables.len());
    let mut used: HashMap<String, usize> = HashMap::new();
    for (path, rows) in paths.iter().zip(tables) {
        let models: BTreeSet<&str> = rows.iter().map(|r| r.model_id.as_str()).collect();
        let base = if models.len() == 1 {
            models.into_iter().next().unwrap_or_default().to_string()
        } else {
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "group".into())
        };
        let n = used.entry(base.clone()).or_insert(0);
        *n += 1;
        ids.push(if *n == 1 { base } else { format!("{base}_{n}") });
    }
    ids
}

/// Tests whether score distributions differ between groups, per metric and
/// method: Mann-Whitney U for two groups, Kruskal-Wallis otherwise. Scores
/// from all seeds in a file are pooled. P-values are BH-adjusted jointly.
pub fn cmd_compare(config: &CompareConfig) -> Result<RunSummary> {
    let seed = require_seed(config.seed, "compare")?;
    if config.scores.len() < 2 {
        return Err(PipelineError::Config("[compare] at least two score files are needed".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(PipelineError::Config("[compare] alpha must be in (0, 1)".into()));
    }
    if config.n_boot == 0 {
        return Err(PipelineError::Config("[compare] n_boot must be positive".into()));
    }
    if config.tie_tolerance.is_nan() || config.tie_tolerance < 0.0 {
        return Err(PipelineError::Config("[compare] tie_tolerance must be non-negative".into()));
    }
    let metrics = config
        .metrics
        .iter()
        .map(|m| Metric::parse(m).ok_or_else(|| PipelineError::Config(format!("unknown metric {m:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if metrics.is_empty() {
        return Err(PipelineError::Config("[compare] metrics is empty".into()));
    }

    let paths: Vec<PathBuf> = config.scores.iter().map(|p| score_file(p)).collect();
    let tables = paths.iter().map(|p| load_scores(p)).collect::<Result<Vec<_>>>()?;
    let ids = match &config.group_ids {
        Some(ids) => {
            if ids.len() != paths.len() {
                return Err(PipelineError::Config(format!(
                    "{} group ids for {} score files",
                    ids.len(),
                    paths.len()
                )));
            }
            if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
                return Err(PipelineError::Config("group ids must be distinct".into()));
            }
            ids.clone()
        }
        None => default_ids(&paths, &tables),
    };

    let per_table: Vec<BTreeSet<&str>> =
        tables.iter().map(|rows| rows.iter().map(|r| r.method_id.as_str()).collect()).collect();
    let methods: Vec<String> = per_table[0]
        .iter()
        .filter(|m| per_table.iter().all(|set| set.contains(*m)))
        .map(|m| m.to_string())
        .collect();
    let mut out = OutputDir::create(super::require_path(&config.out, "compare", "out")?)?;
    let provenance = Provenance::new("compare", config, vec![seed]);
    let all: BTreeSet<&str> = per_table.iter().flatten().copied().collect();
    for m in all.iter().filter(|m| !methods.iter().any(|x| x == *m)) {
        out.warn(format!("method {m:?} is not present in every group and is skipped"));
    }
    if methods.is_empty() {
        return Err(PipelineError::Data("no method is present in every score file".into()));
    }

    let mut results = Vec::new();
    let mut rankings_per_test: Vec<Vec<RankedGroup>> = Vec::new();
    for metric in &metrics {
        for method in &methods {
            let groups: Vec<(String, Vec<f64>)> = ids
                .iter()
                .zip(&tables)
                .map(|(id, rows)| {
                    let values = rows.iter().filter(|r| &r.method_id == method).map(|r| r.metric(*metric)).collect();
                    (id.clone(), values)
                })
                .collect();
            let options = ComparisonOptions {
                n_boot: config.n_boot,
                alpha: config.alpha,
                seed: derive_seed(seed, results.len() as u64),
            };
            results.push(compare_groups(&config.setting, metric.name(), method, &groups, options)?);
            rankings_per_test.push(rank_groups(&groups, config.tie_tolerance)?);
        }
    }
    adjust_results(&mut results)?;

    let rankings: Vec<RankingRow> = results
        .iter()
        .zip(&rankings_per_test)
        .flat_map(|(r, ranked)| {
            ranked.iter().map(move |g| RankingRow {
                setting: r.group.clone(),
                metric: r.metric.clone(),
                method_id: r.method_id.clone(),
                group_id: g.id.clone(),
                mean: g.mean,
                rank: g.rank,
                significant: r.p_adjusted < config.alpha,
            })
        })
        .collect();

    let mut csv_bytes = Vec::new();
    write_results_csv(&mut csv_bytes, &results)?;
    out.write("comparison.csv", &csv_bytes)?;
    let mut rank_csv = csv::Writer::from_writer(Vec::new());
    for row in &rankings {
        rank_csv.serialize(row)?;
    }
    let rank_csv = rank_csv.into_inner().map_err(|e| PipelineError::Data(e.to_string()))?;
    out.write("rankings.csv", &rank_csv)?;
    out.write_json("rankings.json", &rankings)?;
    let groups = ids
        .iter()
        .zip(&paths)
        .zip(&tables)
        .map(|((id, p), rows)| GroupSource { id: id.clone(), path: p.to_string_lossy().into_owned(), rows: rows.len() })
        .collect();
    out.write_json(
        "comparison.json",
        &ComparisonReport {
            provenance: &provenance,
            alpha: config.alpha,
            groups,
            methods: &methods,
            results: &results,
            rankings: &rankings,
        },
    )?;
    out.count("tests", results.len());
    out.count("significant", results.iter().filter(|r| r.p_adjusted < config.alpha).count());
    out.finish(provenance, config)
}
