//! Rank-based hypothesis tests, effect sizes, false-discovery-rate control
//! and bootstrap power.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::seed::derive_seed;

/// Combined sample size up to which tie-free Mann-Whitney p-values are exact.
pub const EXACT_MWU_MAX_N: usize = 16;
pub const DEFAULT_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample {0} is empty")]
    EmptySample(usize),
    #[error("need at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("p-value {0} outside (0, 1]")]
    InvalidPValue(f64),
    #[error("need n > k >= 2, got n = {n}, k = {k}")]
    InvalidCounts { n: usize, k: usize },
    #[error("non-finite observation in sample {0}")]
    NonFinite(usize),
    #[error("invalid bootstrap settings: {0}")]
    Bootstrap(String),
}

fn check_samples(samples: &[&[f64]]) -> Result<(), StatsError> {
    for (i, s) in samples.iter().enumerate() {
        if s.is_empty() {
            return Err(StatsError::EmptySample(i));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(i));
        }
    }
    Ok(())
}

/// Average ranks (1-based) with ties sharing the mean of their positions, and
/// the tie term `sum(t^3 - t)` over tie groups.
pub fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        let t = (end - start) as f64;
        ties += t * t * t - t;
        start = end;
    }
    (ranks, ties)
}

fn clamp_p(p: f64) -> f64 {
    if p.is_nan() {
        1.0
    } else {
        p.clamp(f64::MIN_POSITIVE, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney {
    /// `U` for the first sample: the number of pairs with `x > y`, ties
    /// counting one half.
    pub u: f64,
    /// Two-sided.
    pub p: f64,
    pub exact: bool,
}

/// Counts of each `U` value over all `C(m + n, m)` rank assignments.
fn u_distribution(m: usize, n: usize) -> Vec<f64> {
    // table[j][u] holds counts for (i, j) while iterating i upwards
    let mut table: Vec<Vec<f64>> = (0..=n).map(|_| vec![1.0]).collect();
    for i in 1..=m {
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        next.push(vec![1.0]);
        for j in 1..=n {
            // f(u; i, j) = f(u - j; i - 1, j) + f(u; i, j - 1)
            let mut counts = vec![0.0; i * j + 1];
            for (u, c) in table[j].iter().enumerate() {
                counts[u + j] += c;
            }
            for (u, c) in next[j - 1].iter().enumerate() {
                counts[u] += c;
            }
            next.push(counts);
        }
        table = next;
    }
    table.swap_remove(n)
}

/// Mann-Whitney U test. Exact when the combined size is at most
/// [`EXACT_MWU_MAX_N`] and there are no ties; otherwise the normal
/// approximation with tie-corrected variance and continuity correction.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney, StatsError> {
    check_samples(&[x, y])?;
    let (m, n) = (x.len(), y.len());
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum: f64 = ranks[..m].iter().sum();
    let u = rank_sum - (m * (m + 1)) as f64 / 2.0;
    let total = (m + n) as f64;

    if m + n <= EXACT_MWU_MAX_N && ties == 0.0 {
        let counts = u_distribution(m, n);
        let all: f64 = counts.iter().sum();
        let k = u.round() as usize;
        let lower: f64 = counts[..=k].iter().sum::<f64>() / all;
        let upper: f64 = counts[k..].iter().sum::<f64>() / all;
        return Ok(MannWhitney { u, p: clamp_p(2.0 * lower.min(upper)), exact: true });
    }

    let mean = (m * n) as f64 / 2.0;
    let var = (m * n) as f64 / 12.0 * ((total + 1.0) - ties / (total * (total - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
        erfc(z / std::f64::consts::SQRT_2)
    };
    Ok(MannWhitney { u, p: clamp_p(p), exact: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub p: f64,
    pub df: usize,
}

/// Kruskal-Wallis H with tie correction; p from chi-squared with `k - 1`
/// degrees of freedom.
pub fn kruskal_wallis(groups: &[&[f64]]) -> Result<KruskalWallis, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    check_samples(groups)?;
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let n = pooled.len() as f64;
    let (ranks, ties) = midranks(&pooled);
    let mut offset = 0;
    let mut weighted = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        weighted += r * r / g.len() as f64;
        offset += g.len();
    }
    let df = groups.len() - 1;
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KruskalWallis { h: 0.0, p: 1.0, df });
    }
    let h = ((12.0 / (n * (n + 1.0))) * weighted - 3.0 * (n + 1.0)) / correction;
    let h = h.max(0.0);
    let chi = ChiSquared::new(df as f64).expect("df >= 1");
    Ok(KruskalWallis { h, p: clamp_p(chi.sf(h)), df })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectLabel {
    Negligible,
    Small,
    Medium,
    Large,
}

impl EffectLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            EffectLabel::Negligible => "negligible",
            EffectLabel::Small => "small",
            EffectLabel::Medium => "medium",
            EffectLabel::Large => "large",
        }
    }

    fn from_thresholds(value: f64, thresholds: [f64; 3]) -> EffectLabel {
        if value < thresholds[0] {
            EffectLabel::Negligible
        } else if value < thresholds[1] {
            EffectLabel::Small
        } else if value < thresholds[2] {
            EffectLabel::Medium
        } else {
            EffectLabel::Large
        }
    }

    /// Labels `|delta|` at 0.147 / 0.33 / 0.474.
    pub fn for_cliffs_delta(delta: f64) -> EffectLabel {
        Self::from_thresholds(delta.abs(), [0.147, 0.33, 0.474])
    }

    /// Labels eta squared at 0.01 / 0.06 / 0.14.
    pub fn for_eta_squared(eta: f64) -> EffectLabel {
        Self::from_thresholds(eta, [0.01, 0.06, 0.14])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectSize {
    pub value: f64,
    pub label: EffectLabel,
}

/// `(#{x > y} - #{x < y}) / (|x| |y|)` over all pairs.
pub fn cliffs_delta(x: &[f64], y: &[f64]) -> Result<EffectSize, StatsError> {
    check_samples(&[x, y])?;
    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut dominance: i64 = 0;
    for &xi in x {
        let below = sorted.partition_point(|&v| v < xi);
        let not_above = sorted.partition_point(|&v| v <= xi);
        dominance += below as i64 - (sorted.len() - not_above) as i64;
    }
    let value = dominance as f64 / (x.len() * y.len()) as f64;
    Ok(EffectSize { value, label: EffectLabel::for_cliffs_delta(value) })
}

/// `max(0, (H - k + 1) / (n - k))`.
pub fn eta_squared(h: f64, k: usize, n: usize) -> Result<EffectSize, StatsError> {
    if k < 2 || n <= k {
        return Err(StatsError::InvalidCounts { n, k });
    }
    let value = ((h - k as f64 + 1.0) / (n - k) as f64).clamp(0.0, 1.0);
    Ok(EffectSize { value, label: EffectLabel::for_eta_squared(value) })
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn benjamini_hochberg(p_values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(&bad) = p_values.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(StatsError::InvalidPValue(bad));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        running = running.min(p_values[i] * m as f64 / (pos + 1) as f64);
        // m p / j >= p; max() only absorbs rounding
        adjusted[i] = running.min(1.0).max(p_values[i]);
    }
    Ok(adjusted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    MannWhitneyU,
    KruskalWallis,
}

impl TestKind {
    pub fn name(self) -> &'static str {
        match self {
            TestKind::MannWhitneyU => "mann_whitney_u",
            TestKind::KruskalWallis => "kruskal_wallis",
        }
    }

    /// Mann-Whitney for two groups, Kruskal-Wallis otherwise.
    pub fn for_group_count(k: usize) -> TestKind {
        if k == 2 {
            TestKind::MannWhitneyU
        } else {
            TestKind::KruskalWallis
        }
    }

    /// Unadjusted p-value of this test on `groups`.
    pub fn p_value(self, groups: &[&[f64]]) -> Result<f64, StatsError> {
        match self {
            TestKind::MannWhitneyU => {
                if groups.len() != 2 {
                    return Err(StatsError::TooFewGroups(groups.len()));
                }
                Ok(mann_whitney_u(groups[0], groups[1])?.p)
            }
            TestKind::KruskalWallis => Ok(kruskal_wallis(groups)?.p),
        }
    }
}

/// Fraction of `n_boot` resamples (each group redrawn with replacement to its
/// own size) in which `test` gives `p < alpha`. Resample `i` draws from
/// `derive_seed(seed, i)`.
pub fn bootstrap_power(
    groups: &[&[f64]],
    test: TestKind,
    n_boot: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64, StatsError> {
    if n_boot == 0 {
        return Err(StatsError::Bootstrap("n_boot must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::Bootstrap(format!("alpha {alpha} outside (0, 1)")));
    }
    test.p_value(groups)?;
    let hits = (0..n_boot)
        .into_par_iter()
        .map(|i| -> Result<usize, StatsError> {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let resampled: Vec<Vec<f64>> = groups
                .iter()
                .map(|g| (0..g.len()).map(|_| g[rng.random_range(0..g.len())]).collect())
                .collect();
            let views: Vec<&[f64]> = resampled.iter().map(Vec::as_slice).collect();
            Ok(usize::from(test.p_value(&views)? < alpha))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(hits as f64 / n_boot as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedGroup {
    pub id: String,
    pub mean: f64,
    /// Competition ranking: 1 + the number of groups whose mean exceeds this
    /// one by at least the tie tolerance.
    pub rank: usize,
}

/// Orders groups by mean score, descending. Means closer than `tolerance`
/// to each other share a rank.
pub fn rank_groups(groups: &[(String, Vec<f64>)], tolerance: f64) -> Result<Vec<RankedGroup>, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    let views: Vec<&[f64]> = groups.iter().map(|(_, v)| v.as_slice()).collect();
    check_samples(&views)?;
    let means: Vec<f64> = views.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let mut ranked: Vec<RankedGroup> = groups
        .iter()
        .zip(&means)
        .map(|((id, _), &mean)| RankedGroup {
            id: id.clone(),
            mean,
            rank: 1 + means.iter().filter(|&&other| other - mean >= tolerance).count(),
        })
        .collect();
    ranked.sort_by(|a, b| a.rank.cmp(&b.rank).then_with(|| b.mean.total_cmp(&a.mean)).then_with(|| a.id.cmp(&b.id)));
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    CliffsDelta,
    EtaSquared,
}

/// One comparison row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    /// Comparison setting, e.g. a model family.
    pub group: String,
    pub metric: String,
    pub method_id: String,
    pub test_name: TestKind,
    pub statistic: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub effect_size: f64,
    pub effect_kind: EffectKind,
    pub interpretation: EffectLabel,
    pub power: f64,
    pub group_ids: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonOptions {
    pub n_boot: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ComparisonOptions {
    fn default() -> Self {
        Self { n_boot: 1000, alpha: 0.05, seed: 0 }
    }
}

/// Runs the test matching the group count, attaches its effect size and
/// bootstrap power. `p_adjusted` is left equal to `p_raw`; use
/// [`adjust_results`] across a batch.
pub fn compare_groups(
    group: &str,
    metric: &str,
    method_id: &str,
    groups: &[(String, Vec<f64>)],
    options: ComparisonOptions,
) -> Result<TestResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    let views: Vec<&[f64]> = groups.iter().map(|(_, v)| v.as_slice()).collect();
    let kind = TestKind::for_group_count(groups.len());
    let (statistic, p_raw, effect, effect_kind) = match kind {
        TestKind::MannWhitneyU => {
            let t = mann_whitney_u(views[0], views[1])?;
            (t.u, t.p, cliffs_delta(views[0], views[1])?, EffectKind::CliffsDelta)
        }
        TestKind::KruskalWallis => {
            let t = kruskal_wallis(&views)?;
            let n = views.iter().map(|v| v.len()).sum();
            (t.h, t.p, eta_squared(t.h, views.len(), n)?, EffectKind::EtaSquared)
        }
    };
    let power = bootstrap_power(&views, kind, options.n_boot, options.alpha, options.seed)?;
    Ok(TestResult {
        group: group.to_string(),
        metric: metric.to_string(),
        method_id: method_id.to_string(),
        test_name: kind,
        statistic,
        p_raw,
        p_adjusted: p_raw,
        effect_size: effect.value,
        effect_kind,
        interpretation: effect.label,
        power,
        group_ids: groups.iter().map(|(id, _)| id.clone()).collect(),
        seed: options.seed,
    })
}

/// Benjamini-Hochberg over every row of the batch jointly.
pub fn adjust_results(results: &mut [TestResult]) -> Result<(), StatsError> {
    let raw: Vec<f64> = results.iter().map(|r| r.p_raw).collect();
    for (r, p) in results.iter_mut().zip(benjamini_hochberg(&raw)?) {
        r.p_adjusted = p;
    }
    Ok(())
}

pub const RESULTS_CSV_HEADER: &str = "group,metric,method_id,test_name,statistic,p_raw,p_adjusted,\
effect_kind,effect_size,interpretation,power,group_ids,seed";

/// `group_ids` are joined with `;`.
pub fn write_results_csv<W: Write>(writer: W, results: &[TestResult]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(RESULTS_CSV_HEADER.split(','))?;
    for r in results {
        let effect_kind = match r.effect_kind {
            EffectKind::CliffsDelta => "cliffs_delta",
            EffectKind::EtaSquared => "eta_squared",
        };
        out.write_record([
            r.group.clone(),
            r.metric.clone(),
            r.method_id.clone(),
            r.test_name.name().to_string(),
            r.statistic.to_string(),
            r.p_raw.to_string(),
            r.p_adjusted.to_string(),
            effect_kind.to_string(),
            r.effect_size.to_string(),
            r.interpretation.as_str().to_string(),
            r.power.to_string(),
            r.group_ids.join(";"),
            r.seed.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
