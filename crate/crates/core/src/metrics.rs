//! Ground-truth localization metrics: Relevance Rank Accuracy and
//! Dual-Polarity Precision, plus mask statistics and grouped aggregation.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BinaryMask, Heatmap};

/// Default guard added to the DPP denominators.
pub const DPP_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: heatmap {heatmap:?} vs mask {mask:?}")]
    ShapeMismatch { heatmap: (usize, usize), mask: (usize, usize) },
    #[error("undefined RRA: mask has no foreground pixels")]
    EmptyMask,
    #[error("cannot aggregate an empty record list")]
    NoRecords,
    #[error("invalid score record: {0}")]
    InvalidRecord(String),
}

fn check_shapes(heatmap: &Heatmap, mask: &BinaryMask) -> Result<(), MetricError> {
    if heatmap.shape() != mask.shape() {
        return Err(MetricError::ShapeMismatch { heatmap: heatmap.shape(), mask: mask.shape() });
    }
    Ok(())
}

/// Fraction of the `K = |GT|` highest-valued pixels that fall inside the mask.
///
/// Ties at the cut-off are broken by ascending row-major index.
pub fn rra(heatmap: &Heatmap, mask: &BinaryMask) -> Result<f64, MetricError> {
    check_shapes(heatmap, mask)?;
    let k = mask.count();
    if k == 0 {
        return Err(MetricError::EmptyMask);
    }
    let values = heatmap.values();
    let mut order: Vec<usize> = (0..values.len()).collect();
    let by_rank = |&a: &usize, &b: &usize| values[b].total_cmp(&values[a]).then(a.cmp(&b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_rank);
    }
    let inside = mask.values();
    let hits = order[..k].iter().filter(|&&i| inside[i]).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DppBreakdown {
    /// Positive mass inside the mask.
    pub tpa: f64,
    /// Positive mass outside the mask.
    pub fpa: f64,
    /// Negative mass outside the mask.
    pub tna: f64,
    /// Negative mass inside the mask.
    pub fna: f64,
    pub p_pos: f64,
    pub p_neg: f64,
    pub dpp: f64,
    pub epsilon: f64,
}

pub fn dpp(heatmap: &Heatmap, mask: &BinaryMask) -> Result<DppBreakdown, MetricError> {
    dpp_with_epsilon(heatmap, mask, DPP_EPSILON)
}

pub fn dpp_with_epsilon(
    heatmap: &Heatmap,
    mask: &BinaryMask,
    epsilon: f64,
) -> Result<DppBreakdown, MetricError> {
    check_shapes(heatmap, mask)?;
    let (mut tpa, mut fpa, mut tna, mut fna) = (0.0, 0.0, 0.0, 0.0);
    for (&v, &inside) in heatmap.values().iter().zip(mask.values()) {
        let pos = v.max(0.0);
        let neg = (-v).max(0.0);
        if inside {
            tpa += pos;
            fna += neg;
        } else {
            fpa += pos;
            tna += neg;
        }
    }
    let p_pos = tpa / (tpa + fpa + epsilon);
    let p_neg = tna / (tna + fna + epsilon);
    Ok(DppBreakdown { tpa, fpa, tna, fna, p_pos, p_neg, dpp: (p_pos + p_neg) / 2.0, epsilon })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub area: usize,
    /// Percent of the image covered by the mask.
    pub ratio: f64,
}

pub fn mask_stats(mask: &BinaryMask) -> MaskStats {
    let area = mask.count();
    let total = mask.height() * mask.width();
    MaskStats { area, ratio: 100.0 * area as f64 / total as f64 }
}

/// One (image, model, method, seed) evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub model_id: String,
    pub method_id: String,
    pub seed: u64,
    pub rra: f64,
    pub dpp: DppBreakdown,
}

impl ScoreRecord {
    pub fn row(&self) -> ScoreRow {
        ScoreRow {
            image_id: self.image_id.clone(),
            model_id: self.model_id.clone(),
            method_id: self.method_id.clone(),
            seed: self.seed,
            rra: self.rra,
            p_pos: self.dpp.p_pos,
            p_neg: self.dpp.p_neg,
            dpp: self.dpp.dpp,
        }
    }
}

/// Flat CSV form of a [`ScoreRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: String,
    pub model_id: String,
    pub method_id: String,
    pub seed: u64,
    pub rra: f64,
    pub p_pos: f64,
    pub p_neg: f64,
    pub dpp: f64,
}

impl ScoreRow {
    fn validate(&self) -> Result<(), MetricError> {
        if self.image_id.is_empty() || self.model_id.is_empty() || self.method_id.is_empty() {
            return Err(MetricError::InvalidRecord("empty identifier".into()));
        }
        let scores = [self.rra, self.p_pos, self.p_neg, self.dpp];
        if scores.iter().any(|s| !s.is_finite() || !(0.0..=1.0).contains(s)) {
            return Err(MetricError::InvalidRecord(format!("score out of [0,1] for {}", self.image_id)));
        }
        Ok(())
    }

    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Rra => self.rra,
            Metric::PPos => self.p_pos,
            Metric::PNeg => self.p_neg,
            Metric::Dpp => self.dpp,
        }
    }

    fn key(&self, part: GroupKey) -> String {
        match part {
            GroupKey::Image => self.image_id.clone(),
            GroupKey::Model => self.model_id.clone(),
            GroupKey::Method => self.method_id.clone(),
            GroupKey::Seed => self.seed.to_string(),
        }
    }
}

pub const SCORE_CSV_HEADER: &str = "image_id,model_id,method_id,seed,rra,p_pos,p_neg,dpp";

pub fn write_scores_csv<W: Write>(writer: W, rows: &[ScoreRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record(SCORE_CSV_HEADER.split(','))?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads score rows, requiring the exact header and validating every row.
pub fn read_scores_csv<R: Read>(reader: R) -> Result<Vec<ScoreRow>, MetricError> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(|e| MetricError::InvalidRecord(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != SCORE_CSV_HEADER {
        return Err(MetricError::InvalidRecord(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for row in r.deserialize::<ScoreRow>() {
        let row = row.map_err(|e| MetricError::InvalidRecord(e.to_string()))?;
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_scores_jsonl<W: Write>(mut writer: W, records: &[ScoreRecord]) -> std::io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut writer, rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rra,
    PPos,
    PNeg,
    Dpp,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Rra, Metric::PPos, Metric::PNeg, Metric::Dpp];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rra => "rra",
            Metric::PPos => "p_pos",
            Metric::PNeg => "p_neg",
            Metric::Dpp => "dpp",
        }
    }

    pub fn parse(name: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Image,
    Model,
    Method,
    Seed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single observation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub key: Vec<String>,
    pub count: usize,
    pub rra: MeanStd,
    pub p_pos: MeanStd,
    pub p_neg: MeanStd,
    pub dpp: MeanStd,
}

/// Per-group mean and sample std of every metric, groups in lexicographic key order.
pub fn aggregate(rows: &[ScoreRow], group_by: &[GroupKey]) -> Result<Vec<AggregateRow>, MetricError> {
    if rows.is_empty() {
        return Err(MetricError::NoRecords);
    }
    let mut groups: BTreeMap<Vec<String>, Vec<&ScoreRow>> = BTreeMap::new();
    for row in rows {
        let key = group_by.iter().map(|&k| row.key(k)).collect();
        groups.entry(key).or_default().push(row);
    }
    Ok(groups
        .into_iter()
        .map(|(key, members)| {
            let stat = |m: Metric| MeanStd::of(&members.iter().map(|r| r.metric(m)).collect::<Vec<_>>());
            AggregateRow {
                key,
                count: members.len(),
                rra: stat(Metric::Rra),
                p_pos: stat(Metric::PPos),
                p_neg: stat(Metric::PNeg),
                dpp: stat(Metric::Dpp),
            }
        })
        .collect())
}

impl GroupKey {
    pub fn column(self) -> &'static str {
        match self {
            GroupKey::Image => "image_id",
            GroupKey::Model => "model_id",
            GroupKey::Method => "method_id",
            GroupKey::Seed => "seed",
        }
    }
}

/// Key columns named after `group_by`, then `count` and a mean/std pair per metric.
pub fn write_aggregate_csv<W: Write>(writer: W, rows: &[AggregateRow], group_by: &[GroupKey]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = group_by.iter().map(|k| k.column().to_string()).collect();
    header.push("count".into());
    for m in Metric::ALL {
        header.push(format!("{}_mean", m.name()));
        header.push(format!("{}_std", m.name()));
    }
    out.write_record(&header)?;
    for row in rows {
        let mut record = row.key.clone();
        record.push(row.count.to_string());
        for stat in [row.rra, row.p_pos, row.p_neg, row.dpp] {
            record.push(stat.mean.to_string());
            record.push(stat.std.to_string());
        }
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hm(h: usize, w: usize, v: &[f64]) -> Heatmap {
        Heatmap::new(h, w, v.to_vec()).unwrap()
    }

    fn mask(h: usize, w: usize, v: &[u8]) -> BinaryMask {
        BinaryMask::new(h, w, v.iter().map(|&b| b != 0).collect()).unwrap()
    }

    #[test]
    fn rra_examples() {
        let m = mask(2, 2, &[1, 0, 0, 1]);
        assert_eq!(rra(&m.to_heatmap(), &m).unwrap(), 1.0);
        let h = hm(2, 2, &[0.9, 0.8, 0.1, 0.2]);
        assert_eq!(rra(&h, &m).unwrap(), 0.5);
        let full = mask(2, 2, &[1, 1, 1, 1]);
        assert_eq!(rra(&h, &full).unwrap(), 1.0);
    }

    #[test]
    fn rra_errors() {
        let h = hm(2, 2, &[0.0; 4]);
        assert_eq!(rra(&h, &mask(2, 2, &[0; 4])), Err(MetricError::EmptyMask));
        assert!(matches!(rra(&h, &mask(1, 4, &[1; 4])), Err(MetricError::ShapeMismatch { .. })));
    }

    #[test]
    fn rra_ties_prefer_lower_index() {
        // all equal: top-1 is index 0
        let h = hm(1, 3, &[0.5, 0.5, 0.5]);
        assert_eq!(rra(&h, &mask(1, 3, &[1, 0, 0])).unwrap(), 1.0);
        assert_eq!(rra(&h, &mask(1, 3, &[0, 0, 1])).unwrap(), 0.0);
    }

    #[test]
    fn dpp_examples() {
        let zero = dpp(&hm(2, 2, &[0.0; 4]), &mask(2, 2, &[1, 0, 0, 0])).unwrap();
        assert_eq!((zero.p_pos, zero.p_neg, zero.dpp), (0.0, 0.0, 0.0));

        let h = hm(2, 2, &[2.0, -1.0, 1.0, -2.0]);
        let left = mask(2, 2, &[1, 0, 1, 0]);
        let b = dpp(&h, &left).unwrap();
        assert_eq!((b.tpa, b.fpa, b.tna, b.fna), (3.0, 0.0, 3.0, 0.0));
        assert!((b.dpp - 1.0).abs() < 1e-12);

        let pos = hm(2, 2, &[0.5, 0.0, 2.0, 0.0]);
        let b = dpp(&pos, &left).unwrap();
        assert!((b.p_pos - 1.0).abs() < 1e-12);
        assert_eq!(b.p_neg, 0.0);
        assert!((b.dpp - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dpp_accepts_empty_mask() {
        let b = dpp(&hm(1, 2, &[1.0, -1.0]), &mask(1, 2, &[0, 0])).unwrap();
        assert_eq!(b.p_pos, 0.0);
        assert!((b.p_neg - 1.0).abs() < 1e-11);
    }

    #[test]
    fn mask_stats_examples() {
        let full = BinaryMask::from_fn(224, 224, |_, _| true).unwrap();
        assert_eq!(mask_stats(&full), MaskStats { area: 50176, ratio: 100.0 });
        let empty = BinaryMask::from_fn(224, 224, |_, _| false).unwrap();
        assert_eq!(mask_stats(&empty), MaskStats { area: 0, ratio: 0.0 });
        let mut n = 0;
        let some = BinaryMask::from_fn(224, 224, |_, _| {
            n += 1;
            n <= 9076
        })
        .unwrap();
        let s = mask_stats(&some);
        assert_eq!(s.area, 9076);
        assert!((s.ratio - 18.09).abs() < 0.005);
    }

    fn row(model: &str, method: &str, v: f64) -> ScoreRow {
        ScoreRow {
            image_id: "i".into(),
            model_id: model.into(),
            method_id: method.into(),
            seed: 0,
            rra: v,
            p_pos: v,
            p_neg: v,
            dpp: v,
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[row("m", "s", 0.3)], &[GroupKey::Model]).unwrap();
        assert_eq!(one[0].rra, MeanStd { mean: 0.3, std: 0.0 });

        let two = aggregate(&[row("m", "s", 0.0), row("m", "s", 1.0)], &[GroupKey::Model]).unwrap();
        assert_eq!(two[0].rra.mean, 0.5);
        assert!((two[0].rra.std - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);

        let rows = vec![
            row("b", "x", 0.1),
            row("a", "y", 0.2),
            row("a", "x", 0.3),
            row("b", "x", 0.4),
            row("a", "x", 0.5),
        ];
        let agg = aggregate(&rows, &[GroupKey::Model, GroupKey::Method]).unwrap();
        let keys: Vec<_> = agg.iter().map(|r| r.key.join("/")).collect();
        assert_eq!(keys, ["a/x", "a/y", "b/x"]);
        assert_eq!(aggregate(&[], &[GroupKey::Model]), Err(MetricError::NoRecords));
    }

    #[test]
    fn scores_csv_round_trip_and_header() {
        let rows = vec![row("m", "saliency", 0.25), row("m", "grad_cam", 1.0)];
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(SCORE_CSV_HEADER));
        assert_eq!(read_scores_csv(&buf[..]).unwrap(), rows);
        let bad = "a,b\n1,2\n";
        assert!(read_scores_csv(bad.as_bytes()).is_err());
        let out_of_range = format!("{SCORE_CSV_HEADER}\ni,m,s,0,1.5,0,0,0\n");
        assert!(read_scores_csv(out_of_range.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn rra_is_rank_based(
            vals in prop::collection::vec(-5.0f64..5.0, 16),
            bits in prop::collection::vec(any::<bool>(), 16),
        ) {
            prop_assume!(bits.iter().any(|&b| b));
            let h = hm(4, 4, &vals);
            let m = BinaryMask::new(4, 4, bits).unwrap();
            let base = rra(&h, &m).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            let transformed = h.map(|v| v.exp() * 3.0 + 1.0);
            prop_assert_eq!(rra(&transformed, &m).unwrap(), base);
        }

        #[test]
        fn dpp_bounded_and_scale_invariant(
            vals in prop::collection::vec(-5.0f64..5.0, 16),
            bits in prop::collection::vec(any::<bool>(), 16),
            c in 0.01f64..100.0,
        ) {
            let h = hm(4, 4, &vals);
            let m = BinaryMask::new(4, 4, bits).unwrap();
            let a = dpp_with_epsilon(&h, &m, 0.0).unwrap();
            let b = dpp_with_epsilon(&h.map(|v| v * c), &m, 0.0).unwrap();
            if a.tpa + a.fpa > 0.0 && a.tna + a.fna > 0.0 {
                prop_assert!((a.dpp - b.dpp).abs() < 1e-12);
            }
            let d = dpp(&h, &m).unwrap();
            prop_assert!((0.0..=1.0).contains(&d.dpp));
            prop_assert_eq!(d.dpp, (d.p_pos + d.p_neg) / 2.0);
        }

        #[test]
        fn nonnegative_maps_cap_at_half(
            vals in prop::collection::vec(0.0f64..5.0, 16),
            bits in prop::collection::vec(any::<bool>(), 16),
        ) {
            let m = BinaryMask::new(4, 4, bits).unwrap();
            prop_assert!(dpp(&hm(4, 4, &vals), &m).unwrap().dpp <= 0.5 + DPP_EPSILON);
        }
    }
}
