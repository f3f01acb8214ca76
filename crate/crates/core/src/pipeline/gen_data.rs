use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{require_path, require_seed, OutputDir, PipelineError, Provenance, Result, RunSummary};
use crate::io::{encode_greyscale_png, Manifest, ManifestRecord};
use crate::metrics::mask_stats;
use crate::npy::{self, Dtype};
use crate::refnet::RefNet;
use crate::seed::derive_seed;
use crate::tensor::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub seed: Option<u64>,
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    /// Target fraction of each image covered by its mask, in (0, 1).
    pub signal_area_fraction: f64,
    pub classes: usize,
    /// Leading share of images assigned to the "train" split; the rest are "test".
    pub train_fraction: f64,
    pub out: Option<PathBuf>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            seed: None,
            n_images: 100,
            height: 32,
            width: 32,
            signal_area_fraction: 0.18,
            classes: 2,
            train_fraction: 0.0,
            out: None,
        }
    }
}

impl GenDataConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(format!("[gen_data] {m}")));
        if !(self.signal_area_fraction > 0.0 && self.signal_area_fraction < 1.0) {
            return bad("signal_area_fraction must be in (0, 1)");
        }
        if self.n_images == 0 || self.height == 0 || self.width == 0 {
            return bad("n_images, height and width must be positive");
        }
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad("train_fraction must be in [0, 1]");
        }
        Ok(())
    }
}

/// Rectangle or ellipse of roughly `fraction * h * w` pixels at a random position.
fn random_region(rng: &mut ChaCha8Rng, h: usize, w: usize, fraction: f64) -> BinaryMask {
    let area = fraction * (h * w) as f64;
    let aspect = rng.random_range(0.5f64.ln()..2.0f64.ln()).exp();
    let mask = if rng.random_bool(0.5) {
        let rows = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let cols = ((area / rows as f64).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - rows);
        let left = rng.random_range(0..=w - cols);
        BinaryMask::from_fn(h, w, |r, c| (top..top + rows).contains(&r) && (left..left + cols).contains(&c))
            .expect("positive dimensions")
    } else {
        let a = (area * aspect / PI).sqrt().min(h as f64 / 2.0);
        let b = (area / (aspect * PI)).sqrt().min(w as f64 / 2.0);
        let cy = if h as f64 > 2.0 * a { rng.random_range(a..=h as f64 - a) } else { h as f64 / 2.0 };
        let cx = if w as f64 > 2.0 * b { rng.random_range(b..=w as f64 - b) } else { w as f64 / 2.0 };
        BinaryMask::from_fn(h, w, |r, c| {
            let dy = (r as f64 + 0.5 - cy) / a;
            let dx = (c as f64 + 0.5 - cx) / b;
            dy * dy + dx * dx <= 1.0
        })
        .expect("positive dimensions")
    };
    if mask.count() > 0 {
        return mask;
    }
    let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
    BinaryMask::from_fn(h, w, |r, c| r == r0 && c == c0).expect("positive dimensions")
}

/// Class `k` plants a stripe pattern inside the mask: horizontal for even
/// classes, vertical for odd, with period `k / 2 + 2`. Background is
/// clipped Gaussian noise. Values are in normalized units [-1, 1].
fn render(rng: &mut ChaCha8Rng, mask: &BinaryMask, label: usize) -> Vec<f64> {
    let noise = Normal::new(0.0, 0.2).expect("valid std");
    let period = (label / 2 + 2) as f64;
    let (h, w) = mask.shape();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut v = noise.sample(rng) - 0.5;
            if mask.get(r, c) {
                let axis = if label.is_multiple_of(2) { r } else { c } as f64;
                v += 0.5 + 0.8 * (2.0 * PI * axis / period).cos();
            }
            out.push(v.clamp(-1.0, 1.0));
        }
    }
    out
}

#[derive(Serialize)]
struct DatasetStats {
    provenance: Provenance,
    images: usize,
    masks: usize,
    mean_mask_area: f64,
    mean_mask_ratio_percent: f64,
    class_counts: Vec<usize>,
}

/// Writes `images/*.npy` (1, H, W), `masks/*.png`, `manifest.json`,
/// `dataset_stats.json` and a refnet initialized from the same seed under `model/`.
pub fn cmd_gen_data(config: &GenDataConfig) -> Result<RunSummary> {
    config.validate()?;
    let seed = require_seed(config.seed, "gen_data")?;
    let mut out = OutputDir::create(require_path(&config.out, "gen_data", "out")?)?;
    let provenance = Provenance::new("gen-data", config, vec![seed]);
    let (h, w) = (config.height, config.width);
    let n_train = (config.n_images as f64 * config.train_fraction).round() as usize;

    let mut records = Vec::with_capacity(config.n_images);
    let mut ratio_sum = 0.0;
    let mut area_sum = 0.0;
    let mut class_counts = vec![0; config.classes];
    for i in 0..config.n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let label = i % config.classes;
        let mask = random_region(&mut rng, h, w, config.signal_area_fraction);
        let pixels = render(&mut rng, &mask, label);
        let id = format!("img_{i:05}");
        let image_path = format!("images/{id}.npy");
        let mask_path = format!("masks/{id}.png");
        out.write(&image_path, &npy::encode(&[1, h, w], &pixels, Dtype::F8))?;
        let mask_bytes: Vec<u8> = mask.values().iter().map(|&b| if b { 255 } else { 0 }).collect();
        out.write(&mask_path, &encode_greyscale_png(h, w, &mask_bytes))?;
        let stats = mask_stats(&mask);
        ratio_sum += stats.ratio;
        area_sum += stats.area as f64;
        class_counts[label] += 1;
        records.push(ManifestRecord {
            image_id: id,
            image_path,
            mask_path: Some(mask_path),
            label,
            split: if i < n_train { "train" } else { "test" }.to_string(),
        });
    }
    let manifest = Manifest { records, root: out.root().to_path_buf() };
    out.write("manifest.json", (manifest.to_json() + "\n").as_bytes())?;

    let net = RefNet::init(seed, (1, h, w), config.classes)?;
    net.save(out.root().join("model"))?;
    out.record("model/topology.json");
    for layer in net.topology().layers {
        out.record(format!("model/{}", layer.weight_file));
        out.record(format!("model/{}", layer.bias_file));
    }

    let n = config.n_images as f64;
    out.write_json(
        "dataset_stats.json",
        &DatasetStats {
            provenance: provenance.clone(),
            images: config.n_images,
            masks: config.n_images,
            mean_mask_area: area_sum / n,
            mean_mask_ratio_percent: ratio_sum / n,
            class_counts: class_counts.clone(),
        },
    )?;
    out.count("images", config.n_images);
    out.count("train", n_train);
    out.count("test", config.n_images - n_train);
    out.count("mean_mask_ratio_percent", ratio_sum / n);
    out.finish(provenance, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_track_the_target_fraction() {
        let mut total = 0.0;
        let n = 400;
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let m = random_region(&mut rng, 32, 32, 0.18);
            assert!(m.count() > 0);
            total += mask_stats(&m).ratio;
        }
        let mean = total / n as f64;
        assert!((mean - 18.0).abs() < 2.0, "{mean}");
    }

    #[test]
    fn tiny_images_still_get_a_region() {
        for i in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            assert!(random_region(&mut rng, 2, 3, 0.01).count() >= 1);
        }
    }

    #[test]
    fn rejects_bad_fraction() {
        for f in [0.0, 1.0, -0.1, f64::NAN] {
            let c = GenDataConfig { seed: Some(1), signal_area_fraction: f, ..Default::default() };
            assert_eq!(cmd_gen_data(&c).unwrap_err().exit_code(), 2);
        }
        let no_seed = GenDataConfig { out: Some("x".into()), ..Default::default() };
        assert_eq!(cmd_gen_data(&no_seed).unwrap_err().exit_code(), 2);
    }
}
