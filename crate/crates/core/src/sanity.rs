//! Fidelity checks: model-parameter randomization (degradation) and input
//! randomization (sensitivity with Cliff's delta).

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::attribution::{AttributionError, Explainer};
use crate::metrics::MeanStd;
use crate::model::{DifferentiableModel, ModelError};
use crate::seed::derive_seed;
use crate::stats::{cliffs_delta, EffectLabel, StatsError};
use crate::tensor::{l2_distance, pearson_correlation, Heatmap, ImageTensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SanityError {
    #[error("no images given")]
    NoImages,
    #[error("input randomization needs at least 2 images, got {0}")]
    SingleImage(usize),
    #[error("{images} images but {targets} targets")]
    TargetCount { images: usize, targets: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Declared in every report: which distance distributions Cliff's delta compares.
pub const DELTA_GROUPS: &str =
    "x = original-vs-shuffled distance per image; y = original-vs-original distance per image pair";

fn check_batch(images: &[ImageTensor], targets: &[usize]) -> Result<(), SanityError> {
    if images.is_empty() {
        return Err(SanityError::NoImages);
    }
    if images.len() != targets.len() {
        return Err(SanityError::TargetCount { images: images.len(), targets: targets.len() });
    }
    Ok(())
}

/// `1 - |r|` between two explanations. A constant map on exactly one side
/// scores 1; two constant maps score 0 when equal and 1 otherwise.
pub fn degradation(original: &Heatmap, perturbed: &Heatmap) -> Result<f64, TensorError> {
    let corr = pearson_correlation(original, perturbed)?;
    if !corr.degenerate {
        return Ok((1.0 - corr.r.abs()).clamp(0.0, 1.0));
    }
    match (original.is_constant(), perturbed.is_constant()) {
        (true, true) if original.values()[0] == perturbed.values()[0] => Ok(0.0),
        _ => Ok(1.0),
    }
}

/// `min(n, total)` distinct layer indices, sorted.
pub fn choose_layers(total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, total, n.min(total)).into_vec();
    chosen.sort_unstable();
    chosen
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRandomization {
    pub layers: Vec<usize>,
    pub layer_names: Vec<String>,
    /// Seed handed to `randomize_layers`.
    pub reinit_seed: u64,
    pub degradation: Vec<f64>,
}

/// Explains `images` with `model` and with a copy whose randomly chosen
/// layers are re-initialized, and scores each pair with [`degradation`].
/// Layer choice and the re-initialization seed both come from `seed`.
pub fn layer_randomization_check<M: DifferentiableModel + 'static>(
    model: &M,
    explainer: &dyn Explainer,
    images: &[ImageTensor],
    targets: &[usize],
    n_layers: usize,
    seed: u64,
) -> Result<LayerRandomization, SanityError> {
    check_batch(images, targets)?;
    let names = model.layer_names();
    let layers = choose_layers(names.len(), n_layers, seed);
    let reinit_seed = {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, names.len() as u64));
        rng.next_u64()
    };
    let perturbed = model.randomize_layers(&layers, reinit_seed)?;
    let before = explainer.explain_batch(model, images, targets)?;
    let after = explainer.explain_batch(&perturbed, images, targets)?;
    let degradation =
        before.iter().zip(&after).map(|(a, b)| degradation(a, b)).collect::<Result<Vec<_>, _>>()?;
    Ok(LayerRandomization {
        layer_names: layers.iter().map(|&l| names[l].clone()).collect(),
        layers,
        reinit_seed,
        degradation,
    })
}

/// One uniform permutation of the `(row, col)` positions, shared by all channels.
pub fn pixel_shuffle(image: &ImageTensor, seed: u64) -> ImageTensor {
    let (c, h, w) = image.shape();
    let plane = h * w;
    let mut perm: Vec<usize> = (0..plane).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let src = image.values();
    let values = (0..c * plane).map(|i| src[(i / plane) * plane + perm[i % plane]]).collect();
    ImageTensor::new(c, h, w, values).expect("permutation keeps values finite")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputRandomization {
    /// Original vs shuffled explanation, per image.
    pub distances: Vec<f64>,
    /// Original vs original explanation for every unordered image pair.
    pub reference_distances: Vec<f64>,
    pub cliffs_delta: f64,
    pub interpretation: EffectLabel,
    pub normalized: bool,
}

/// Shuffles image `i` with `derive_seed(seed, i)` and measures how far its
/// explanation moves; Cliff's delta contrasts those distances with the
/// distances between explanations of different original images.
pub fn input_randomization_check(
    model: &dyn DifferentiableModel,
    explainer: &dyn Explainer,
    images: &[ImageTensor],
    targets: &[usize],
    seed: u64,
    normalized: bool,
) -> Result<InputRandomization, SanityError> {
    check_batch(images, targets)?;
    if images.len() < 2 {
        return Err(SanityError::SingleImage(images.len()));
    }
    let shuffled: Vec<ImageTensor> = images
        .par_iter()
        .enumerate()
        .map(|(i, x)| pixel_shuffle(x, derive_seed(seed, i as u64)))
        .collect();
    let original = explainer.explain_batch(model, images, targets)?;
    let moved = explainer.explain_batch(model, &shuffled, targets)?;
    let distances = original
        .iter()
        .zip(&moved)
        .map(|(a, b)| l2_distance(a, b, normalized))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reference_distances = Vec::with_capacity(images.len() * (images.len() - 1) / 2);
    for i in 0..original.len() {
        for j in i + 1..original.len() {
            reference_distances.push(l2_distance(&original[i], &original[j], normalized)?);
        }
    }
    let delta = cliffs_delta(&distances, &reference_distances)?;
    Ok(InputRandomization {
        distances,
        reference_distances,
        cliffs_delta: delta.value,
        interpretation: delta.label,
        normalized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SanityImageRow {
    pub image_id: String,
    pub degradation: f64,
    pub distance: f64,
}

/// Both checks for one (model, method).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SanityReport {
    pub model_id: String,
    pub method_id: String,
    pub seed: u64,
    pub n_layers: usize,
    pub randomized_layers: Vec<String>,
    pub degradation: MeanStd,
    pub sensitivity: MeanStd,
    pub cliffs_delta: f64,
    pub interpretation: EffectLabel,
    pub normalized: bool,
    pub delta_groups: String,
    pub per_image: Vec<SanityImageRow>,
}

impl SanityReport {
    pub fn new(
        model_id: &str,
        method_id: &str,
        seed: u64,
        n_layers: usize,
        image_ids: &[String],
        layers: &LayerRandomization,
        inputs: &InputRandomization,
    ) -> SanityReport {
        SanityReport {
            model_id: model_id.to_string(),
            method_id: method_id.to_string(),
            seed,
            n_layers,
            randomized_layers: layers.layer_names.clone(),
            degradation: MeanStd::of(&layers.degradation),
            sensitivity: MeanStd::of(&inputs.distances),
            cliffs_delta: inputs.cliffs_delta,
            interpretation: inputs.interpretation,
            normalized: inputs.normalized,
            delta_groups: DELTA_GROUPS.to_string(),
            per_image: image_ids
                .iter()
                .zip(layers.degradation.iter().zip(&inputs.distances))
                .map(|(id, (&degradation, &distance))| SanityImageRow {
                    image_id: id.clone(),
                    degradation,
                    distance,
                })
                .collect(),
        }
    }
}

pub const SANITY_CSV_HEADER: &str = "model_id,method_id,degradation_mean,degradation_std,\
sensitivity_mean,sensitivity_std,cliffs_delta,interpretation,seed";

/// One summary row per report.
pub fn write_sanity_csv<W: Write>(writer: W, reports: &[SanityReport]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(SANITY_CSV_HEADER.split(','))?;
    for r in reports {
        out.write_record([
            r.model_id.clone(),
            r.method_id.clone(),
            r.degradation.mean.to_string(),
            r.degradation.std.to_string(),
            r.sensitivity.mean.to_string(),
            r.sensitivity.std.to_string(),
            r.cliffs_delta.to_string(),
            r.interpretation.as_str().to_string(),
            r.seed.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
