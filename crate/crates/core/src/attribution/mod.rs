//! The five explanation methods, written against [`DifferentiableModel`].
//!
//! Every method returns a [`Heatmap`] at input resolution. Saliency and
//! Grad-CAM are non-negative; Integrated Gradients, GradientSHAP and
//! Feature Permutation are signed.

mod controls;
mod permutation;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DifferentiableModel, FeatureMaps, ModelError};
use crate::tensor::{bilinear_upsample, Heatmap, ImageTensor, TensorError};

pub use controls::{ConstantMap, RandomMap};
pub use permutation::{feature_permutation, make_patch_groups, permutation_for, PatchGroupMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttributionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid attribution config: {0}")]
    Config(String),
    #[error("baseline shape {found:?} does not match input {expected:?}")]
    BaselineShape { expected: (usize, usize, usize), found: (usize, usize, usize) },
    #[error("model exposes no convolutional feature maps")]
    NoConvLayer,
    #[error("feature permutation needs a batch of at least 2 images, got {0}")]
    BatchTooSmall(usize),
    #[error("patch size {patch} larger than image {height}x{width}")]
    PatchTooLarge { patch: usize, height: usize, width: usize },
    #[error("{images} images but {targets} targets")]
    TargetCount { images: usize, targets: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub ig_steps: usize,
    /// Constant pixel value of the Integrated Gradients / GradientSHAP
    /// baseline in normalized units; -1 is black after (x - 0.5) / 0.5.
    pub baseline_value: f64,
    pub gs_samples: usize,
    pub gs_noise_std: f64,
    pub fp_patch: usize,
    pub fp_repeats: usize,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            ig_steps: 50,
            baseline_value: -1.0,
            gs_samples: 50,
            gs_noise_std: 0.1,
            fp_patch: 16,
            fp_repeats: 5,
            seed: 0,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<(), AttributionError> {
        let bad = |m: &str| Err(AttributionError::Config(m.into()));
        if self.ig_steps == 0 {
            return bad("ig_steps must be at least 1");
        }
        if self.gs_samples == 0 {
            return bad("gs_samples must be at least 1");
        }
        if !(self.gs_noise_std >= 0.0 && self.gs_noise_std.is_finite()) {
            return bad("gs_noise_std must be finite and non-negative");
        }
        if self.fp_patch == 0 || self.fp_repeats == 0 {
            return bad("fp_patch and fp_repeats must be at least 1");
        }
        if !self.baseline_value.is_finite() {
            return bad("baseline_value must be finite");
        }
        Ok(())
    }

    pub fn baseline_for(&self, image: &ImageTensor) -> ImageTensor {
        let (c, h, w) = image.shape();
        ImageTensor::filled(c, h, w, self.baseline_value).expect("finite baseline of valid shape")
    }
}

/// Identifiers of the five methods, as used in file names and score tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Saliency,
    IntegratedGradients,
    GradientShap,
    GradCam,
    FeaturePermutation,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Saliency,
        Method::IntegratedGradients,
        Method::GradientShap,
        Method::GradCam,
        Method::FeaturePermutation,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::IntegratedGradients => "integrated_gradients",
            Method::GradientShap => "gradient_shap",
            Method::GradCam => "grad_cam",
            Method::FeaturePermutation => "feature_permutation",
        }
    }

    pub fn parse(id: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.id() == id)
    }
}

/// Produces one heatmap per image for a batch. Implemented by
/// [`Method`]-plus-config and by test stubs.
pub trait Explainer: Sync {
    fn id(&self) -> String;

    fn explain_batch(
        &self,
        model: &dyn DifferentiableModel,
        images: &[ImageTensor],
        targets: &[usize],
    ) -> Result<Vec<Heatmap>, AttributionError>;
}

/// A method bound to its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfiguredMethod {
    pub method: Method,
    pub config: AttributionConfig,
}

impl Explainer for ConfiguredMethod {
    fn id(&self) -> String {
        self.method.id().to_string()
    }

    fn explain_batch(
        &self,
        model: &dyn DifferentiableModel,
        images: &[ImageTensor],
        targets: &[usize],
    ) -> Result<Vec<Heatmap>, AttributionError> {
        use rayon::prelude::*;
        if images.len() != targets.len() {
            return Err(AttributionError::TargetCount { images: images.len(), targets: targets.len() });
        }
        self.config.validate()?;
        let cfg = &self.config;
        if self.method == Method::FeaturePermutation {
            return feature_permutation(model, images, targets, cfg.fp_patch, cfg.fp_repeats, cfg.seed);
        }
        images
            .par_iter()
            .zip(targets.par_iter())
            .enumerate()
            .map(|(i, (image, &target))| match self.method {
                Method::Saliency => saliency(model, image, target),
                Method::IntegratedGradients => {
                    integrated_gradients(model, image, target, &cfg.baseline_for(image), cfg.ig_steps)
                }
                Method::GradientShap => gradient_shap(
                    model,
                    image,
                    target,
                    &[cfg.baseline_for(image)],
                    cfg.gs_samples,
                    cfg.gs_noise_std,
                    crate::seed::derive_seed(cfg.seed, i as u64),
                ),
                Method::GradCam => grad_cam(model, image, target),
                Method::FeaturePermutation => unreachable!("handled as a batch"),
            })
            .collect()
    }
}

/// `|d logit[target] / d x|`, reduced over channels with `max`.
pub fn saliency<M: DifferentiableModel + ?Sized>(
    model: &M,
    image: &ImageTensor,
    target: usize,
) -> Result<Heatmap, AttributionError> {
    let grad = model.backward(image, target)?.input_gradient;
    let abs = ImageTensor::new(
        grad.channels(),
        grad.height(),
        grad.width(),
        grad.values().iter().map(|v| v.abs()).collect(),
    )?;
    Ok(abs.channel_max())
}

fn check_baseline(image: &ImageTensor, baseline: &ImageTensor) -> Result<(), AttributionError> {
    if image.shape() != baseline.shape() {
        return Err(AttributionError::BaselineShape { expected: image.shape(), found: baseline.shape() });
    }
    Ok(())
}

/// `(x - x') * mean_k grad f(x' + k/m (x - x'))`, `k = 1..=m` (right-endpoint
/// Riemann sum), summed over channels.
pub fn integrated_gradients<M: DifferentiableModel + ?Sized>(
    model: &M,
    image: &ImageTensor,
    target: usize,
    baseline: &ImageTensor,
    steps: usize,
) -> Result<Heatmap, AttributionError> {
    if steps == 0 {
        return Err(AttributionError::Config("integrated gradients needs at least one step".into()));
    }
    check_baseline(image, baseline)?;
    model.check_target(target)?;
    let mut total = vec![0.0; image.len()];
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        let point = baseline.lerp(image, alpha);
        let grad = model.backward(&point, target)?.input_gradient;
        for (t, g) in total.iter_mut().zip(grad.values()) {
            *t += g;
        }
    }
    scaled_by_difference(image, baseline, &total, steps)
}

fn scaled_by_difference(
    image: &ImageTensor,
    baseline: &ImageTensor,
    gradient_sum: &[f64],
    count: usize,
) -> Result<Heatmap, AttributionError> {
    let values = image
        .values()
        .iter()
        .zip(baseline.values())
        .zip(gradient_sum)
        .map(|((x, b), g)| (x - b) * g / count as f64)
        .collect();
    let (c, h, w) = image.shape();
    Ok(ImageTensor::new(c, h, w, values)?.channel_sum())
}

/// Expected-gradients estimate: for each sample, pick a baseline uniformly,
/// draw `alpha ~ U(0, 1)`, add `N(0, noise_std^2)` noise to the input, take the
/// gradient at `baseline + alpha (noisy - baseline)` and scale it by
/// `(image - baseline)`. Averaged over samples, summed over channels.
pub fn gradient_shap<M: DifferentiableModel + ?Sized>(
    model: &M,
    image: &ImageTensor,
    target: usize,
    baselines: &[ImageTensor],
    samples: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Heatmap, AttributionError> {
    if baselines.is_empty() {
        return Err(AttributionError::Config("gradient_shap needs at least one baseline".into()));
    }
    if samples == 0 {
        return Err(AttributionError::Config("gradient_shap needs at least one sample".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(AttributionError::Config("noise std must be finite and non-negative".into()));
    }
    for b in baselines {
        check_baseline(image, b)?;
    }
    model.check_target(target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).expect("validated std");
    let mut total = vec![0.0; image.len()];
    for _ in 0..samples {
        let baseline = &baselines[rng.random_range(0..baselines.len())];
        let alpha: f64 = rng.random();
        let mut noisy = image.clone();
        if noise_std > 0.0 {
            for v in noisy.values_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        let point = baseline.lerp(&noisy, alpha);
        let grad = model.backward(&point, target)?.input_gradient;
        for ((t, g), (x, b)) in
            total.iter_mut().zip(grad.values()).zip(image.values().iter().zip(baseline.values()))
        {
            *t += g * (x - b);
        }
    }
    let (c, h, w) = image.shape();
    let values = total.into_iter().map(|t| t / samples as f64).collect();
    Ok(ImageTensor::new(c, h, w, values)?.channel_sum())
}

/// Grad-CAM map at feature resolution, before upsampling:
/// `ReLU(sum_k w_k A_k)` with `w_k` the spatial mean of `dy/dA_k`.
pub fn grad_cam_map(maps: &FeatureMaps) -> Result<Heatmap, AttributionError> {
    let plane = maps.height * maps.width;
    let mut cam = vec![0.0; plane];
    for k in 0..maps.channels {
        let grads = &maps.gradients[k * plane..(k + 1) * plane];
        let weight = grads.iter().sum::<f64>() / plane as f64;
        for (c, a) in cam.iter_mut().zip(&maps.activations[k * plane..(k + 1) * plane]) {
            *c += weight * a;
        }
    }
    Ok(Heatmap::new(maps.height, maps.width, cam.into_iter().map(|v| v.max(0.0)).collect())?)
}

/// Grad-CAM from the model's last convolutional layer, bilinearly upsampled
/// to the input resolution.
pub fn grad_cam<M: DifferentiableModel + ?Sized>(
    model: &M,
    image: &ImageTensor,
    target: usize,
) -> Result<Heatmap, AttributionError> {
    let maps = model.backward(image, target)?.feature_maps.ok_or(AttributionError::NoConvLayer)?;
    let cam = grad_cam_map(&maps)?;
    Ok(bilinear_upsample(&cam, image.height(), image.width())?)
}
