//! The differentiable-model contract the attribution and sanity modules are
//! written against.

use thiserror::Error;

use crate::tensor::{ImageTensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("input shape {found:?} does not match model input {expected:?}")]
    InputShape { expected: (usize, usize, usize), found: (usize, usize, usize) },
    #[error("target class {target} out of range for {classes} classes")]
    InvalidTarget { target: usize, classes: usize },
    #[error("unknown layer index {index} (model has {layers} layers)")]
    UnknownLayer { index: usize, layers: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Activations of the last convolutional layer together with the gradient
/// of the target logit with respect to them. Both are (K, h, w), channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub activations: Vec<f64>,
    pub gradients: Vec<f64>,
}

/// Result of one reverse pass for a single target class.
#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    pub logits: Vec<f64>,
    /// d logit[target] / d input, same shape as the input.
    pub input_gradient: ImageTensor,
    /// `None` for models without a convolutional layer.
    pub feature_maps: Option<FeatureMaps>,
}

/// A classifier exposing forward logits, exact input gradients, and
/// layer-wise reinitialization.
pub trait DifferentiableModel: Send + Sync {
    /// (channels, height, width) of accepted inputs.
    fn input_shape(&self) -> (usize, usize, usize);

    fn num_classes(&self) -> usize;

    fn forward(&self, image: &ImageTensor) -> Result<Vec<f64>, ModelError>;

    fn backward(&self, image: &ImageTensor, target: usize) -> Result<Backward, ModelError>;

    /// Names of the parameterized layers, in forward order.
    fn layer_names(&self) -> Vec<String>;

    /// Returns a copy whose listed layers are freshly initialized from `seed`.
    fn randomize_layers(&self, layers: &[usize], seed: u64) -> Result<Self, ModelError>
    where
        Self: Sized;

    fn check_input(&self, image: &ImageTensor) -> Result<(), ModelError> {
        if image.shape() != self.input_shape() {
            return Err(ModelError::InputShape { expected: self.input_shape(), found: image.shape() });
        }
        Ok(())
    }

    fn check_target(&self, target: usize) -> Result<(), ModelError> {
        if target >= self.num_classes() {
            return Err(ModelError::InvalidTarget { target, classes: self.num_classes() });
        }
        Ok(())
    }

    fn logit(&self, image: &ImageTensor, target: usize) -> Result<f64, ModelError> {
        self.check_target(target)?;
        Ok(self.forward(image)?[target])
    }
}

/// `logit[c] = bias[c] + sum_i weights[c][i] * x_i`. Gradients are exact and
/// input-independent, which makes it a convenient probe for attribution code.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    shape: (usize, usize, usize),
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearModel {
    pub fn new(
        shape: (usize, usize, usize),
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let n = shape.0 * shape.1 * shape.2;
        if weights.is_empty() || weights.len() != bias.len() || weights.iter().any(|w| w.len() != n) {
            return Err(ModelError::Config("weights must be classes x input_len, bias classes".into()));
        }
        Ok(Self { shape, weights, bias })
    }

    /// Every logit is `value` regardless of input.
    pub fn constant(shape: (usize, usize, usize), classes: usize, value: f64) -> Self {
        let n = shape.0 * shape.1 * shape.2;
        Self { shape, weights: vec![vec![0.0; n]; classes], bias: vec![value; classes] }
    }

    pub fn weights(&self, class: usize) -> &[f64] {
        &self.weights[class]
    }
}

impl DifferentiableModel for LinearModel {
    fn input_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn forward(&self, image: &ImageTensor) -> Result<Vec<f64>, ModelError> {
        self.check_input(image)?;
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(image.values()).map(|(a, x)| a * x).sum::<f64>())
            .collect())
    }

    fn backward(&self, image: &ImageTensor, target: usize) -> Result<Backward, ModelError> {
        self.check_target(target)?;
        let logits = self.forward(image)?;
        let (c, h, w) = self.shape;
        Ok(Backward {
            logits,
            input_gradient: ImageTensor::new(c, h, w, self.weights[target].clone())?,
            feature_maps: None,
        })
    }

    fn layer_names(&self) -> Vec<String> {
        vec!["linear".into()]
    }

    fn randomize_layers(&self, layers: &[usize], seed: u64) -> Result<Self, ModelError> {
        use rand::{Rng, SeedableRng};
        let mut out = self.clone();
        for &l in layers {
            if l != 0 {
                return Err(ModelError::UnknownLayer { index: l, layers: 1 });
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = (1.0 / out.weights[0].len() as f64).sqrt();
            for w in out.weights.iter_mut().flatten() {
                *w = rng.random_range(-a..a);
            }
            for b in out.bias.iter_mut() {
                *b = rng.random_range(-a..a);
            }
        }
        Ok(out)
    }
}
