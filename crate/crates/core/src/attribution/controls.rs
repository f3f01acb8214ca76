//! Model-independent reference explainers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttributionError, Explainer};
use crate::model::DifferentiableModel;
use crate::seed::derive_seed;
use crate::tensor::{Heatmap, ImageTensor};

/// Returns the same constant map for every input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantMap {
    pub value: f64,
}

impl Explainer for ConstantMap {
    fn id(&self) -> String {
        "control_constant".into()
    }

    fn explain_batch(
        &self,
        _model: &dyn DifferentiableModel,
        images: &[ImageTensor],
        _targets: &[usize],
    ) -> Result<Vec<Heatmap>, AttributionError> {
        images.iter().map(|x| Ok(Heatmap::filled(x.height(), x.width(), self.value)?)).collect()
    }
}

/// `U(-1, 1)` noise; image `i` of a batch draws from `derive_seed(seed, i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomMap {
    pub seed: u64,
}

impl Explainer for RandomMap {
    fn id(&self) -> String {
        "control_random".into()
    }

    fn explain_batch(
        &self,
        _model: &dyn DifferentiableModel,
        images: &[ImageTensor],
        _targets: &[usize],
    ) -> Result<Vec<Heatmap>, AttributionError> {
        images
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, i as u64));
                let values = (0..x.height() * x.width()).map(|_| rng.random_range(-1.0..1.0)).collect();
                Ok(Heatmap::new(x.height(), x.width(), values)?)
            })
            .collect()
    }
}
