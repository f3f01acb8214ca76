use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xai_eval::attribution::{AttributionError, ConstantMap, Explainer};
use xai_eval::sanity::{input_randomization_check, layer_randomization_check};
use xai_eval::{DifferentiableModel, Heatmap, ImageTensor, RefNet};

/// Uniform noise seeded from the model's logits, so any weight change yields
/// an independent map.
struct LogitSeededNoise;

impl Explainer for LogitSeededNoise {
    fn id(&self) -> String {
        "noise".into()
    }

    fn explain_batch(
        &self,
        model: &dyn DifferentiableModel,
        images: &[ImageTensor],
        _targets: &[usize],
    ) -> Result<Vec<Heatmap>, AttributionError> {
        images
            .iter()
            .map(|x| {
                let bits = model.forward(x)?.iter().fold(0u64, |acc, v| acc.rotate_left(7) ^ v.to_bits());
                let mut rng = ChaCha8Rng::seed_from_u64(bits);
                Ok(Heatmap::new(x.height(), x.width(), (0..x.height() * x.width()).map(|_| rng.random()).collect())?)
            })
            .collect()
    }
}

fn batch(n: usize, side: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ImageTensor::new(1, side, side, (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

#[test]
fn independent_maps_approach_full_degradation() {
    // E|r| for n independent pairs is about sqrt(2 / (pi (n - 1)))
    let mut previous = 0.0;
    for side in [4usize, 8, 16, 32] {
        let net = RefNet::init(3, (1, side, side), 2).unwrap();
        let images = batch(60, side, side as u64);
        let r = layer_randomization_check(&net, &LogitSeededNoise, &images, &vec![0; 60], 3, 5).unwrap();
        let mean = r.degradation.iter().sum::<f64>() / 60.0;
        let n = (side * side) as f64;
        let oracle = 1.0 - (2.0 / (std::f64::consts::PI * (n - 1.0))).sqrt();
        assert!((mean - oracle).abs() < 0.05, "side {side}: {mean} vs {oracle}");
        assert!(mean > previous);
        previous = mean;
    }
    assert!(previous > 0.95);
}

#[test]
fn constant_stub_is_insensitive() {
    let net = RefNet::init(3, (1, 8, 8), 2).unwrap();
    let images = batch(5, 8, 1);
    let r = input_randomization_check(&net, &ConstantMap { value: 1.0 }, &images, &[0; 5], 2, true).unwrap();
    assert!(r.distances.iter().all(|&d| d == 0.0));
    let layers = layer_randomization_check(&net, &ConstantMap { value: 1.0 }, &images, &[0; 5], 3, 2).unwrap();
    assert!(layers.degradation.iter().all(|&d| d == 0.0));
}

#[test]
fn checks_are_deterministic() {
    let net = RefNet::init(8, (1, 8, 8), 2).unwrap();
    let images = batch(4, 8, 2);
    let a = input_randomization_check(&net, &LogitSeededNoise, &images, &[1; 4], 11, true).unwrap();
    let b = input_randomization_check(&net, &LogitSeededNoise, &images, &[1; 4], 11, true).unwrap();
    assert_eq!(a, b);
    let c = layer_randomization_check(&net, &LogitSeededNoise, &images, &[1; 4], 2, 11).unwrap();
    let d = layer_randomization_check(&net, &LogitSeededNoise, &images, &[1; 4], 2, 11).unwrap();
    assert_eq!(c, d);
}
