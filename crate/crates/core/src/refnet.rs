//! Reference convolutional classifier with exact reverse-mode gradients.
//!
//! Architecture (fixed): `conv3x3(C->8) -> relu -> conv3x3(8->8) -> relu ->
//! global average pool -> linear(8->classes)`. Convolutions use zero padding
//! of one pixel and stride one, so feature maps keep the input resolution.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::LoadError;
use crate::model::{Backward, DifferentiableModel, FeatureMaps, ModelError};
use crate::npy::{self, Dtype};
use crate::seed::derive_seed;
use crate::tensor::ImageTensor;

pub const HIDDEN_CHANNELS: usize = 8;
pub const LAYER_NAMES: [&str; 3] = ["conv1", "conv2", "fc"];
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    out_channels: usize,
    in_channels: usize,
    /// [out][in][ky][kx]
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv {
    fn fan_in(&self) -> usize {
        self.in_channels * KERNEL * KERNEL
    }

    fn w(&self, o: usize, c: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + c) * KERNEL + ky) * KERNEL + kx]
    }

    fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let plane = h * w;
        let mut out = vec![0.0; self.out_channels * plane];
        for o in 0..self.out_channels {
            let dst = &mut out[o * plane..(o + 1) * plane];
            dst.fill(self.bias[o]);
            for c in 0..self.in_channels {
                let src = &input[c * plane..(c + 1) * plane];
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let k = self.w(o, c, ky, kx);
                        // output (y, x) reads input (y + ky - 1, x + kx - 1)
                        let (y0, y1) = valid_range(h, ky);
                        let (x0, x1) = valid_range(w, kx);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let row_out = &mut dst[y * w..(y + 1) * w];
                            let row_in = &src[sy * w..(sy + 1) * w];
                            for x in x0..x1 {
                                row_out[x] += k * row_in[x + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradient w.r.t. the input given the gradient w.r.t. the pre-activation output.
    fn backward_input(&self, grad_out: &[f64], h: usize, w: usize) -> Vec<f64> {
        let plane = h * w;
        let mut grad_in = vec![0.0; self.in_channels * plane];
        for o in 0..self.out_channels {
            let g = &grad_out[o * plane..(o + 1) * plane];
            for c in 0..self.in_channels {
                let dst = &mut grad_in[c * plane..(c + 1) * plane];
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let k = self.w(o, c, ky, kx);
                        let (y0, y1) = valid_range(h, ky);
                        let (x0, x1) = valid_range(w, kx);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            for x in x0..x1 {
                                dst[sy * w + x + kx - 1] += k * g[y * w + x];
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Output rows (or columns) whose tap `k` lands inside the padded input.
fn valid_range(n: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1.min(n), n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    outputs: usize,
    inputs: usize,
    /// [out][in]
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Everything the reverse pass needs from a forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: ImageTensor,
    pub conv1_pre: Vec<f64>,
    pub conv1_act: Vec<f64>,
    pub conv2_pre: Vec<f64>,
    /// Last-conv feature maps `A_k`, (8, H, W).
    pub conv2_act: Vec<f64>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefNet {
    input: (usize, usize, usize),
    classes: usize,
    seed: u64,
    conv1: Conv,
    conv2: Conv,
    fc: Dense,
}

fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let a = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

impl RefNet {
    /// Deterministic `U(-a, a)` initialization, `a = sqrt(1 / fan_in)`; layer
    /// `i` draws from its own stream seeded by `derive_seed(seed, i)`.
    pub fn init(seed: u64, input: (usize, usize, usize), classes: usize) -> Result<Self, ModelError> {
        let (c, h, w) = input;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::Config(format!("invalid input shape {input:?}")));
        }
        if classes < 2 {
            return Err(ModelError::Config("need at least 2 classes".into()));
        }
        let mut net = RefNet {
            input,
            classes,
            seed,
            conv1: Conv { out_channels: HIDDEN_CHANNELS, in_channels: c, weight: vec![], bias: vec![] },
            conv2: Conv {
                out_channels: HIDDEN_CHANNELS,
                in_channels: HIDDEN_CHANNELS,
                weight: vec![],
                bias: vec![],
            },
            fc: Dense { outputs: classes, inputs: HIDDEN_CHANNELS, weight: vec![], bias: vec![] },
        };
        for layer in 0..LAYER_NAMES.len() {
            net.reinit_layer(layer, derive_seed(seed, layer as u64));
        }
        Ok(net)
    }

    fn reinit_layer(&mut self, layer: usize, stream_seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        match layer {
            0 | 1 => {
                let conv = if layer == 0 { &mut self.conv1 } else { &mut self.conv2 };
                let fan_in = conv.fan_in();
                conv.weight = uniform(&mut rng, fan_in, conv.out_channels * fan_in);
                conv.bias = uniform(&mut rng, fan_in, conv.out_channels);
            }
            _ => {
                let fc = &mut self.fc;
                fc.weight = uniform(&mut rng, fc.inputs, fc.outputs * fc.inputs);
                fc.bias = uniform(&mut rng, fc.inputs, fc.outputs);
            }
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Scales the final linear layer (weights and bias) by `factor`.
    pub fn scale_head(&mut self, factor: f64) {
        self.fc.weight.iter_mut().chain(self.fc.bias.iter_mut()).for_each(|v| *v *= factor);
    }

    pub fn trace(&self, image: &ImageTensor) -> Result<ForwardTrace, ModelError> {
        self.check_input(image)?;
        let (_, h, w) = self.input;
        let conv1_pre = self.conv1.forward(image.values(), h, w);
        let conv1_act: Vec<f64> = conv1_pre.iter().map(|&v| v.max(0.0)).collect();
        let conv2_pre = self.conv2.forward(&conv1_act, h, w);
        let conv2_act: Vec<f64> = conv2_pre.iter().map(|&v| v.max(0.0)).collect();
        let plane = (h * w) as f64;
        let pooled: Vec<f64> =
            conv2_act.chunks_exact(h * w).map(|ch| ch.iter().sum::<f64>() / plane).collect();
        let logits = (0..self.classes)
            .map(|k| {
                let row = &self.fc.weight[k * self.fc.inputs..(k + 1) * self.fc.inputs];
                self.fc.bias[k] + row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok(ForwardTrace {
            input: image.clone(),
            conv1_pre,
            conv1_act,
            conv2_pre,
            conv2_act,
            pooled,
            logits,
        })
    }

    /// Exact gradients of `logits[target]` for a previously computed trace.
    pub fn backward_from(&self, trace: &ForwardTrace, target: usize) -> Result<Backward, ModelError> {
        self.check_target(target)?;
        let (c, h, w) = self.input;
        let plane = h * w;
        let head = &self.fc.weight[target * self.fc.inputs..(target + 1) * self.fc.inputs];
        let grad_act2: Vec<f64> =
            (0..HIDDEN_CHANNELS * plane).map(|i| head[i / plane] / plane as f64).collect();
        let grad_pre2: Vec<f64> = grad_act2
            .iter()
            .zip(&trace.conv2_pre)
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect();
        let grad_act1 = self.conv2.backward_input(&grad_pre2, h, w);
        let grad_pre1: Vec<f64> = grad_act1
            .iter()
            .zip(&trace.conv1_pre)
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect();
        let grad_input = self.conv1.backward_input(&grad_pre1, h, w);
        Ok(Backward {
            logits: trace.logits.clone(),
            input_gradient: ImageTensor::new(c, h, w, grad_input)?,
            feature_maps: Some(FeatureMaps {
                channels: HIDDEN_CHANNELS,
                height: h,
                width: w,
                activations: trace.conv2_act.clone(),
                gradients: grad_act2,
            }),
        })
    }

    pub fn topology(&self) -> Topology {
        let (c, h, w) = self.input;
        let layer = |name: &str, weight_shape: Vec<usize>, bias_shape: Vec<usize>| LayerSpec {
            name: name.to_string(),
            weight_shape,
            bias_shape,
            weight_file: format!("{name}.weight.npy"),
            bias_file: format!("{name}.bias.npy"),
        };
        Topology {
            architecture: "refnet".into(),
            input_shape: [c, h, w],
            hidden_channels: HIDDEN_CHANNELS,
            classes: self.classes,
            seed: self.seed,
            layers: vec![
                layer("conv1", vec![HIDDEN_CHANNELS, c, KERNEL, KERNEL], vec![HIDDEN_CHANNELS]),
                layer("conv2", vec![HIDDEN_CHANNELS, HIDDEN_CHANNELS, KERNEL, KERNEL], vec![HIDDEN_CHANNELS]),
                layer("fc", vec![self.classes, HIDDEN_CHANNELS], vec![self.classes]),
            ],
        }
    }

    fn params(&self, layer: usize) -> (&[f64], &[f64]) {
        match layer {
            0 => (&self.conv1.weight, &self.conv1.bias),
            1 => (&self.conv2.weight, &self.conv2.bias),
            _ => (&self.fc.weight, &self.fc.bias),
        }
    }

    fn params_mut(&mut self, layer: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
        match layer {
            0 => (&mut self.conv1.weight, &mut self.conv1.bias),
            1 => (&mut self.conv2.weight, &mut self.conv2.bias),
            _ => (&mut self.fc.weight, &mut self.fc.bias),
        }
    }

    /// Writes `topology.json` plus one npy file per weight and bias tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let topo = self.topology();
        for (i, spec) in topo.layers.iter().enumerate() {
            let (weight, bias) = self.params(i);
            fs::write(dir.join(&spec.weight_file), npy::encode(&spec.weight_shape, weight, Dtype::F8))?;
            fs::write(dir.join(&spec.bias_file), npy::encode(&spec.bias_shape, bias, Dtype::F8))?;
        }
        let json = serde_json::to_string_pretty(&topo).expect("topology serializes");
        fs::write(dir.join("topology.json"), json + "\n")
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, LoadError> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(|source| LoadError::Io { path, source })
        };
        let topo = Topology::from_json(&String::from_utf8_lossy(&read("topology.json")?))?;
        let [c, h, w] = topo.input_shape;
        let mut net = RefNet::init(topo.seed, (c, h, w), topo.classes)
            .map_err(|e| LoadError::Manifest(e.to_string()))?;
        let expected = net.topology();
        if topo != expected {
            return Err(LoadError::Manifest("topology does not describe a refnet".into()));
        }
        for (i, spec) in expected.layers.iter().enumerate() {
            for (file, shape, is_weight) in
                [(&spec.weight_file, &spec.weight_shape, true), (&spec.bias_file, &spec.bias_shape, false)]
            {
                let arr = npy::parse(&read(file)?)?;
                if &arr.shape != shape {
                    return Err(LoadError::RankMismatch {
                        expected: "shape declared in topology",
                        found: arr.rank(),
                        shape: arr.shape,
                    });
                }
                if let Some(pos) = arr.data.iter().position(|v| !v.is_finite()) {
                    return Err(crate::tensor::TensorError::NonFinite(pos).into());
                }
                let (weight, bias) = net.params_mut(i);
                *(if is_weight { weight } else { bias }) = arr.data;
            }
        }
        Ok(net)
    }
}

impl DifferentiableModel for RefNet {
    fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn forward(&self, image: &ImageTensor) -> Result<Vec<f64>, ModelError> {
        Ok(self.trace(image)?.logits)
    }

    fn backward(&self, image: &ImageTensor, target: usize) -> Result<Backward, ModelError> {
        self.check_target(target)?;
        let trace = self.trace(image)?;
        self.backward_from(&trace, target)
    }

    fn layer_names(&self) -> Vec<String> {
        LAYER_NAMES.iter().map(|s| s.to_string()).collect()
    }

    /// Layer `i` is redrawn from `derive_seed(seed, i)`, the same stream
    /// [`RefNet::init`] uses, so randomizing every layer with seed `s`
    /// reproduces `init(s, ..)`.
    fn randomize_layers(&self, layers: &[usize], seed: u64) -> Result<Self, ModelError> {
        let mut out = self.clone();
        for &layer in layers {
            if layer >= LAYER_NAMES.len() {
                return Err(ModelError::UnknownLayer { index: layer, layers: LAYER_NAMES.len() });
            }
            out.reinit_layer(layer, derive_seed(seed, layer as u64));
        }
        Ok(out)
    }
}

/// JSON sidecar describing a saved [`RefNet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub architecture: String,
    pub input_shape: [usize; 3],
    pub hidden_channels: usize,
    pub classes: usize,
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub weight_shape: Vec<usize>,
    pub bias_shape: Vec<usize>,
    pub weight_file: String,
    pub bias_file: String,
}

impl Topology {
    pub fn from_json(text: &str) -> Result<Self, LoadError> {
        let topo: Topology = serde_json::from_str(text).map_err(|e| LoadError::Manifest(e.to_string()))?;
        if topo.architecture != "refnet" {
            return Err(LoadError::Manifest(format!("unsupported architecture {:?}", topo.architecture)));
        }
        let [c, h, w] = topo.input_shape;
        if c == 0 || h == 0 || w == 0 || c.saturating_mul(h).saturating_mul(w) > 1 << 24 {
            return Err(LoadError::Manifest(format!("invalid input shape {:?}", topo.input_shape)));
        }
        if topo.classes < 2 || topo.classes > 1 << 16 || topo.hidden_channels != HIDDEN_CHANNELS {
            return Err(LoadError::Manifest("invalid class or channel count".into()));
        }
        for spec in &topo.layers {
            for file in [&spec.weight_file, &spec.bias_file] {
                let p = Path::new(file);
                if p.is_absolute() || p.components().count() != 1 {
                    return Err(LoadError::Manifest(format!("layer file {file:?} must be a bare file name")));
                }
            }
        }
        Ok(topo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, shape: (usize, usize, usize)) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2;
        ImageTensor::new(shape.0, shape.1, shape.2, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = RefNet::init(7, (1, 8, 8), 2).unwrap();
        let b = RefNet::init(7, (1, 8, 8), 2).unwrap();
        let c = RefNet::init(8, (1, 8, 8), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.conv1.weight, c.conv1.weight);
        let logits = a.forward(&ImageTensor::filled(1, 8, 8, 0.0).unwrap()).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
        assert!(RefNet::init(1, (1, 8, 8), 1).is_err());
        assert!(RefNet::init(1, (0, 8, 8), 2).is_err());
    }

    #[test]
    fn head_is_linear_in_fc() {
        let x = image(3, (1, 6, 6));
        let mut net = RefNet::init(1, (1, 6, 6), 3).unwrap();
        net.fc.bias.fill(0.0);
        let base = net.forward(&x).unwrap();
        net.fc.weight.iter_mut().for_each(|w| *w *= 2.0);
        let doubled = net.forward(&x).unwrap();
        for (a, b) in base.iter().zip(&doubled) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
        net.fc.weight.fill(0.0);
        assert!(net.forward(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_activations_are_nonnegative() {
        let net = RefNet::init(4, (1, 7, 5), 2).unwrap();
        let t = net.trace(&image(9, (1, 7, 5))).unwrap();
        assert!(t.conv1_act.iter().chain(&t.conv2_act).all(|&v| v >= 0.0));
    }

    #[test]
    fn single_pixel_gradient_is_chain_of_weights() {
        // 1x1 input: only the centre tap of each kernel touches data.
        let mut net = RefNet::init(5, (1, 1, 1), 2).unwrap();
        net.conv1.bias.fill(1.0);
        net.conv2.bias.fill(1.0);
        net.conv1.weight.iter_mut().for_each(|w| *w = w.abs());
        net.conv2.weight.iter_mut().for_each(|w| *w = w.abs());
        let x = ImageTensor::new(1, 1, 1, vec![0.5]).unwrap();
        let g = net.backward(&x, 1).unwrap().input_gradient.values()[0];
        let mut expected = 0.0;
        for k in 0..HIDDEN_CHANNELS {
            for c in 0..HIDDEN_CHANNELS {
                expected += net.fc.weight[HIDDEN_CHANNELS + k] * net.conv2.w(k, c, 1, 1) * net.conv1.w(c, 0, 1, 1);
            }
        }
        assert!((g - expected).abs() < 1e-14);
    }

    #[test]
    fn randomize_layers_contract() {
        let net = RefNet::init(11, (1, 5, 5), 2).unwrap();
        assert_eq!(net.randomize_layers(&[], 3).unwrap(), net);
        let all = net.randomize_layers(&[0, 1, 2], 99).unwrap();
        let fresh = RefNet::init(99, (1, 5, 5), 2).unwrap();
        assert_eq!(all.conv1, fresh.conv1);
        assert_eq!(all.conv2, fresh.conv2);
        assert_eq!(all.fc, fresh.fc);
        let head = net.randomize_layers(&[2], 99).unwrap();
        assert_eq!(head.conv1, net.conv1);
        assert_eq!(head.conv2, net.conv2);
        let x = image(1, (1, 5, 5));
        assert_ne!(head.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert!(matches!(net.randomize_layers(&[3], 0), Err(ModelError::UnknownLayer { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = RefNet::init(21, (1, 6, 4), 3).unwrap();
        net.save(dir.path()).unwrap();
        assert_eq!(RefNet::load(dir.path()).unwrap(), net);
        let text = fs::read_to_string(dir.path().join("topology.json")).unwrap();
        let bad = text.replace("\"conv1.weight.npy\"", "\"../escape.npy\"");
        assert!(Topology::from_json(&bad).is_err());
    }

    #[test]
    fn gradient_is_local_to_receptive_field() {
        let net = RefNet::init(2, (1, 9, 9), 2).unwrap();
        let plane = 81;
        let mut g = vec![0.0; HIDDEN_CHANNELS * plane];
        for k in 0..HIDDEN_CHANNELS {
            g[k * plane + 4 * 9 + 4] = 1.0;
        }
        let through_conv2 = net.conv2.backward_input(&g, 9, 9);
        let through_conv1 = net.conv1.backward_input(&through_conv2, 9, 9);
        for y in 0..9usize {
            for x in 0..9usize {
                let outside = y.abs_diff(4) > 2 || x.abs_diff(4) > 2;
                if outside {
                    assert_eq!(through_conv1[y * 9 + x], 0.0, "({y},{x})");
                }
            }
        }
        assert!(through_conv1[4 * 9 + 4] != 0.0);
    }

    #[test]
    fn invalid_target_rejected() {
        let net = RefNet::init(1, (1, 3, 3), 2).unwrap();
        let x = image(0, (1, 3, 3));
        assert!(matches!(net.backward(&x, 2), Err(ModelError::InvalidTarget { .. })));
    }
}
