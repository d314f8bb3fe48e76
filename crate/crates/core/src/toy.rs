//! Desk-scale synthetic task: up to four classes of single Gaussian blobs
//! on an `8 × 8` grayscale canvas, one per quadrant. Test outliers come from
//! a structurally different blob family (by default, pairs of blobs in two
//! quadrants at once).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageBatch, Role};
use crate::error::{Error, Result};
use crate::nn::LayerSpec;
use crate::synthgen::{gen_uniform_noise, GenKind, GenSpec};
use crate::tensor::Tensor;

pub const SIDE: usize = 8;
/// Default number of classes; at most four (one per quadrant).
pub const NUM_CLASSES: usize = 4;
pub const INPUT_SHAPE: [usize; 3] = [1, SIDE, SIDE];

/// Shape family of the test outliers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodFamily {
    /// Elongated bars through the middle of the canvas.
    Bars,
    /// Isotropic blobs centered between the class quadrants.
    Center,
    /// Two blobs in distinct quadrants.
    #[default]
    Pairs,
}

/// Dataset sizes and the background noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub ood: OodFamily,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_oe: usize,
    pub n_val: usize,
    pub n_out_test: usize,
    /// Amplitude of uniform background noise.
    pub noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            ood: OodFamily::default(),
            classes: NUM_CLASSES,
            n_train: 800,
            n_test: 400,
            n_oe: 800,
            n_val: 200,
            n_out_test: 400,
            noise: 0.4,
        }
    }
}

/// One dataset per role.
#[derive(Debug, Clone)]
pub struct ToySuite {
    pub train: Dataset,
    pub test: Dataset,
    pub oe: Dataset,
    pub val: Dataset,
    pub out_test: Dataset,
}

/// Conv → ReLU → pool → dense.
pub fn toy_layers(num_classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 8,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::AvgPool { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense {
            in_dim: 8 * 4 * 4,
            out_dim: num_classes,
        },
    ]
}

fn blob(rng: &mut ChaCha8Rng, noise: f64, cy: f64, cx: f64, sy: f64, sx: f64, amp: f64) -> Vec<f64> {
    (0..SIDE * SIDE)
        .map(|k| {
            let (y, x) = ((k / SIDE) as f64, (k % SIDE) as f64);
            let g = amp * (-0.5 * (((y - cy) / sy).powi(2) + ((x - cx) / sx).powi(2))).exp();
            (g + noise * rng.random::<f64>()).clamp(0.0, 1.0)
        })
        .collect()
}

/// Blob around the center of `quadrant` (row-major, 0..4).
fn class_image(rng: &mut ChaCha8Rng, quadrant: usize, noise: f64) -> Vec<f64> {
    let cy = if quadrant / 2 == 0 { 2.0 } else { 5.0 } + rng.random_range(-0.8..0.8);
    let cx = if quadrant.is_multiple_of(2) { 2.0 } else { 5.0 } + rng.random_range(-0.8..0.8);
    let s = rng.random_range(0.9..1.6);
    let amp = rng.random_range(0.6..1.0);
    blob(rng, noise, cy, cx, s, s, amp)
}

fn bar_image(rng: &mut ChaCha8Rng, noise: f64) -> Vec<f64> {
    let cy = 3.5 + rng.random_range(-1.0..1.0);
    let cx = 3.5 + rng.random_range(-1.0..1.0);
    let (long, short) = (rng.random_range(2.0..3.0), rng.random_range(0.6..1.0));
    let amp = rng.random_range(0.6..1.0);
    if rng.random::<bool>() {
        blob(rng, noise, cy, cx, short, long, amp)
    } else {
        blob(rng, noise, cy, cx, long, short, amp)
    }
}

fn center_image(rng: &mut ChaCha8Rng, noise: f64) -> Vec<f64> {
    let cy = 3.5 + rng.random_range(-0.8..0.8);
    let cx = 3.5 + rng.random_range(-0.8..0.8);
    let s = rng.random_range(0.9..1.6);
    let amp = rng.random_range(0.6..1.0);
    blob(rng, noise, cy, cx, s, s, amp)
}

fn pair_image(rng: &mut ChaCha8Rng, noise: f64) -> Vec<f64> {
    let a = rng.random_range(0..4);
    let b = (a + rng.random_range(1..4)) % 4;
    let first = class_image(rng, a, 0.0);
    let second = class_image(rng, b, 0.0);
    first
        .iter()
        .zip(&second)
        .map(|(x, y)| (0.6 * (x + y) + noise * rng.random::<f64>()).clamp(0.0, 1.0))
        .collect()
}

type ImageFn = fn(&mut ChaCha8Rng, f64) -> Vec<f64>;

fn images(n: usize, pixels: Vec<f64>) -> Result<ImageBatch> {
    ImageBatch::new(Tensor::new(vec![n, 1, SIDE, SIDE], pixels)?)
}

fn labelled(name: &str, role: Role, n: usize, k: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    for i in 0..n {
        let c = i % k;
        labels.push(c);
        // Two classes sit on opposite corners.
        let quadrant = if k == 2 { 3 * c } else { c };
        pixels.extend(class_image(rng, quadrant, noise));
    }
    Dataset::new(name, role, images(n, pixels)?, Some(labels), Some(k))
}

fn noise_set(name: &str, role: Role, n: usize, seed: u64) -> Result<Dataset> {
    let spec = GenSpec::new(GenKind::UniformNoise, seed, n);
    Ok(Dataset::unlabelled(name, role, gen_uniform_noise(&spec, INPUT_SHAPE)?)?.with_provenance(spec))
}

/// All five role datasets for one seed. Different roles draw from separate
/// streams, and the two noise sets use different seeds, so the roles are
/// disjoint with overwhelming probability (the harness checks anyway).
pub fn toy_suite(config: &ToyConfig, seed: u64) -> Result<ToySuite> {
    if !(2..=NUM_CLASSES).contains(&config.classes) {
        return Err(Error::Config(format!(
            "toy task supports 2 to 4 classes, got {}",
            config.classes
        )));
    }
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    let train = labelled(
        "toy_train",
        Role::DInTrain,
        config.n_train,
        config.classes,
        config.noise,
        &mut stream(1),
    )?;
    let test = labelled(
        "toy_test",
        Role::DInTest,
        config.n_test,
        config.classes,
        config.noise,
        &mut stream(2),
    )?;
    let mut rng = stream(3);
    let (name, make): (&str, ImageFn) = match config.ood {
        OodFamily::Bars => ("toy_bars", bar_image),
        OodFamily::Center => ("toy_center", center_image),
        OodFamily::Pairs => ("toy_pairs", pair_image),
    };
    let pixels: Vec<f64> = (0..config.n_out_test)
        .flat_map(|_| make(&mut rng, config.noise))
        .collect();
    let out_test = Dataset::unlabelled(name, Role::DOutTest, images(config.n_out_test, pixels)?)?;
    let noise_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let oe = noise_set("toy_oe_noise", Role::DOutOe, config.n_oe, noise_seed)?;
    let val = noise_set("toy_val_noise", Role::DOutVal, config.n_val, noise_seed.wrapping_add(1))?;
    Ok(ToySuite {
        train,
        test,
        oe,
        val,
        out_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::check_disjoint;
    use crate::nn::Network;

    #[test]
    fn suite_shapes_and_disjointness() {
        let cfg = ToyConfig {
            ood: OodFamily::Bars,
            classes: 4,
            n_train: 40,
            n_test: 20,
            n_oe: 30,
            n_val: 10,
            n_out_test: 20,
            noise: 0.1,
        };
        let s = toy_suite(&cfg, 1).unwrap();
        assert_eq!(s.train.len(), 40);
        assert_eq!(s.train.images.image_shape(), INPUT_SHAPE);
        assert!(check_disjoint(&s.oe, &s.out_test).unwrap().disjoint);
        assert!(check_disjoint(&s.val, &s.out_test).unwrap().disjoint);
        assert!(check_disjoint(&s.oe, &s.val).unwrap().disjoint);
        assert_eq!(toy_suite(&cfg, 1).unwrap().train, s.train);
    }

    #[test]
    fn layers_fit_input() {
        let net = Network::new(INPUT_SHAPE.to_vec(), toy_layers(NUM_CLASSES), NUM_CLASSES, 0).unwrap();
        assert_eq!(net.capture_points().len(), 2);
    }
}
