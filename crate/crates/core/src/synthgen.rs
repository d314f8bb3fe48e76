//! Synthetic validation outliers, each a deterministic function of
//! `(source images, seed)`.
//!
//! Output image `i` draws from its own ChaCha stream `i` under the spec's
//! seed, so generation parallelizes without changing results. Source images
//! are picked uniformly with replacement.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SPECKLE_SIGMA: f64 = 0.4;

/// Side length of the jigsaw grid, in patches.
pub const JIGSAW_GRID: usize = 4;
const PATCHES: usize = JIGSAW_GRID * JIGSAW_GRID;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenKind {
    UniformNoise,
    ArithmeticMean,
    GeometricMean,
    Jigsaw,
    Speckle,
    Inverted,
    RgbGhosted,
}

impl GenKind {
    pub const ALL: [GenKind; 7] = [
        GenKind::UniformNoise,
        GenKind::ArithmeticMean,
        GenKind::GeometricMean,
        GenKind::Jigsaw,
        GenKind::Speckle,
        GenKind::Inverted,
        GenKind::RgbGhosted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GenKind::UniformNoise => "uniform_noise",
            GenKind::ArithmeticMean => "arithmetic_mean",
            GenKind::GeometricMean => "geometric_mean",
            GenKind::Jigsaw => "jigsaw",
            GenKind::Speckle => "speckle",
            GenKind::Inverted => "inverted",
            GenKind::RgbGhosted => "rgb_ghosted",
        }
    }

    pub fn needs_source(self) -> bool {
        self != GenKind::UniformNoise
    }
}

fn default_sigma() -> f64 {
    DEFAULT_SPECKLE_SIGMA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub kind: GenKind,
    pub seed: u64,
    pub count: usize,
    /// Name of the dataset the images were derived from.
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default = "default_sigma")]
    pub speckle_sigma: f64,
}

impl GenSpec {
    pub fn new(kind: GenKind, seed: u64, count: usize) -> Self {
        Self {
            kind,
            seed,
            count,
            source: None,
            speckle_sigma: DEFAULT_SPECKLE_SIGMA,
        }
    }

    pub fn with_source(mut self, name: impl Into<String>) -> Self {
        self.source = Some(name.into());
        self
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config(format!("{}: count must be positive", self.kind.as_str())));
        }
        if !(self.speckle_sigma >= 0.0 && self.speckle_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "speckle sigma {} must be finite and >= 0",
                self.speckle_sigma
            )));
        }
        Ok(())
    }
}

fn image_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn assemble(count: usize, shape: [usize; 3], make: impl Fn(usize) -> Vec<f64> + Sync) -> Result<ImageBatch> {
    let pixels: Vec<Vec<f64>> = (0..count).into_par_iter().map(&make).collect();
    let [c, h, w] = shape;
    ImageBatch::new(Tensor::new(vec![count, c, h, w], pixels.concat())?)
}

fn require_source(source: &ImageBatch, min: usize) -> Result<()> {
    if source.len() < min {
        return Err(Error::Data(format!(
            "generator needs at least {min} source images, got {}",
            source.len()
        )));
    }
    Ok(())
}

/// Dispatches on `spec.kind`. `shape` (`[C, H, W]`) is only read for
/// uniform noise; every other kind takes its shape from `source`.
pub fn generate(spec: &GenSpec, source: Option<&ImageBatch>, shape: [usize; 3]) -> Result<ImageBatch> {
    let src =
        || source.ok_or_else(|| Error::Data(format!("generator {} requires a source dataset", spec.kind.as_str())));
    match spec.kind {
        GenKind::UniformNoise => gen_uniform_noise(spec, shape),
        GenKind::ArithmeticMean => gen_arithmetic_mean(spec, src()?),
        GenKind::GeometricMean => gen_geometric_mean(spec, src()?),
        GenKind::Jigsaw => gen_jigsaw(spec, src()?),
        GenKind::Speckle => gen_speckle(spec, src()?),
        GenKind::Inverted => gen_inverted(spec, src()?),
        GenKind::RgbGhosted => gen_rgb_ghosted(spec, src()?),
    }
}

/// I.i.d. `U[0, 1)` pixels.
pub fn gen_uniform_noise(spec: &GenSpec, shape: [usize; 3]) -> Result<ImageBatch> {
    spec.validate()?;
    let pixels = shape.iter().product::<usize>();
    assemble(spec.count, shape, |i| {
        let mut rng = image_rng(spec.seed, i);
        (0..pixels).map(|_| rng.random::<f64>()).collect()
    })
}

/// Source index pairs `(a, b)` with `a != b` used by the mean generators.
pub fn pair_indices(spec: &GenSpec, n_source: usize) -> Result<Vec<(usize, usize)>> {
    if n_source < 2 {
        return Err(Error::Data(format!(
            "mean generators need at least 2 source images, got {n_source}"
        )));
    }
    Ok((0..spec.count)
        .map(|i| {
            let mut rng = image_rng(spec.seed, i);
            let a = rng.random_range(0..n_source);
            // Uniform over the other n - 1 images.
            let b = (a + 1 + rng.random_range(0..n_source - 1)) % n_source;
            (a, b)
        })
        .collect())
}

fn gen_pairwise(spec: &GenSpec, source: &ImageBatch, f: fn(f64, f64) -> f64) -> Result<ImageBatch> {
    spec.validate()?;
    require_source(source, 2)?;
    let pairs = pair_indices(spec, source.len())?;
    assemble(spec.count, source.image_shape(), |i| {
        let (a, b) = pairs[i];
        source
            .image(a)
            .iter()
            .zip(source.image(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    })
}

/// `(a + b) / 2` of random distinct source pairs.
pub fn gen_arithmetic_mean(spec: &GenSpec, source: &ImageBatch) -> Result<ImageBatch> {
    gen_pairwise(spec, source, |a, b| (a + b) / 2.0)
}

/// `sqrt(a · b)` of random distinct source pairs.
pub fn gen_geometric_mean(spec: &GenSpec, source: &ImageBatch) -> Result<ImageBatch> {
    gen_pairwise(spec, source, |a, b| (a * b).sqrt())
}

/// Source index of each output image for the single-image generators.
pub fn source_indices(spec: &GenSpec, n_source: usize) -> Vec<usize> {
    (0..spec.count)
        .map(|i| image_rng(spec.seed, i).random_range(0..n_source))
        .collect()
}

/// Source index and patch permutation of every jigsaw image.
/// `perm[dst] = src`: output patch `dst` is source patch `src`.
pub fn jigsaw_plan(spec: &GenSpec, n_source: usize) -> Vec<(usize, [usize; PATCHES])> {
    (0..spec.count)
        .map(|i| {
            let mut rng = image_rng(spec.seed, i);
            let idx = rng.random_range(0..n_source);
            let identity: [usize; PATCHES] = std::array::from_fn(|k| k);
            let mut perm = identity;
            while perm == identity {
                perm.shuffle(&mut rng);
            }
            (idx, perm)
        })
        .collect()
}

/// Rearranges the `4 × 4` patch grid of one `C × H × W` image.
pub fn permute_patches(image: &[f64], shape: [usize; 3], perm: &[usize; PATCHES]) -> Result<Vec<f64>> {
    let [c, h, w] = shape;
    if h % JIGSAW_GRID != 0 || w % JIGSAW_GRID != 0 {
        return Err(Error::Shape(format!(
            "jigsaw needs H and W divisible by {JIGSAW_GRID}, got {h}x{w}"
        )));
    }
    let (ph, pw) = (h / JIGSAW_GRID, w / JIGSAW_GRID);
    let mut out = vec![0.0; image.len()];
    for (dst, &src) in perm.iter().enumerate() {
        let (dr, dc) = (dst / JIGSAW_GRID * ph, dst % JIGSAW_GRID * pw);
        let (sr, sc) = (src / JIGSAW_GRID * ph, src % JIGSAW_GRID * pw);
        for ch in 0..c {
            for r in 0..ph {
                let d = ch * h * w + (dr + r) * w + dc;
                let s = ch * h * w + (sr + r) * w + sc;
                out[d..d + pw].copy_from_slice(&image[s..s + pw]);
            }
        }
    }
    Ok(out)
}

/// Source images with their `4 × 4` patch grid shuffled by a non-identity
/// permutation.
pub fn gen_jigsaw(spec: &GenSpec, source: &ImageBatch) -> Result<ImageBatch> {
    spec.validate()?;
    require_source(source, 1)?;
    let shape = source.image_shape();
    let [_, h, w] = shape;
    if h % JIGSAW_GRID != 0 || w % JIGSAW_GRID != 0 {
        return Err(Error::Shape(format!(
            "jigsaw needs H and W divisible by {JIGSAW_GRID}, got {h}x{w}"
        )));
    }
    let plan = jigsaw_plan(spec, source.len());
    assemble(spec.count, shape, |i| {
        let (idx, perm) = &plan[i];
        permute_patches(source.image(*idx), shape, perm).expect("shape checked")
    })
}

/// `clamp(x · (1 + n), 0, 1)` with `n ~ N(0, σ)` per pixel.
pub fn gen_speckle(spec: &GenSpec, source: &ImageBatch) -> Result<ImageBatch> {
    spec.validate()?;
    require_source(source, 1)?;
    let normal = Normal::new(0.0, spec.speckle_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let n = source.len();
    assemble(spec.count, source.image_shape(), |i| {
        let mut rng = image_rng(spec.seed, i);
        let idx = rng.random_range(0..n);
        source
            .image(idx)
            .iter()
            .map(|&x| (x * (1.0 + normal.sample(&mut rng))).clamp(0.0, 1.0))
            .collect()
    })
}

fn require_rgb(source: &ImageBatch) -> Result<()> {
    match source.channels() {
        3 => Ok(()),
        c => Err(Error::Channel(c)),
    }
}

/// `(R, G, B) → (R, B, G)`: a cyclic shift by one followed by swapping the
/// first two channels.
pub fn reorder_channels(image: &[f64]) -> Vec<f64> {
    let plane = image.len() / 3;
    let (r, rest) = image.split_at(plane);
    let (g, b) = rest.split_at(plane);
    [r, b, g].concat()
}

/// `1 − x` on every channel.
pub fn ghost(image: &[f64]) -> Vec<f64> {
    image.iter().map(|&x| 1.0 - x).collect()
}

/// Source images with reordered color channels.
pub fn gen_inverted(spec: &GenSpec, source: &ImageBatch) -> Result<ImageBatch> {
    spec.validate()?;
    require_rgb(source)?;
    require_source(source, 1)?;
    let idx = source_indices(spec, source.len());
    assemble(spec.count, source.image_shape(), |i| {
        reorder_channels(source.image(idx[i]))
    })
}

/// Source images with every color channel inverted.
pub fn gen_rgb_ghosted(spec: &GenSpec, source: &ImageBatch) -> Result<ImageBatch> {
    spec.validate()?;
    require_rgb(source)?;
    require_source(source, 1)?;
    let idx = source_indices(spec, source.len());
    assemble(spec.count, source.image_shape(), |i| ghost(source.image(idx[i])))
}
