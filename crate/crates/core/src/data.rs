//! Dataset container, seeded splitting and batching, and the exact-match
//! disjointness check between dataset roles.
//!
//! A container is a directory holding `manifest.json`, `images.oodt`
//! (`N × C × H × W`) and, for labelled roles, `labels.oodt` (rank 1, class
//! indices stored as `f64`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::GenSpec;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.oodt";
pub const LABELS_FILE: &str = "labels.oodt";

/// `N × C × H × W` images with every value in `[0, 1]` and `C ∈ {1, 3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::Shape(format!(
                "images must be N x C x H x W, got {:?}",
                t.shape()
            )));
        }
        let c = t.shape()[1];
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("images need 1 or 3 channels, got {c}")));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.0.item_slice(i)
    }

    pub fn select(&self, indices: &[usize]) -> Result<ImageBatch> {
        Ok(Self(self.0.select(indices)?))
    }
}

/// Where a dataset sits in the experimental protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    DInTrain,
    DInTest,
    DOutOe,
    DOutVal,
    DOutTest,
}

impl Role {
    pub fn is_labelled(self) -> bool {
        matches!(self, Role::DInTrain | Role::DInTest)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::DInTrain => "d_in_train",
            Role::DInTest => "d_in_test",
            Role::DOutOe => "d_out_oe",
            Role::DOutVal => "d_out_val",
            Role::DOutTest => "d_out_test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub role: Role,
    pub images: ImageBatch,
    pub labels: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
    pub provenance: Option<GenSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    name: String,
    role: Role,
    shape: Vec<usize>,
    num_examples: usize,
    num_classes: Option<usize>,
    has_labels: bool,
    #[serde(default)]
    provenance: Option<GenSpec>,
}

impl Dataset {
    /// Validates the label contract: labels exist iff the role is
    /// in-distribution, and every label is below `num_classes`.
    pub fn new(
        name: impl Into<String>,
        role: Role,
        images: ImageBatch,
        labels: Option<Vec<usize>>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            role,
            images,
            labels,
            num_classes,
            provenance: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// An unlabelled dataset.
    pub fn unlabelled(name: impl Into<String>, role: Role, images: ImageBatch) -> Result<Self> {
        Self::new(name, role, images, None, None)
    }

    pub fn with_provenance(mut self, spec: GenSpec) -> Self {
        self.provenance = Some(spec);
        self
    }

    fn validate(&self) -> Result<()> {
        match (&self.labels, self.role.is_labelled()) {
            (Some(labels), true) => {
                let k = self
                    .num_classes
                    .ok_or_else(|| Error::Data(format!("{}: labelled dataset without num_classes", self.name)))?;
                if labels.len() != self.images.len() {
                    return Err(Error::Data(format!(
                        "{}: {} labels for {} images",
                        self.name,
                        labels.len(),
                        self.images.len()
                    )));
                }
                if let Some(&label) = labels.iter().find(|&&y| y >= k) {
                    return Err(Error::Label { label, num_classes: k });
                }
                Ok(())
            }
            (None, false) => Ok(()),
            (Some(_), false) => Err(Error::Data(format!(
                "{}: role {} must not carry labels",
                self.name,
                self.role.as_str()
            ))),
            (None, true) => Err(Error::Data(format!(
                "{}: role {} requires labels",
                self.name,
                self.role.as_str()
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Labels; fails for unlabelled roles.
    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data(format!("{} has no labels", self.name)))
    }

    /// Sub-dataset of the given examples, in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        Ok(Dataset {
            name: name.into(),
            role: self.role,
            images: self.images.select(indices)?,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        })
    }

    pub fn with_role(mut self, role: Role) -> Result<Dataset> {
        self.role = role;
        if !role.is_labelled() {
            self.labels = None;
            self.num_classes = None;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            name: self.name.clone(),
            role: self.role,
            shape: self.images.tensor().shape().to_vec(),
            num_examples: self.len(),
            num_classes: self.num_classes,
            has_labels: self.labels.is_some(),
            provenance: self.provenance.clone(),
        };
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        self.images.tensor().save(&dir.join(IMAGES_FILE))?;
        let labels_path = dir.join(LABELS_FILE);
        match &self.labels {
            Some(labels) => {
                Tensor::vector(labels.iter().map(|&y| y as f64).collect()).save(&labels_path)?;
            }
            None if labels_path.exists() => {
                fs::remove_file(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
            }
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let format = |reason: String| Error::Format {
            path: path.clone(),
            reason,
        };

        let images_path = dir.join(IMAGES_FILE);
        let images = Tensor::load(&images_path)?;
        if images.shape() != manifest.shape.as_slice() {
            return Err(format(format!(
                "manifest shape {:?} but images are {:?}",
                manifest.shape,
                images.shape()
            )));
        }
        if images.shape()[0] != manifest.num_examples {
            return Err(format(format!(
                "manifest lists {} examples, images hold {}",
                manifest.num_examples,
                images.shape()[0]
            )));
        }
        let images = ImageBatch::new(images)?;

        let labels = if manifest.has_labels {
            let labels_path = dir.join(LABELS_FILE);
            let raw = Tensor::load(&labels_path)?;
            if raw.rank() != 1 || raw.len() != manifest.num_examples {
                return Err(format(format!(
                    "manifest lists {} examples, labels file holds {:?}",
                    manifest.num_examples,
                    raw.shape()
                )));
            }
            let labels = raw
                .data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                        Ok(v as usize)
                    } else {
                        Err(format(format!("label value {v} is not a class index")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Some(labels)
        } else {
            None
        };

        let ds = Dataset {
            name: manifest.name,
            role: manifest.role,
            images,
            labels,
            num_classes: manifest.num_classes,
            provenance: manifest.provenance,
        };
        ds.validate().map_err(|e| format(e.to_string()))?;
        Ok(ds)
    }
}

/// Seeded partition of a dataset into consecutive slices of a permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub fractions: Vec<f64>,
}

impl SplitPlan {
    pub fn new(seed: u64, fractions: Vec<f64>) -> Result<Self> {
        if fractions.is_empty() || fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return Err(Error::Split(format!("invalid fractions {fractions:?}")));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Split(format!("fractions sum to {total}, not 1")));
        }
        Ok(Self { seed, fractions })
    }

    /// Index sets of each split.
    pub fn partition(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        let plan = Self::new(self.seed, self.fractions.clone())?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
        let mut parts = Vec::with_capacity(plan.fractions.len());
        let mut cum = 0.0;
        let mut start = 0;
        for (i, f) in plan.fractions.iter().enumerate() {
            cum += f;
            let end = if i + 1 == plan.fractions.len() {
                n
            } else {
                ((cum * n as f64).round() as usize).min(n)
            };
            if end <= start {
                return Err(Error::Split(format!(
                    "fraction {f} of {n} examples yields an empty split"
                )));
            }
            parts.push(order[start..end].to_vec());
            start = end;
        }
        Ok(parts)
    }
}

/// Splits into disjoint datasets named `<name>.split<i>`.
pub fn split(dataset: &Dataset, plan: &SplitPlan) -> Result<Vec<Dataset>> {
    plan.partition(dataset.len())?
        .iter()
        .enumerate()
        .map(|(i, idx)| dataset.subset(idx, format!("{}.split{i}", dataset.name)))
        .collect()
}

/// Per-epoch shuffled index batches; the final batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One mini-batch drawn from a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
}

/// Deterministic batch sequence for `(seed, epoch)`.
pub fn batches<'a>(dataset: &'a Dataset, batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = Batch> + 'a {
    batch_indices(dataset.len(), batch_size, seed, epoch)
        .into_iter()
        .map(move |indices| Batch {
            images: dataset.images.tensor().select(&indices).expect("indices in range"),
            labels: dataset.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            indices,
        })
}

/// Outcome of [`check_disjoint`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Disjointness {
    pub disjoint: bool,
    /// `(index in a, index in b)` of the collision with the lowest `b` index.
    pub first_collision: Option<(usize, usize)>,
}

fn image_key(pixels: &[f64]) -> Vec<u64> {
    pixels.iter().map(|v| v.to_bits()).collect()
}

/// Exact (bitwise) image equality check between two datasets.
pub fn check_disjoint(a: &Dataset, b: &Dataset) -> Result<Disjointness> {
    if a.images.image_shape() != b.images.image_shape() {
        return Err(Error::Shape(format!(
            "cannot compare {:?} images with {:?}",
            a.images.image_shape(),
            b.images.image_shape()
        )));
    }
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::with_capacity(a.len());
    for i in 0..a.len() {
        seen.entry(image_key(a.images.image(i))).or_insert(i);
    }
    let first_collision = (0..b.len()).find_map(|j| seen.get(&image_key(b.images.image(j))).map(|&i| (i, j)));
    Ok(Disjointness {
        disjoint: first_collision.is_none(),
        first_collision,
    })
}

/// [`check_disjoint`] as a hard requirement.
pub fn require_disjoint(a: &Dataset, b: &Dataset) -> Result<()> {
    match check_disjoint(a, b)?.first_collision {
        None => Ok(()),
        Some((index_a, index_b)) => Err(Error::NotDisjoint {
            a: a.name.clone(),
            b: b.name.clone(),
            index_a,
            index_b,
        }),
    }
}
