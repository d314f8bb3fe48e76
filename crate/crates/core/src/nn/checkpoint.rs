use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network};
use crate::error::{Error, Result};
use crate::losses::OeccConfig;
use crate::tensor::Tensor;

/// A network on disk: `manifest.json` plus one `OODT` file per parameter
/// tensor, named `layer<i>_weight.oodt` / `layer<i>_bias.oodt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    /// Training accuracy measured after cross-entropy training.
    pub train_accuracy: Option<f64>,
    /// Set when the network was fine-tuned with the OECC objective.
    pub oecc: Option<OeccConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    layer: usize,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    num_classes: usize,
    seed: u64,
    capture_points: Vec<usize>,
    params: Vec<ParamEntry>,
    train_accuracy: Option<f64>,
    oecc: Option<OeccConfig>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Self {
            network,
            train_accuracy: None,
            oecc: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let net = &self.network;
        let mut params = Vec::new();
        for p in net.params() {
            let file = format!("{}.oodt", p.name);
            p.value.save(&dir.join(&file))?;
            params.push(ParamEntry {
                name: p.name.clone(),
                layer: p.layer,
                file,
                shape: p.value.shape().to_vec(),
            });
        }
        let manifest = Manifest {
            input_shape: net.input_shape().to_vec(),
            layers: net.layers().to_vec(),
            num_classes: net.num_classes(),
            seed: net.seed(),
            capture_points: net.capture_points().to_vec(),
            params,
            train_accuracy: self.train_accuracy,
            oecc: self.oecc,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let format = |reason: String| Error::Format {
            path: path.clone(),
            reason,
        };
        let mut net = Network::zeros(m.input_shape, m.layers, m.num_classes, m.seed)?;
        if net.capture_points() != m.capture_points.as_slice() {
            return Err(format("capture points do not match the layer list".into()));
        }
        if net.params().len() != m.params.len() {
            return Err(format(format!(
                "manifest lists {} parameter tensors, layers need {}",
                m.params.len(),
                net.params().len()
            )));
        }
        for (slot, entry) in net.params_mut().iter_mut().zip(&m.params) {
            if slot.name != entry.name {
                return Err(format(format!(
                    "expected parameter {}, found {}",
                    slot.name, entry.name
                )));
            }
            let value = Tensor::load(&dir.join(&entry.file))?;
            if value.shape() != slot.value.shape() {
                return Err(format(format!(
                    "{} has shape {:?}, expected {:?}",
                    entry.name,
                    value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = value;
        }
        Ok(Self {
            network: net,
            train_accuracy: m.train_accuracy,
            oecc: m.oecc,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let net = Network::new(
            vec![1, 4, 4],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { in_dim: 8, out_dim: 3 },
            ],
            3,
            4,
        )
        .unwrap();
        let mut ck = Checkpoint::new(net);
        ck.train_accuracy = Some(0.75);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        assert!(dir.path().join("layer0_weight.oodt").exists());
        assert!(dir.path().join("layer3_bias.oodt").exists());
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ck);
    }
}
