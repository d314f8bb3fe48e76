use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Role};
use crate::error::{Error, Result};
use crate::fcgm::DEFAULT_ORDERS;
use crate::nn::{LayerSpec, TrainConfig};
use crate::synthgen::GenSpec;

pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.0, 0.01, 0.03, 0.05, 0.07, 0.1];
pub const DEFAULT_EPS_GRID: [f64; 4] = [0.0, 0.001, 0.005, 0.01];

/// Where validation outliers come from when tuning λ and the detectors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningProtocol {
    /// Held-out splits of each test outlier set.
    Oracle,
    /// Synthetic validation outliers only.
    #[default]
    ZeroShot,
}

impl TuningProtocol {
    pub fn as_str(self) -> &'static str {
        match self {
            TuningProtocol::Oracle => "oracle",
            TuningProtocol::ZeroShot => "zero_shot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Msp,
    Md,
    Fcgm,
}

impl Detector {
    pub fn label(self) -> &'static str {
        match self {
            Detector::Msp => "MSP",
            Detector::Md => "MD",
            Detector::Fcgm => "FCGM",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Detector::Msp => "msp",
            Detector::Md => "md",
            Detector::Fcgm => "fcgm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Tnr95,
    Auroc,
    Dacc,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Tnr95, Metric::Auroc, Metric::Dacc];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Tnr95 => "TNR95",
            Metric::Auroc => "AUROC",
            Metric::Dacc => "DAcc",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    #[serde(default)]
    pub d_in_train: Option<PathBuf>,
    #[serde(default)]
    pub d_in_test: Option<PathBuf>,
    #[serde(default)]
    pub d_out_oe: Option<PathBuf>,
    #[serde(default)]
    pub d_out_val: Vec<PathBuf>,
    #[serde(default)]
    pub d_out_test: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

fn default_eps_grid() -> Vec<f64> {
    DEFAULT_EPS_GRID.to_vec()
}

fn default_oracle_fraction() -> f64 {
    0.1
}

fn default_orders() -> Vec<u32> {
    DEFAULT_ORDERS.to_vec()
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_methods() -> Vec<Detector> {
    vec![Detector::Msp, Detector::Md, Detector::Fcgm]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<Detector>,
    /// Input perturbation magnitudes tried for the Mahalanobis detector.
    #[serde(default = "default_eps_grid")]
    pub md_eps_grid: Vec<f64>,
    /// Orders `p` of the Gram matrices.
    #[serde(default = "default_orders")]
    pub fcgm_orders: Vec<u32>,
    /// Fraction of the in-distribution test set held out for validation
    /// (λ selection, combiner fitting, Gram normalizers).
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Fraction of each test outlier set held out under the oracle protocol.
    #[serde(default = "default_oracle_fraction")]
    pub oracle_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            methods: default_methods(),
            md_eps_grid: default_eps_grid(),
            fcgm_orders: default_orders(),
            val_fraction: default_val_fraction(),
            oracle_fraction: default_oracle_fraction(),
        }
    }
}

fn default_lambda_grid() -> Vec<f64> {
    DEFAULT_LAMBDA_GRID.to_vec()
}

fn default_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

/// A full experiment. Relative dataset paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub datasets: DatasetPaths,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    #[serde(default = "default_lambda_grid")]
    pub lambda1: Vec<f64>,
    #[serde(default = "default_lambda_grid")]
    pub lambda2: Vec<f64>,
    #[serde(default)]
    pub tuning_protocol: TuningProtocol,
    #[serde(default)]
    pub detectors: DetectorConfig,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    /// Generators run by `gen-synthetic`, sourced from the training set.
    #[serde(default)]
    pub synthetic: Vec<GenSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.datasets;
        d.d_in_train
            .iter_mut()
            .chain(&mut d.d_in_test)
            .chain(&mut d.d_out_oe)
            .for_each(fix);
        d.d_out_val.iter_mut().chain(&mut d.d_out_test).for_each(fix);
        if let Some(out) = &mut self.output_dir {
            fix(out);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1.is_empty() || self.lambda2.is_empty() {
            return Err(Error::Config("λ grids must be non-empty".into()));
        }
        if self
            .lambda1
            .iter()
            .chain(&self.lambda2)
            .any(|&l| !(l >= 0.0 && l.is_finite()))
        {
            return Err(Error::Config("λ values must be finite and >= 0".into()));
        }
        let d = &self.detectors;
        if d.methods.is_empty() {
            return Err(Error::Config("no detectors selected".into()));
        }
        if d.md_eps_grid.is_empty() || d.md_eps_grid.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
            return Err(Error::Config(
                "md_eps_grid must be non-empty with finite values >= 0".into(),
            ));
        }
        if d.fcgm_orders.is_empty() || d.fcgm_orders.contains(&0) {
            return Err(Error::Config("fcgm_orders must be non-empty and positive".into()));
        }
        for (name, f) in [("val_fraction", d.val_fraction), ("oracle_fraction", d.oracle_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        if self.metrics.is_empty() {
            return Err(Error::Config("no metrics selected".into()));
        }
        Ok(())
    }

    /// `(λ1, λ2)` grid points in λ1-major order.
    pub fn lambda_grid(&self) -> Vec<(f64, f64)> {
        self.lambda1
            .iter()
            .flat_map(|&a| self.lambda2.iter().map(move |&b| (a, b)))
            .collect()
    }
}

/// Loads the dataset configured for `role`, re-tagging it with that role.
pub fn load_role(path: Option<&Path>, role: Role) -> Result<Dataset> {
    let path = path.ok_or_else(|| Error::Config(format!("{}: no dataset path configured", role.as_str())))?;
    if !path.exists() {
        return Err(Error::Config(format!(
            "{}: dataset path {} does not exist",
            role.as_str(),
            path.display()
        )));
    }
    let ds = Dataset::load(path)?;
    if ds.role == role {
        Ok(ds)
    } else {
        ds.with_role(role)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "datasets": { "d_in_train": "data/train" },
            "network": { "input_shape": [1, 4, 4], "layers": [{ "kind": "flatten" }, { "kind": "dense", "in_dim": 16, "out_dim": 2 }] },
            "train": { "epochs": 1, "batch_in": 8, "batch_oe": 8, "momentum": 0.9, "lr_schedule": { "kind": "cosine", "initial": 0.1 } },
            "finetune": { "epochs": 1, "batch_in": 8, "batch_oe": 8, "momentum": 0.9, "lr_schedule": { "kind": "cosine", "initial": 0.01 } }
        })
    }

    #[test]
    fn defaults_and_path_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.json");
        fs::write(&path, minimal_json().to_string()).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.lambda_grid().len(), 36);
        assert_eq!(cfg.tuning_protocol, TuningProtocol::ZeroShot);
        assert_eq!(cfg.detectors.fcgm_orders, vec![1, 2, 4, 8]);
        assert_eq!(cfg.datasets.d_in_train, Some(dir.path().join("data/train")));
    }

    #[test]
    fn rejects_empty_grid_and_unknown_fields() {
        let mut v = minimal_json();
        v["lambda1"] = serde_json::json!([]);
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut v = minimal_json();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn missing_role_names_the_role() {
        let err = load_role(None, Role::DOutOe).unwrap_err();
        assert!(err.to_string().contains("d_out_oe"));
        let err = load_role(Some(Path::new("/nonexistent/x")), Role::DInTrain).unwrap_err();
        assert!(err.to_string().contains("d_in_train"));
    }
}
