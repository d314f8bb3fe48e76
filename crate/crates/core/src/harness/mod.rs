//! End-to-end experiment protocol: train → OECC fine-tune over a λ grid →
//! fit detectors → evaluate every `(D_in, D_out^test, method)` cell.
//!
//! Every command reads an [`ExperimentConfig`] and writes under one output
//! directory:
//!
//! ```text
//! <out>/ce/                         cross-entropy checkpoint
//! <out>/finetune/grid.json          every grid point and its validation AUROC
//! <out>/finetune/grid/point<i>/     fine-tuned checkpoints
//! <out>/finetune/selected/          the selected fine-tuned checkpoint
//! <out>/detectors/<base|oecc>/<md|fcgm>/
//! <out>/scores/<method>/<d_out>.json raw in/out scores per cell
//! <out>/results.json, results.txt   the result table
//! <out>/manifest.json               content hashes of inputs and artifacts
//! ```

mod config;
mod pipeline;
mod provenance;
mod table;

use std::path::{Path, PathBuf};

pub use config::{
    load_role, DatasetPaths, Detector, DetectorConfig, ExperimentConfig, Metric, NetworkConfig, TuningProtocol,
    DEFAULT_EPS_GRID, DEFAULT_LAMBDA_GRID,
};
pub use pipeline::{
    cmd_evaluate, cmd_finetune, cmd_fit_detector, cmd_gen_synthetic, cmd_train, methods, msp_scores, report, run_all,
    synthetic_specs, EpsTrial, Experiment, FinetuneReport, GridPoint, NamedAuroc, SyntheticReport, Variant,
    DEFAULT_SYNTHETIC_COUNT,
};
pub use provenance::{content_hash, CommandRecord, Entry, RunManifest};
pub use table::{metric_value, percent, Cell, ResultTable, Row};

use crate::error::{Error, Result};
use crate::nn::{LrSchedule, TrainConfig};
use crate::toy::{toy_layers, toy_suite, OodFamily, ToyConfig, INPUT_SHAPE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    }
}

fn ood_dir(ood: OodFamily) -> &'static str {
    match ood {
        OodFamily::Bars => "bars",
        OodFamily::Center => "center",
        OodFamily::Pairs => "pairs",
    }
}

/// Protocol settings for the synthetic toy task. Dataset paths point at
/// `data/<role>` next to the config file.
pub fn toy_experiment_config(num_classes: usize, ood: OodFamily) -> ExperimentConfig {
    ExperimentConfig {
        datasets: DatasetPaths {
            d_in_train: Some("data/train".into()),
            d_in_test: Some("data/test".into()),
            d_out_oe: Some("data/oe".into()),
            d_out_val: vec!["data/val".into()],
            d_out_test: vec![format!("data/{}", ood_dir(ood)).into()],
        },
        network: NetworkConfig {
            input_shape: INPUT_SHAPE.to_vec(),
            layers: toy_layers(num_classes),
        },
        train: TrainConfig {
            epochs: 15,
            batch_in: 32,
            batch_oe: 64,
            momentum: 0.9,
            lr_schedule: LrSchedule::StepDecay {
                initial: 0.05,
                drop_factor: 0.1,
                milestones: vec![0.5, 0.75],
            },
            seed: 0,
        },
        finetune: TrainConfig {
            epochs: 10,
            batch_in: 32,
            batch_oe: 64,
            momentum: 0.9,
            lr_schedule: LrSchedule::Cosine { initial: 0.05 },
            seed: 0,
        },
        // The toy task needs a stronger uniformity push than the default grid.
        lambda1: vec![0.0, 0.1],
        lambda2: vec![0.0, 0.1, 0.5],
        tuning_protocol: TuningProtocol::ZeroShot,
        detectors: DetectorConfig::default(),
        metrics: Metric::ALL.to_vec(),
        synthetic: Vec::new(),
        output_dir: Some("out".into()),
        seed: 0,
    }
}

/// Writes the toy datasets under `<dir>/data` and a matching config to
/// `<dir>/experiment.json`; returns the config path.
pub fn write_toy_experiment(dir: &Path, toy: &ToyConfig, seed: u64) -> Result<PathBuf> {
    let suite = toy_suite(toy, seed)?;
    let data = dir.join("data");
    suite.train.save(&data.join("train"))?;
    suite.test.save(&data.join("test"))?;
    suite.oe.save(&data.join("oe"))?;
    suite.val.save(&data.join("val"))?;
    suite.out_test.save(&data.join(ood_dir(toy.ood)))?;
    let mut cfg = toy_experiment_config(toy.classes, toy.ood);
    cfg.seed = seed;
    let path = dir.join("experiment.json");
    cfg.save(&path)?;
    Ok(path)
}
