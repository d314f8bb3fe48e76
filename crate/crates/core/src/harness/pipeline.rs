use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{load_role, Detector, ExperimentConfig, TuningProtocol};
use super::provenance::{CommandRecord, Entry, RunManifest};
use super::table::{Cell, ResultTable, Row};
use crate::data::{check_disjoint, split, Dataset, Role, SplitPlan};
use crate::error::{Error, Result};
use crate::fcgm::{self, GramBounds};
use crate::losses::OeccConfig;
use crate::mahalanobis::{self, MahalanobisState};
use crate::metrics::{auroc, evaluate, msp_score, ScoreSample};
use crate::nn::{self, Checkpoint, Network};
use crate::synthgen::{generate, GenKind, GenSpec};
use crate::tensor::Tensor;

/// Images generated per kind when the config lists no synthetic specs.
pub const DEFAULT_SYNTHETIC_COUNT: usize = 500;

/// Which trained network a detector runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cross-entropy training only.
    Base,
    /// The selected OECC fine-tuned network.
    Oecc,
}

impl Variant {
    pub fn method_name(self, detector: Detector) -> String {
        match self {
            Variant::Base => detector.label().to_string(),
            Variant::Oecc => format!("OECC+{}", detector.label()),
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Oecc => "oecc",
        }
    }
}

/// A loaded config bound to an output directory and master seed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub seed: u64,
}

/// In-distribution test set split into a validation partition and the
/// evaluation positives.
struct InTest {
    name: String,
    val: Dataset,
    eval: Dataset,
}

/// One test outlier set; under the oracle protocol a slice is held out
/// for validation and excluded from evaluation.
struct OutTest {
    name: String,
    eval: Dataset,
    heldout: Option<Dataset>,
}

impl Experiment {
    /// `out` and `seed` override the config's values when given.
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        config.validate()?;
        let out = out
            .or_else(|| config.output_dir.clone())
            .ok_or_else(|| Error::Config("no output directory given (--out or output_dir)".into()))?;
        let seed = seed.unwrap_or(config.seed);
        Ok(Self { config, out, seed })
    }

    pub fn ce_dir(&self) -> PathBuf {
        self.out.join("ce")
    }

    pub fn finetune_dir(&self) -> PathBuf {
        self.out.join("finetune")
    }

    pub fn selected_dir(&self) -> PathBuf {
        self.finetune_dir().join("selected")
    }

    pub fn checkpoint_dir(&self, variant: Variant) -> PathBuf {
        match variant {
            Variant::Base => self.ce_dir(),
            Variant::Oecc => self.selected_dir(),
        }
    }

    pub fn detector_dir(&self, variant: Variant, detector: Detector) -> PathBuf {
        self.out
            .join("detectors")
            .join(variant.dir_name())
            .join(detector.dir_name())
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.out.join("scores")
    }

    pub fn results_path(&self) -> PathBuf {
        self.out.join("results.json")
    }

    fn config_hash(&self) -> Result<String> {
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        use sha2::Digest;
        Ok(hex::encode(sha2::Sha256::digest(json)))
    }

    fn record(&self, command: &str, inputs: Vec<(&str, &Path)>, artifacts: Vec<(&str, &Path)>) -> Result<()> {
        let entries = |v: Vec<(&str, &Path)>| v.into_iter().map(|(l, p)| Entry::of(l, p)).collect::<Result<Vec<_>>>();
        let record = CommandRecord {
            seed: self.seed,
            config_sha256: self.config_hash()?,
            inputs: entries(inputs)?,
            artifacts: entries(artifacts)?,
        };
        RunManifest::update(&self.out, command, record)
    }

    fn paths(&self) -> &super::config::DatasetPaths {
        &self.config.datasets
    }

    fn load_train(&self) -> Result<Dataset> {
        load_role(self.paths().d_in_train.as_deref(), Role::DInTrain)
    }

    fn load_oe(&self) -> Result<Dataset> {
        load_role(self.paths().d_out_oe.as_deref(), Role::DOutOe)
    }

    fn load_in_test(&self) -> Result<InTest> {
        let test = load_role(self.paths().d_in_test.as_deref(), Role::DInTest)?;
        let f = self.config.detectors.val_fraction;
        let mut parts = split(&test, &SplitPlan::new(self.seed, vec![f, 1.0 - f])?)?;
        let eval = parts.pop().expect("two parts");
        let val = parts.pop().expect("two parts");
        Ok(InTest {
            name: test.name,
            val,
            eval,
        })
    }

    fn load_out_tests(&self) -> Result<Vec<OutTest>> {
        let f = self.config.detectors.oracle_fraction;
        self.paths()
            .d_out_test
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let ds = load_role(Some(p), Role::DOutTest)?;
                match self.config.tuning_protocol {
                    TuningProtocol::ZeroShot => Ok(OutTest {
                        name: ds.name.clone(),
                        eval: ds,
                        heldout: None,
                    }),
                    TuningProtocol::Oracle => {
                        let plan = SplitPlan::new(self.seed.wrapping_add(1 + j as u64), vec![f, 1.0 - f])?;
                        let mut parts = split(&ds, &plan)?;
                        let eval = parts.pop().expect("two parts");
                        let heldout = parts.pop().expect("two parts").with_role(Role::DOutVal)?;
                        Ok(OutTest {
                            name: ds.name,
                            eval,
                            heldout: Some(heldout),
                        })
                    }
                }
            })
            .collect()
    }

    fn load_vals(&self) -> Result<Vec<Dataset>> {
        self.paths()
            .d_out_val
            .iter()
            .map(|p| load_role(Some(p), Role::DOutVal))
            .collect()
    }

    /// Validation outlier sets under the configured protocol.
    fn validation_outliers(&self, out_tests: &[OutTest]) -> Result<Vec<Dataset>> {
        let sets = match self.config.tuning_protocol {
            TuningProtocol::ZeroShot => self.load_vals()?,
            TuningProtocol::Oracle => out_tests.iter().filter_map(|t| t.heldout.clone()).collect(),
        };
        if sets.is_empty() {
            let role = match self.config.tuning_protocol {
                TuningProtocol::ZeroShot => "d_out_val",
                TuningProtocol::Oracle => "d_out_test",
            };
            return Err(Error::Config(format!("{role}: no validation outlier sets configured")));
        }
        Ok(sets)
    }

    /// Refuses to proceed if the outlier-exposure set or any validation set
    /// shares an image with any test outlier set.
    pub fn check_disjointness(&self) -> Result<()> {
        let tests: Vec<Dataset> = self
            .paths()
            .d_out_test
            .iter()
            .map(|p| load_role(Some(p), Role::DOutTest))
            .collect::<Result<_>>()?;
        let mut others = Vec::new();
        if self.paths().d_out_oe.is_some() {
            others.push(self.load_oe()?);
        }
        others.extend(self.load_vals()?);
        for a in &others {
            for b in &tests {
                if let Some((index_a, index_b)) = check_disjoint(a, b)?.first_collision {
                    return Err(Error::NotDisjoint {
                        a: format!("{} ({})", a.name, a.role.as_str()),
                        b: format!("{} ({})", b.name, b.role.as_str()),
                        index_a,
                        index_b,
                    });
                }
            }
        }
        Ok(())
    }
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Maximum softmax probability of every example.
pub fn msp_scores(net: &Network, images: &Tensor) -> Result<Vec<f64>> {
    let logits = net.logits_batch(images)?;
    Ok((0..logits.rows())
        .map(|i| msp_score(logits.item_slice(i)).value())
        .collect())
}

fn union_images(sets: &[Dataset]) -> Result<Tensor> {
    let parts: Vec<&Tensor> = sets.iter().map(|d| d.images.tensor()).collect();
    Tensor::concat(&parts)
}

/// Cross-entropy training; writes the checkpoint (with the measured
/// training accuracy) to `<out>/ce`.
pub fn cmd_train(exp: &Experiment) -> Result<PathBuf> {
    let train = exp.load_train()?;
    let k = train
        .num_classes
        .ok_or_else(|| Error::Data(format!("{} has no class count", train.name)))?;
    let net_cfg = &exp.config.network;
    let net = Network::new(net_cfg.input_shape.clone(), net_cfg.layers.clone(), k, exp.seed)?;
    let mut tc = exp.config.train.clone();
    tc.seed = exp.seed;
    let (net, acc) = nn::train(net, &train, &tc)?;
    info!("trained on {} examples, training accuracy {:.4}", train.len(), acc);
    let dir = exp.ce_dir();
    fresh_dir(&dir)?;
    let mut ck = Checkpoint::new(net);
    ck.train_accuracy = Some(acc);
    ck.save(&dir)?;
    let train_path = exp.paths().d_in_train.clone().expect("loaded above");
    exp.record("train", vec![("d_in_train", &train_path)], vec![("checkpoint", &dir)])?;
    Ok(dir)
}

/// Validation AUROC of one set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedAuroc {
    pub name: String,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub val_auroc: Vec<NamedAuroc>,
    pub mean_auroc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub protocol: TuningProtocol,
    pub train_accuracy: f64,
    pub points: Vec<GridPoint>,
    pub selected: usize,
}

impl FinetuneReport {
    pub fn selected_point(&self) -> &GridPoint {
        &self.points[self.selected]
    }
}

/// Fine-tunes one network per `(λ1, λ2)` grid point and keeps the one with
/// the highest mean MSP AUROC over the validation outlier sets (the first
/// grid point wins ties). Writes `grid.json`, every grid checkpoint, and
/// the selection under `<out>/finetune`.
pub fn cmd_finetune(exp: &Experiment) -> Result<FinetuneReport> {
    exp.check_disjointness()?;
    let ck = Checkpoint::load(&exp.ce_dir())?;
    let a_tr = ck
        .train_accuracy
        .ok_or_else(|| Error::Config("checkpoint has no recorded training accuracy".into()))?;
    let train = exp.load_train()?;
    let oe = exp.load_oe()?;
    let in_test = exp.load_in_test()?;
    let out_tests = exp.load_out_tests()?;
    let vals = exp.validation_outliers(&out_tests)?;

    let dir = exp.finetune_dir();
    fresh_dir(&dir)?;
    let grid = exp.config.lambda_grid();
    let results: Vec<(GridPoint, Option<Error>, Option<Network>)> = grid
        .par_iter()
        .enumerate()
        .map(|(index, &(lambda1, lambda2))| {
            let seed = exp.seed.wrapping_add(index as u64);
            let mut point = GridPoint {
                index,
                lambda1,
                lambda2,
                seed,
                val_auroc: Vec::new(),
                mean_auroc: None,
                error: None,
            };
            let run = || -> Result<(Network, Vec<NamedAuroc>)> {
                let oecc = OeccConfig::new(lambda1, lambda2, a_tr)?;
                let mut tc = exp.config.finetune.clone();
                tc.seed = seed;
                let net = nn::finetune_oecc(ck.network.clone(), &train, &oe, &tc, oecc)?;
                let in_scores = msp_scores(&net, in_test.val.images.tensor())?;
                let aurocs = vals
                    .iter()
                    .map(|v| {
                        let sample = ScoreSample::new(in_scores.clone(), msp_scores(&net, v.images.tensor())?)?;
                        Ok(NamedAuroc {
                            name: v.name.clone(),
                            auroc: auroc(&sample),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((net, aurocs))
            };
            match run() {
                Ok((net, aurocs)) => {
                    point.mean_auroc = Some(aurocs.iter().map(|a| a.auroc).sum::<f64>() / aurocs.len() as f64);
                    point.val_auroc = aurocs;
                    (point, None, Some(net))
                }
                Err(e) => {
                    warn!("grid point λ1={lambda1} λ2={lambda2} failed: {e}");
                    point.error = Some(e.to_string());
                    (point, Some(e), None)
                }
            }
        })
        .collect();

    let mut selected: Option<usize> = None;
    for (p, _, _) in &results {
        if let Some(m) = p.mean_auroc {
            if selected.is_none_or(|s| m > results[s].0.mean_auroc.expect("scored")) {
                selected = Some(p.index);
            }
        }
    }
    let mut points = Vec::with_capacity(results.len());
    let mut first_error = None;
    let mut selected_net = None;
    for (p, err, net) in results {
        if let Some(net) = &net {
            let mut gck = Checkpoint::new(net.clone());
            gck.train_accuracy = Some(a_tr);
            gck.oecc = Some(OeccConfig::new(p.lambda1, p.lambda2, a_tr)?);
            gck.save(&dir.join("grid").join(format!("point{}", p.index)))?;
        }
        if Some(p.index) == selected {
            selected_net = net;
        }
        if first_error.is_none() {
            first_error = err;
        }
        points.push(p);
    }
    let Some(selected) = selected else {
        // Nothing to select: surface the first failure (divergence keeps its
        // own exit status).
        return Err(first_error.expect("every point failed"));
    };
    let report = FinetuneReport {
        protocol: exp.config.tuning_protocol,
        train_accuracy: a_tr,
        points,
        selected,
    };
    let chosen = report.selected_point();
    info!(
        "selected λ1={} λ2={} (mean validation AUROC {:.4})",
        chosen.lambda1,
        chosen.lambda2,
        chosen.mean_auroc.expect("scored")
    );
    let mut sck = Checkpoint::new(selected_net.expect("selected point has a network"));
    sck.train_accuracy = Some(a_tr);
    sck.oecc = Some(OeccConfig::new(chosen.lambda1, chosen.lambda2, a_tr)?);
    sck.save(&exp.selected_dir())?;
    let grid_path = dir.join("grid.json");
    write_json(&grid_path, &report)?;

    let mut inputs = vec![("ce_checkpoint", exp.ce_dir())];
    inputs.extend(dataset_inputs(exp));
    let inputs_ref = inputs.iter().map(|(l, p)| (*l, p.as_path())).collect();
    let selected_dir = exp.selected_dir();
    exp.record(
        "finetune",
        inputs_ref,
        vec![("grid", grid_path.as_path()), ("selected", selected_dir.as_path())],
    )?;
    Ok(report)
}

fn dataset_inputs(exp: &Experiment) -> Vec<(&'static str, PathBuf)> {
    let d = exp.paths();
    let mut v = Vec::new();
    v.extend(d.d_in_train.clone().map(|p| ("d_in_train", p)));
    v.extend(d.d_in_test.clone().map(|p| ("d_in_test", p)));
    v.extend(d.d_out_oe.clone().map(|p| ("d_out_oe", p)));
    v.extend(d.d_out_val.iter().cloned().map(|p| ("d_out_val", p)));
    v.extend(d.d_out_test.iter().cloned().map(|p| ("d_out_test", p)));
    v.into_iter().filter(|(_, p)| p.exists()).collect()
}

/// Validation AUROC of the Mahalanobis detector for one perturbation size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsTrial {
    pub eps: f64,
    pub val_auroc: Option<f64>,
    pub error: Option<String>,
}

fn fit_md(
    exp: &Experiment,
    net: &Network,
    train: &Dataset,
    val_in: &Tensor,
    val_out: &Tensor,
    dir: &Path,
) -> Result<()> {
    let base = mahalanobis::fit(net, train)?;
    let mut trials = Vec::new();
    let mut best: Option<(f64, MahalanobisState)> = None;
    for &eps in &exp.config.detectors.md_eps_grid {
        let mut state = base.clone();
        state.preproc_eps = eps;
        let attempt = mahalanobis::fit_combiner(&state, net, val_in, val_out).and_then(|fitted| {
            let sample = ScoreSample::new(
                mahalanobis::score_batch(&fitted, net, val_in)?,
                mahalanobis::score_batch(&fitted, net, val_out)?,
            )?;
            Ok((auroc(&sample), fitted))
        });
        match attempt {
            Ok((a, fitted)) => {
                trials.push(EpsTrial {
                    eps,
                    val_auroc: Some(a),
                    error: None,
                });
                if best.as_ref().is_none_or(|(b, _)| a > *b) {
                    best = Some((a, fitted));
                }
            }
            Err(e) => trials.push(EpsTrial {
                eps,
                val_auroc: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let Some((a, state)) = best else {
        return Err(Error::Validation(format!(
            "Mahalanobis combiner failed for every perturbation size: {}",
            trials[0].error.as_deref().unwrap_or_default()
        )));
    };
    info!("Mahalanobis: eps={} (validation AUROC {a:.4})", state.preproc_eps);
    state.save(dir)?;
    write_json(&dir.join("tuning.json"), &trials)
}

/// Fits and persists one detector on one network variant under
/// `<out>/detectors/<variant>/<detector>`.
pub fn cmd_fit_detector(exp: &Experiment, detector: Detector, variant: Variant) -> Result<PathBuf> {
    if detector == Detector::Msp {
        return Err(Error::Config("the MSP baseline has no fitted state".into()));
    }
    exp.check_disjointness()?;
    let ck_dir = exp.checkpoint_dir(variant);
    let net = Checkpoint::load(&ck_dir)?.network;
    let train = exp.load_train()?;
    let in_test = exp.load_in_test()?;
    let dir = exp.detector_dir(variant, detector);
    fresh_dir(&dir)?;
    match detector {
        Detector::Md => {
            let out_tests = exp.load_out_tests()?;
            let val_out = union_images(&exp.validation_outliers(&out_tests)?)?;
            fit_md(exp, &net, &train, in_test.val.images.tensor(), &val_out, &dir)?;
        }
        Detector::Fcgm => {
            let bounds = fcgm::fit_bounds(&net, train.images.tensor(), &exp.config.detectors.fcgm_orders)?;
            let calibrated = fcgm::calibrate_normalizer(&bounds, &net, in_test.val.images.tensor())?;
            info!(
                "FCGM normalizers {:?}",
                calibrated.expected_dev.as_deref().unwrap_or_default()
            );
            calibrated.save(&dir)?;
        }
        Detector::Msp => unreachable!(),
    }
    let mut inputs = vec![("checkpoint", ck_dir)];
    inputs.extend(dataset_inputs(exp));
    let inputs_ref = inputs.iter().map(|(l, p)| (*l, p.as_path())).collect();
    let command = format!("fit-detector/{}/{}", variant.dir_name(), detector.dir_name());
    exp.record(&command, inputs_ref, vec![("detector", dir.as_path())])?;
    Ok(dir)
}

enum Scorer {
    Msp(Network),
    Md(Network, MahalanobisState),
    Fcgm(Network, GramBounds),
}

impl Scorer {
    fn load(exp: &Experiment, detector: Detector, variant: Variant) -> Result<Self> {
        let net = Checkpoint::load(&exp.checkpoint_dir(variant))?.network;
        let dir = exp.detector_dir(variant, detector);
        Ok(match detector {
            Detector::Msp => Scorer::Msp(net),
            Detector::Md => Scorer::Md(net, MahalanobisState::load(&dir)?),
            Detector::Fcgm => Scorer::Fcgm(net, GramBounds::load(&dir)?),
        })
    }

    fn scores(&self, images: &Tensor) -> Result<Vec<f64>> {
        match self {
            Scorer::Msp(net) => msp_scores(net, images),
            Scorer::Md(net, state) => mahalanobis::score_batch(state, net, images),
            Scorer::Fcgm(net, bounds) => fcgm::score_batch(bounds, net, images),
        }
    }
}

/// Method columns in table order: each detector on the base network, then
/// on the fine-tuned one when it exists.
pub fn methods(exp: &Experiment) -> Vec<(Detector, Variant)> {
    let tuned = exp.selected_dir().join("manifest.json").exists();
    exp.config
        .detectors
        .methods
        .iter()
        .flat_map(|&d| {
            let mut v = vec![(d, Variant::Base)];
            if tuned {
                v.push((d, Variant::Oecc));
            }
            v
        })
        .collect()
}

fn score_file(method: &str, d_out: &str) -> PathBuf {
    let slug = |s: &str| s.replace(|c: char| !c.is_ascii_alphanumeric() && c != '_' && c != '-', "_");
    PathBuf::from("scores")
        .join(slug(method))
        .join(format!("{}.json", slug(d_out)))
}

/// Scores every `(D_out^test, method)` cell, persists the raw scores, and
/// writes `results.json` / `results.txt`. Failed cells carry their error.
pub fn cmd_evaluate(exp: &Experiment) -> Result<ResultTable> {
    exp.check_disjointness()?;
    let in_test = exp.load_in_test()?;
    let out_tests = exp.load_out_tests()?;
    if out_tests.is_empty() {
        return Err(Error::Config("d_out_test: no test outlier sets configured".into()));
    }
    let methods = methods(exp);
    let names: Vec<String> = methods.iter().map(|&(d, v)| v.method_name(d)).collect();
    let scores_root = exp.scores_dir();
    fresh_dir(&scores_root)?;

    // columns[m][row]
    let columns: Vec<Vec<Cell>> = methods
        .par_iter()
        .zip(&names)
        .map(|(&(detector, variant), name)| {
            let prepared = Scorer::load(exp, detector, variant)
                .and_then(|s| s.scores(in_test.eval.images.tensor()).map(|ins| (s, ins)));
            let (scorer, in_scores) = match prepared {
                Ok(p) => p,
                Err(e) => {
                    return out_tests
                        .iter()
                        .map(|_| Cell::failed(name.clone(), e.to_string()))
                        .collect()
                }
            };
            out_tests
                .iter()
                .map(|t| {
                    let cell = || -> Result<Cell> {
                        let sample = ScoreSample::new(in_scores.clone(), scorer.scores(t.eval.images.tensor())?)?;
                        let rel = score_file(name, &t.name);
                        let path = exp.out.join(&rel);
                        fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&path, e))?;
                        write_json(&path, &sample)?;
                        Ok(Cell::ok(name.clone(), evaluate(&sample), rel))
                    };
                    cell().unwrap_or_else(|e| Cell::failed(name.clone(), e.to_string()))
                })
                .collect()
        })
        .collect();
    let rows = out_tests
        .iter()
        .enumerate()
        .map(|(r, t)| Row {
            d_in: in_test.name.clone(),
            d_out: t.name.clone(),
            cells: columns.iter().map(|col| col[r].clone()).collect(),
        })
        .collect();
    let table = ResultTable::new(exp.config.tuning_protocol, names, exp.config.metrics.clone(), rows);
    write_tables(exp, &table, "results")?;

    let mut inputs: Vec<(&str, PathBuf)> = dataset_inputs(exp);
    for (d, v) in &methods {
        inputs.push(("checkpoint", exp.checkpoint_dir(*v)));
        if *d != Detector::Msp && exp.detector_dir(*v, *d).exists() {
            inputs.push(("detector", exp.detector_dir(*v, *d)));
        }
    }
    inputs.sort();
    inputs.dedup();
    let inputs_ref = inputs.iter().map(|(l, p)| (*l, p.as_path())).collect();
    let results = exp.results_path();
    exp.record(
        "evaluate",
        inputs_ref,
        vec![("results", results.as_path()), ("scores", scores_root.as_path())],
    )?;
    Ok(table)
}

fn write_tables(exp: &Experiment, table: &ResultTable, stem: &str) -> Result<()> {
    write_json(&exp.out.join(format!("{stem}.json")), table)?;
    let txt = exp.out.join(format!("{stem}.txt"));
    fs::write(&txt, table.render()).map_err(|e| Error::io(&txt, e))
}

/// Rebuilds the result table from the persisted raw score files alone.
pub fn report(out: &Path) -> Result<ResultTable> {
    let stored: ResultTable = read_json(&out.join("results.json"))?;
    let mut table = stored.clone();
    for row in &mut table.rows {
        for cell in &mut row.cells {
            if let Some(rel) = &cell.scores {
                let sample: ScoreSample = read_json(&out.join(rel))?;
                let sample = ScoreSample::new(sample.in_scores, sample.out_scores)?;
                cell.result = Some(evaluate(&sample));
            }
        }
    }
    table.annotate();
    Ok(table)
}

/// Outcome of [`cmd_gen_synthetic`]: containers written and kinds refused.
#[derive(Debug, Default)]
pub struct SyntheticReport {
    pub written: Vec<PathBuf>,
    pub refused: Vec<(GenKind, Error)>,
}

/// The configured generator specs, or one spec per kind when none are
/// configured.
pub fn synthetic_specs(exp: &Experiment) -> Vec<GenSpec> {
    if exp.config.synthetic.is_empty() {
        GenKind::ALL
            .iter()
            .enumerate()
            .map(|(k, &kind)| GenSpec::new(kind, exp.seed.wrapping_add(k as u64), DEFAULT_SYNTHETIC_COUNT))
            .collect()
    } else {
        exp.config.synthetic.clone()
    }
}

/// Writes one validation-outlier container per generator spec under
/// `<out>/synthetic`, sourced from the training set. Generators whose
/// preconditions fail are reported and skipped.
pub fn cmd_gen_synthetic(exp: &Experiment) -> Result<SyntheticReport> {
    let train = exp.load_train()?;
    let shape = train.images.image_shape();
    let root = exp.out.join("synthetic");
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let specs = synthetic_specs(exp);
    let outcomes: Vec<(GenKind, Result<PathBuf>)> = specs
        .par_iter()
        .map(|spec| {
            let spec = spec.clone().with_source(train.name.clone());
            let name = format!("{}_{}", spec.kind.as_str(), spec.seed);
            let run = || -> Result<PathBuf> {
                let images = generate(&spec, Some(&train.images), shape)?;
                let ds = Dataset::unlabelled(name.clone(), Role::DOutVal, images)?.with_provenance(spec.clone());
                let dir = root.join(&name);
                fresh_dir(&dir)?;
                ds.save(&dir)?;
                Ok(dir)
            };
            (spec.kind, run())
        })
        .collect();
    let mut report = SyntheticReport::default();
    for (kind, r) in outcomes {
        match r {
            Ok(dir) => report.written.push(dir),
            Err(e) => report.refused.push((kind, e)),
        }
    }
    let train_path = exp.paths().d_in_train.clone().expect("loaded above");
    let artifacts: Vec<(&str, &Path)> = report.written.iter().map(|p| ("d_out_val", p.as_path())).collect();
    exp.record("gen-synthetic", vec![("d_in_train", &train_path)], artifacts)?;
    Ok(report)
}

/// Train, fine-tune (when an outlier-exposure set is configured), fit
/// every selected detector on every network, and evaluate.
pub fn run_all(exp: &Experiment) -> Result<ResultTable> {
    exp.check_disjointness()?;
    cmd_train(exp)?;
    let mut variants = vec![Variant::Base];
    if exp.paths().d_out_oe.is_some() {
        cmd_finetune(exp)?;
        variants.push(Variant::Oecc);
    } else if exp.finetune_dir().exists() {
        // A stale selection from an earlier run must not be evaluated.
        fs::remove_dir_all(exp.finetune_dir()).map_err(|e| Error::io(exp.finetune_dir(), e))?;
    }
    for &d in &exp.config.detectors.methods {
        if d == Detector::Msp {
            continue;
        }
        for &v in &variants {
            cmd_fit_detector(exp, d, v)?;
        }
    }
    cmd_evaluate(exp)
}
