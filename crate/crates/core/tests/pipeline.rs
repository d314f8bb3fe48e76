use std::path::Path;
use std::time::Instant;

use oodkit::data::Role;
use oodkit::fcgm::{self, DEV_FLOOR};
use oodkit::harness::{
    cmd_evaluate, cmd_finetune, cmd_fit_detector, cmd_gen_synthetic, cmd_train, content_hash, report, run_all,
    Detector, Experiment, ExperimentConfig, TuningProtocol, Variant,
};
use oodkit::mahalanobis;
use oodkit::nn::finetune_ce;
use oodkit::synthgen::{gen_uniform_noise, GenKind, GenSpec};
use oodkit::toy::{toy_layers, OodFamily, ToyConfig, INPUT_SHAPE};
use oodkit::{Checkpoint, Dataset, Error, GramBounds, MahalanobisState, ScoreSample};
use tempfile::TempDir;

fn toy_experiment(toy: &ToyConfig, seed: u64, edit: impl FnOnce(&mut ExperimentConfig)) -> (TempDir, Experiment) {
    let dir = tempfile::tempdir().unwrap();
    let path = oodkit::harness::write_toy_experiment(dir.path(), toy, seed).unwrap();
    let mut config = ExperimentConfig::load(&path).unwrap();
    edit(&mut config);
    let exp = Experiment::new(config, None, None).unwrap();
    (dir, exp)
}

fn small_toy() -> ToyConfig {
    ToyConfig {
        n_train: 400,
        n_test: 200,
        n_oe: 400,
        n_val: 100,
        n_out_test: 200,
        ..ToyConfig::default()
    }
}

#[test]
fn two_class_toy_trains_to_high_accuracy() {
    let toy = ToyConfig {
        classes: 2,
        n_train: 500,
        ..ToyConfig::default()
    };
    let (_dir, exp) = toy_experiment(&toy, 0, |_| {});
    let start = Instant::now();
    let ck_dir = cmd_train(&exp).unwrap();
    assert!(start.elapsed().as_secs() < 60);
    let acc = Checkpoint::load(&ck_dir).unwrap().train_accuracy.unwrap();
    assert!(acc >= 0.95, "training accuracy {acc}");

    let again = Experiment::new(exp.config.clone(), Some(exp.out.with_file_name("out2")), None).unwrap();
    let ck2 = cmd_train(&again).unwrap();
    assert_eq!(content_hash(&ck_dir).unwrap(), content_hash(&ck2).unwrap());
}

#[test]
fn zero_grid_selects_plain_ce_finetune() {
    let (_dir, exp) = toy_experiment(&small_toy(), 1, |c| {
        c.lambda1 = vec![0.0];
        c.lambda2 = vec![0.0];
        c.finetune.epochs = 2;
    });
    cmd_train(&exp).unwrap();
    let rep = cmd_finetune(&exp).unwrap();
    assert_eq!(rep.selected, 0);

    let ce = Checkpoint::load(&exp.ce_dir()).unwrap().network;
    let train = Dataset::load(exp.config.datasets.d_in_train.as_deref().unwrap()).unwrap();
    let mut tc = exp.config.finetune.clone();
    tc.seed = exp.seed;
    let expected = finetune_ce(ce, &train, &tc).unwrap();
    let selected = Checkpoint::load(&exp.selected_dir()).unwrap().network;
    assert_eq!(selected, expected);
}

#[test]
fn noise_validation_prefers_the_uniformity_term() {
    let (_dir, exp) = toy_experiment(&small_toy(), 2, |c| {
        c.lambda1 = vec![0.0];
        c.lambda2 = vec![0.0, 0.5];
    });
    cmd_train(&exp).unwrap();
    let rep = cmd_finetune(&exp).unwrap();
    let chosen = rep.selected_point();
    assert!(chosen.lambda2 > 0.0, "selected {:?}", chosen);
    assert_eq!(rep.points.len(), 2);

    let rerun = cmd_finetune(&exp).unwrap();
    assert_eq!(rerun, rep);
}

#[test]
fn fcgm_normalizer_floors_on_training_partition() {
    let (_dir, exp) = toy_experiment(&small_toy(), 3, |_| {});
    cmd_train(&exp).unwrap();
    let net = Checkpoint::load(&exp.ce_dir()).unwrap().network;
    let train = Dataset::load(exp.config.datasets.d_in_train.as_deref().unwrap()).unwrap();
    let bounds = fcgm::fit_bounds(&net, train.images.tensor(), &fcgm::DEFAULT_ORDERS).unwrap();
    let calibrated = fcgm::calibrate_normalizer(&bounds, &net, train.images.tensor()).unwrap();
    let e = calibrated.expected_dev.unwrap();
    assert_eq!(e.len(), net.capture_points().len());
    assert!(e.iter().all(|&v| v == DEV_FLOOR), "{e:?}");
}

#[test]
fn md_fit_is_reproducible_and_round_trips() {
    let (_dir, exp) = toy_experiment(&small_toy(), 4, |_| {});
    cmd_train(&exp).unwrap();
    let dir = cmd_fit_detector(&exp, Detector::Md, Variant::Base).unwrap();
    let first = content_hash(&dir).unwrap();
    cmd_fit_detector(&exp, Detector::Md, Variant::Base).unwrap();
    assert_eq!(content_hash(&dir).unwrap(), first);

    let state = MahalanobisState::load(&dir).unwrap();
    let net = Checkpoint::load(&exp.ce_dir()).unwrap().network;
    let test = Dataset::load(exp.config.datasets.d_in_test.as_deref().unwrap()).unwrap();
    let scores = mahalanobis::score_batch(&state, &net, test.images.tensor()).unwrap();
    assert_eq!(scores.len(), test.len());
    assert!(scores.iter().all(|s| s.is_finite()));

    let fdir = cmd_fit_detector(&exp, Detector::Fcgm, Variant::Base).unwrap();
    let bounds = GramBounds::load(&fdir).unwrap();
    assert!(fcgm::score_batch(&bounds, &net, test.images.tensor()).is_ok());
}

fn write_far_noise(root: &Path) -> std::path::PathBuf {
    let spec = GenSpec::new(GenKind::UniformNoise, 0xFA4, 200);
    let images = gen_uniform_noise(&spec, INPUT_SHAPE).unwrap();
    let ds = Dataset::unlabelled("far_noise", Role::DOutTest, images)
        .unwrap()
        .with_provenance(spec);
    let path = root.join("data/far_noise");
    ds.save(&path).unwrap();
    path
}

#[test]
fn full_run_is_deterministic_and_recomputable() {
    let (dir, exp) = toy_experiment(&small_toy(), 5, |_| {});
    let far = write_far_noise(dir.path());
    let mut config = exp.config.clone();
    config.datasets.d_out_test.push(far);
    let exp = Experiment::new(config, None, None).unwrap();
    let table = run_all(&exp).unwrap();

    // 3 detectors × {base, OECC}, 2 test sets, 3 metrics.
    assert_eq!(table.methods.len(), 6);
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.value_count(), 2 * 6 * 3);
    assert_eq!(table.failed_cells(), 0);
    for method in ["MD", "OECC+MD"] {
        let auroc = table.cell("far_noise", method).unwrap().result.unwrap().auroc;
        assert!(auroc >= 0.95, "{method} on far noise: {auroc}");
    }

    assert_eq!(report(&exp.out).unwrap(), table);
    let evaluated = cmd_evaluate(&exp).unwrap();
    assert_eq!(evaluated, table);

    let again = Experiment::new(exp.config.clone(), Some(dir.path().join("out_again")), None).unwrap();
    assert_eq!(run_all(&again).unwrap(), table);
}

#[test]
fn oracle_protocol_holds_out_part_of_each_test_set() {
    let toy = small_toy();
    let (_dir, exp) = toy_experiment(&toy, 6, |c| {
        c.tuning_protocol = TuningProtocol::Oracle;
        c.detectors.oracle_fraction = 0.25;
    });
    let table = run_all(&exp).unwrap();
    assert!(table.render().contains("oracle"));
    let cell = table.cell("toy_pairs", "OECC+MD").unwrap();
    let sample: ScoreSample =
        serde_json::from_str(&std::fs::read_to_string(exp.out.join(cell.scores.as_ref().unwrap())).unwrap()).unwrap();
    assert_eq!(sample.out_scores.len(), toy.n_out_test - toy.n_out_test / 4);
    assert!(sample.in_scores.len() < toy.n_test);
}

#[test]
fn synthetic_generation_respects_the_channel_contract() {
    let (_dir, exp) = toy_experiment(&small_toy(), 7, |_| {});
    let rep = cmd_gen_synthetic(&exp).unwrap();
    assert_eq!(rep.written.len(), 5);
    let refused: Vec<GenKind> = rep.refused.iter().map(|(k, _)| *k).collect();
    assert_eq!(refused, vec![GenKind::Inverted, GenKind::RgbGhosted]);
    assert!(rep.refused.iter().all(|(_, e)| matches!(e, Error::Channel(1))));
}

#[test]
fn rgb_source_yields_all_seven_generators() {
    let dir = tempfile::tempdir().unwrap();
    let shape = [3, 8, 8];
    let images = gen_uniform_noise(&GenSpec::new(GenKind::UniformNoise, 1, 40), shape).unwrap();
    let labels = (0..40).map(|i| i % 2).collect();
    let train = Dataset::new("rgb_train", Role::DInTrain, images, Some(labels), Some(2)).unwrap();
    let train_dir = dir.path().join("rgb_train");
    train.save(&train_dir).unwrap();

    let mut config = oodkit::harness::toy_experiment_config(2, OodFamily::Pairs);
    config.datasets = Default::default();
    config.datasets.d_in_train = Some(train_dir);
    config.network.input_shape = shape.to_vec();
    config.network.layers = toy_layers(2);
    let exp = Experiment::new(config, Some(dir.path().join("out")), Some(11)).unwrap();

    let rep = cmd_gen_synthetic(&exp).unwrap();
    assert!(rep.refused.is_empty());
    assert_eq!(rep.written.len(), 7);
    let hashes: Vec<String> = rep.written.iter().map(|d| content_hash(d).unwrap()).collect();
    for d in &rep.written {
        let ds = Dataset::load(d).unwrap();
        assert_eq!(ds.role, Role::DOutVal);
        assert!(ds.provenance.is_some());
        assert_eq!(ds.images.image_shape(), shape);
    }
    let rerun = cmd_gen_synthetic(&exp).unwrap();
    let again: Vec<String> = rerun.written.iter().map(|d| content_hash(d).unwrap()).collect();
    assert_eq!(again, hashes);
}
