use std::path::Path;
use std::process::{Command, Output};

fn oodkit(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_oodkit"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_toy(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let mut args = vec!["gen-toy", "--out", dir.to_str().unwrap()];
    args.extend(extra);
    let o = oodkit(&args, None);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("experiment.json")
}

/// Rewrites one top-level field of a JSON config.
fn edit_config(path: &Path, key: &str, value: serde_json::Value) {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v[key] = value;
    std::fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

#[test]
fn missing_dataset_is_a_data_error_naming_the_role() {
    let dir = tempfile::tempdir().unwrap();
    let config = gen_toy(dir.path(), &["--n-train", "100"]);
    std::fs::remove_dir_all(dir.path().join("data/train")).unwrap();
    let o = oodkit(&["train"], Some(&config));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("d_in_train"), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = gen_toy(dir.path(), &["--n-train", "100"]);
    edit_config(&config, "learning_rate", serde_json::json!(0.1));
    let o = oodkit(&["train"], Some(&config));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn grayscale_source_refuses_channel_generators() {
    let dir = tempfile::tempdir().unwrap();
    let config = gen_toy(dir.path(), &["--n-train", "100"]);
    let o = oodkit(&["gen-synthetic"], Some(&config));
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("refused inverted") && err.contains("refused rgb_ghosted"),
        "{err}"
    );
    assert_eq!(stdout(&o).lines().count(), 5);
    for kind in [
        "uniform_noise",
        "arithmetic_mean",
        "geometric_mean",
        "jigsaw",
        "speckle",
    ] {
        assert!(stdout(&o).contains(kind), "{kind} missing");
    }
}

#[test]
fn step_by_step_run_and_report_agree() {
    let dir = tempfile::tempdir().unwrap();
    let config = gen_toy(dir.path(), &["--n-train", "300", "--seed", "2"]);
    edit_config(&config, "lambda1", serde_json::json!([0.0]));
    edit_config(&config, "lambda2", serde_json::json!([0.0, 0.5]));

    let o = oodkit(&["train"], Some(&config));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = oodkit(&["finetune"], Some(&config));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("selected lambda1=0 lambda2="));
    let o = oodkit(&["fit-detector"], Some(&config));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("out/detectors/oecc/fcgm/manifest.json").exists());

    let evaluated = oodkit(&["evaluate"], Some(&config));
    assert!(evaluated.status.success(), "{}", stderr(&evaluated));
    let table = stdout(&evaluated);
    assert!(table.starts_with("# tuning protocol: zero_shot"), "{table}");
    for method in ["MSP", "OECC+MSP", "MD", "OECC+MD", "FCGM", "OECC+FCGM"] {
        assert!(table.contains(method), "{method} missing from\n{table}");
    }

    let out = dir.path().join("out");
    let reported = oodkit(&["report", "--out", out.to_str().unwrap()], None);
    assert!(reported.status.success(), "{}", stderr(&reported));
    assert_eq!(stdout(&reported), table);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    for command in ["train", "finetune", "evaluate"] {
        assert!(manifest["commands"][command].is_object(), "{command} not recorded");
    }
}

#[test]
fn report_without_results_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = oodkit(&["report", "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("results.json"), "{}", stderr(&o));
}
