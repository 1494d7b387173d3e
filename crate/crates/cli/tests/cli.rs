use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_noisecutmix"));
    c.env_remove("NOISECUTMIX_OUTPUT_DIR");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(
        &p,
        r#"{"num_classes": 2, "n_test_per_class": 20, "schedule_steps": 100, "num_inference_steps": 10,
            "epochs": 5, "trials": 2, "methods": ["original", "noisecutmix"]}"#,
    )
    .unwrap();
    p
}

#[test]
fn experiment_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = run(bin()
        .args(["experiment", "--config"])
        .arg(&cfg)
        .arg("--output-dir")
        .arg(&out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("noisecutmix"));
    assert!(out.join("provenance/noisecutmix_trial2.tsv").exists());
    assert!(out.join("grids/noisecutmix_trial1.pgm").exists());

    let o = run(bin().arg("report").arg("--input").arg(out.join("results.tsv")));
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("original") && text.contains("over 2 trial(s)"));
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("env-out");
    let o = run(bin()
        .args(["experiment", "--trials", "1", "--methods", "original", "--config"])
        .arg(&cfg)
        .env("NOISECUTMIX_OUTPUT_DIR", &out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("results.tsv")).unwrap();
    assert!(table.contains("single trial"));
}

#[test]
fn invalid_inputs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"trails": 3}"#).unwrap();
    let o = run(bin()
        .args(["experiment", "--output-dir"])
        .arg(dir.path())
        .arg("--config")
        .arg(&bad));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trails"));

    let o = run(bin()
        .args(["experiment", "--methods", "original,sd_random", "--output-dir"])
        .arg(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sd_random"));

    let o = run(bin().args(["experiment"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, b"").unwrap();
    let o = run(bin().args(["experiment", "--output-dir"]).arg(file.join("sub")));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn dataset_generate_augment_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let ok = |o: Output| assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    ok(run(bin()
        .args(["dataset", "--per-class", "15", "--seed", "1", "--config"])
        .arg(&cfg)
        .arg("--output")
        .arg(d.join("real.bin"))));
    ok(run(bin()
        .args(["dataset", "--per-class", "20", "--seed", "2", "--config"])
        .arg(&cfg)
        .arg("--output")
        .arg(d.join("test.bin"))));
    ok(run(bin()
        .args(["generate", "--count", "6", "--config"])
        .arg(&cfg)
        .arg("--output-dir")
        .arg(d.join("gen"))));
    for f in ["samples.bin", "provenance.tsv", "grid.pgm"] {
        assert!(d.join("gen").join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(d.join("gen/provenance.tsv"))
            .unwrap()
            .lines()
            .count(),
        7
    );

    let o = run(bin()
        .args(["augment", "--policy", "mixup", "--probability", "1", "--input"])
        .arg(d.join("real.bin"))
        .arg("--output")
        .arg(d.join("mixed.bin")));
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("mixed 30 of 30"));
    let o = run(bin()
        .args(["augment", "--policy", "mixup", "--probability", "1.5", "--input"])
        .arg(d.join("real.bin"))
        .arg("--output")
        .arg(d.join("bad.bin")));
    assert_eq!(o.status.code(), Some(2));
    ok(run(bin()
        .args(["train", "--policy", "cutmix", "--config"])
        .arg(&cfg)
        .arg("--real")
        .arg(d.join("real.bin"))
        .arg("--synthetic")
        .arg(d.join("gen/samples.bin"))
        .arg("--model")
        .arg(d.join("model.bin"))
        .arg("--history")
        .arg(d.join("history.tsv"))));
    assert_eq!(fs::read_to_string(d.join("history.tsv")).unwrap().lines().count(), 6);

    let o = run(bin()
        .arg("evaluate")
        .arg("--model")
        .arg(d.join("model.bin"))
        .arg("--input")
        .arg(d.join("test.bin")));
    assert!(o.status.success());
    let acc: f64 = String::from_utf8_lossy(&o.stdout)
        .trim()
        .strip_prefix("accuracy ")
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn missing_input_file_exits_with_3() {
    let o = run(bin().args([
        "evaluate",
        "--model",
        "/nonexistent/model.bin",
        "--input",
        "/nonexistent/x.bin",
    ]));
    assert_eq!(o.status.code(), Some(3));
}
