//! End-to-end tests of the `fairflow` binary: exit codes, the synthetic
//! pipeline, manifest-driven reruns, and byte-identical outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use tempfile::TempDir;

use fairflow_core::data::{
    write_cache, ColumnKind, ColumnSchema, DatasetSchema, DatasetTriple, Split, TabularDataset,
};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\nstdout: {}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|_| panic!("readable {}", path.display()))
}

fn assert_json_report(path: &Path) {
    let text = read(path);
    assert!(
        text.contains("\"manifest\": \"manifest.json\""),
        "{} does not reference its manifest",
        path.display()
    );
}

fn assert_csv_report(path: &Path) {
    let text = read(path);
    assert!(
        text.starts_with("# manifest: manifest.json\n"),
        "{} does not reference its manifest",
        path.display()
    );
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gamma_outside_unit_interval_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("data");
    let out = run(&[
        "train",
        "--dataset",
        "synthetic",
        "--density",
        "nowhere.json",
        "--gamma",
        "1.5",
        "--data-root",
        root.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gamma"), "stderr: {stderr}");
}

#[test]
fn missing_cache_exits_3_and_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("data");
    std::fs::create_dir_all(&root).unwrap();
    let out = run(&[
        "fit-density",
        "--dataset",
        "synthetic",
        "--data-root",
        root.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("cache") && stderr.contains("synthetic"),
        "stderr should name the missing cache path, got: {stderr}"
    );
}

#[test]
fn data_root_falls_back_to_the_environment() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("via-env");
    std::fs::create_dir_all(&root).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fairflow"))
        .args([
            "fit-density",
            "--dataset",
            "synthetic",
            "--out",
            tmp.path().join("out").to_str().unwrap(),
        ])
        .env("FAIRFLOW_DATA_ROOT", &root)
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("via-env"), "stderr: {stderr}");
}

#[test]
fn synthetic_caches_are_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let roots = [tmp.path().join("a"), tmp.path().join("b")];
    for root in &roots {
        run_ok(&[
            "synth",
            "--n-per-group",
            "80",
            "--seed",
            "3",
            "--data-root",
            root.to_str().unwrap(),
            "--out",
            root.join("out").to_str().unwrap(),
        ]);
    }
    for file in ["schema.json", "train.csv", "validation.csv", "test.csv"] {
        let a = read(&roots[0].join("cache/synthetic").join(file));
        let b = read(&roots[1].join("cache/synthetic").join(file));
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

/// The whole synthetic pipeline: cache, densities, training, certification,
/// learned attacks, metrics, recourse, and a manifest-driven rerun.
#[test]
fn synthetic_pipeline_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("data");
    let out = |name: &str| tmp.path().join(name);
    let root_s = root.to_str().unwrap().to_string();

    run_ok(&[
        "synth",
        "--n-per-group",
        "240",
        "--seed",
        "11",
        "--data-root",
        &root_s,
        "--out",
        out("synth").to_str().unwrap(),
    ]);
    assert_csv_report(&out("synth").join("stats.csv"));
    assert_json_report(&out("synth").join("stats.json"));

    run_ok(&[
        "fit-density",
        "--dataset",
        "synthetic",
        "--density",
        "gmm",
        "--gmm-k0",
        "2",
        "--gmm-k1",
        "2",
        "--seed",
        "11",
        "--data-root",
        &root_s,
        "--out",
        out("density").to_str().unwrap(),
    ]);
    let density = out("density").join("density.json");
    assert!(density.exists());
    assert_json_report(&out("density").join("fit.json"));

    let stdout = run_ok(&[
        "train",
        "--dataset",
        "synthetic",
        "--density",
        density.to_str().unwrap(),
        "--gamma",
        "1",
        "--seeds",
        "1",
        "--epochs",
        "3",
        "--batch-size",
        "64",
        "--blocks",
        "2",
        "--flow-hidden",
        "8",
        "--classifier-hidden",
        "8",
        "--seed",
        "11",
        "--data-root",
        &root_s,
        "--out",
        out("train").to_str().unwrap(),
        "--svg",
    ]);
    assert!(stdout.contains("gamma 1 seed 11"), "stdout: {stdout}");
    let checkpoint = out("train").join("checkpoint-g1-s11.json");
    assert!(checkpoint.exists());
    assert_csv_report(&out("train").join("tradeoff.csv"));
    assert_csv_report(&out("train").join("trace-g1-s11.csv"));
    assert!(out("train").join("tradeoff.svg").exists());

    let stdout = run_ok(&[
        "certify",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--n",
        "2000",
        "--delta",
        "0.05",
        "--conditional",
        "--seed",
        "11",
        "--data-root",
        &root_s,
        "--out",
        out("certify").to_str().unwrap(),
    ]);
    assert!(stdout.contains("max adversarial accuracy"), "stdout: {stdout}");
    assert_json_report(&out("certify").join("certify.json"));
    assert_csv_report(&out("certify").join("certify.csv"));

    run_ok(&[
        "attack",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--arch",
        "1x4",
        "--seeds",
        "1",
        "--epochs",
        "3",
        "--bound-n",
        "1000",
        "--seed",
        "11",
        "--data-root",
        &root_s,
        "--out",
        out("attack").to_str().unwrap(),
    ]);
    assert_json_report(&out("attack").join("attack.json"));
    assert_csv_report(&out("attack").join("attack.csv"));

    run_ok(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--seed",
        "11",
        "--data-root",
        &root_s,
        "--out",
        out("eval").to_str().unwrap(),
    ]);
    assert_json_report(&out("eval").join("eval.json"));
    assert_csv_report(&out("eval").join("eval.csv"));

    run_ok(&[
        "recourse",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--limit",
        "2",
        "--steps",
        "20",
        "--seed",
        "11",
        "--data-root",
        &root_s,
        "--out",
        out("recourse").to_str().unwrap(),
    ]);
    assert_json_report(&out("recourse").join("recourse.json"));
    assert_csv_report(&out("recourse").join("recourse.csv"));

    // a rerun from the recorded manifest reproduces the checkpoint exactly
    let before = std::fs::read(&checkpoint).unwrap();
    run_ok(&[
        "rerun",
        "--manifest",
        out("train").join("manifest.json").to_str().unwrap(),
    ]);
    let after = std::fs::read(&checkpoint).unwrap();
    assert_eq!(before, after, "rerun changed the checkpoint bytes");
}

#[test]
fn density_fits_are_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("data");
    let root_s = root.to_str().unwrap().to_string();
    run_ok(&[
        "synth",
        "--n-per-group",
        "80",
        "--seed",
        "5",
        "--data-root",
        &root_s,
        "--out",
        tmp.path().join("synth").to_str().unwrap(),
    ]);
    let outs = [tmp.path().join("fit-a"), tmp.path().join("fit-b")];
    for dir in &outs {
        run_ok(&[
            "fit-density",
            "--dataset",
            "synthetic",
            "--seed",
            "5",
            "--data-root",
            &root_s,
            "--out",
            dir.to_str().unwrap(),
        ]);
    }
    let a = std::fs::read(outs[0].join("density.json")).unwrap();
    let b = std::fs::read(outs[1].join("density.json")).unwrap();
    assert_eq!(a, b, "density files differ between identical runs");
}

/// A tiny fully categorical dataset written straight into the cache.
fn write_categorical_cache(root: &Path) -> PathBuf {
    let schema = DatasetSchema {
        dataset: "compas".into(),
        columns: vec![
            ColumnSchema {
                name: "first".into(),
                kind: ColumnKind::Categorical { levels: vec!["a".into(), "b".into()] },
            },
            ColumnSchema {
                name: "second".into(),
                kind: ColumnKind::Binned { edges: vec![0.5, 1.5] },
            },
        ],
        group_rule: "test fixture".into(),
        label_rule: "test fixture".into(),
    };
    let rows = |data: &[[f64; 2]], a: &[u8], y: &[u8], split: Split| {
        let flat: Vec<f64> = data.iter().flatten().copied().collect();
        TabularDataset::new(
            Array2::from_shape_vec((data.len(), 2), flat).unwrap(),
            a.to_vec(),
            y.to_vec(),
            split,
            schema.clone(),
        )
        .unwrap()
    };
    let train = rows(
        &[
            [0.0, 0.0],
            [0.0, 1.0],
            [0.0, 0.0],
            [1.0, 1.0],
            [0.0, 2.0],
            [0.0, 0.0],
            [1.0, 2.0],
            [1.0, 1.0],
            [1.0, 2.0],
            [0.0, 0.0],
            [1.0, 1.0],
            [1.0, 2.0],
        ],
        &[0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1],
        &[0, 0, 0, 1, 1, 0, 1, 1, 1, 0, 0, 1],
        Split::Train,
    );
    let validation = rows(
        &[[0.0, 0.0], [1.0, 2.0], [0.0, 1.0], [1.0, 1.0]],
        &[0, 1, 0, 1],
        &[0, 1, 0, 1],
        Split::Validation,
    );
    let test = rows(
        &[[0.0, 0.0], [1.0, 2.0], [1.0, 0.0], [0.0, 2.0]],
        &[0, 1, 0, 1],
        &[0, 1, 0, 1],
        Split::Test,
    );
    let triple = DatasetTriple::new(train, validation, test).unwrap();
    let dir = root.join("cache/compas");
    write_cache(&dir, &triple).unwrap();
    dir
}

#[test]
fn discrete_matching_runs_on_a_categorical_cache() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("data");
    write_categorical_cache(&root);
    let out_dir = tmp.path().join("match");
    let stdout = run_ok(&[
        "match-discrete",
        "--dataset",
        "compas",
        "--gamma",
        "0.5",
        "--data-root",
        root.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("domain points"), "stdout: {stdout}");
    assert!(out_dir.join("matching.json").exists());
    assert_json_report(&out_dir.join("match.json"));

    // the unconstrained transport can never do worse than the
    // label-preserving one
    let csv = read(&out_dir.join("match.csv"));
    let mut by_gamma = std::collections::BTreeMap::new();
    for line in csv.lines().skip(2) {
        let (g, d) = line.split_once(',').expect("two columns");
        by_gamma.insert(g.to_string(), d.parse::<f64>().unwrap());
    }
    assert!(by_gamma["1"] <= by_gamma["0"] + 1e-12, "distances: {by_gamma:?}");
}
