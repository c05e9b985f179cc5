//! Manifest runner: caching, scoped invalidation, determinism, failure
//! reporting and sweep layouts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use malign::harness::{align_quantized, train_recipe, Recipe};
use malign::manifest::ExperimentManifest;
use malign::report::read_report;
use malign::runner::{config_hash, run_experiment, RunOptions};
use malign::Error;
use malign_core::alignment::AlignmentConfig;
use malign_core::data::{synth_dataset, SynthSpec};
use tempfile::TempDir;

const BASE: &str = r#"
[run]
seeds = [0, 1]

[data]
source = "synth:gauss-blobs,n_train=600,n_test=150"

[train]
epochs = 8

[[models]]
name = "A"
arch = "mlp-S"
seed = 1

[[models]]
name = "B"
arch = "mlp-S"
seed = 2

[[alignments]]
name = "A~B"
source = "A"
witnesses = ["B"]
config = { base_lr = 0.2, epochs = 2, temperature = 4.0 }

[attack]
method = "pgd"
epsilon = "8/255"
alpha = "2/255"
iterations = 5

[eval]
samples = 20
sources = ["A"]
targets = ["B"]

[[analysis]]
kind = "similarity"
alignment = "A~B"
samples = 50

[[analysis]]
kind = "dct"
alignment = "A~B"
samples = 5
"#;

fn run(text: &str, out: &Path) -> malign::Result<malign::runner::RunOutcome> {
    let m = ExperimentManifest::from_toml(text).unwrap();
    run_experiment(
        &m,
        &RunOptions {
            out_dir: Some(out.to_path_buf()),
            workers: Some(2),
        },
    )
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn csvs(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    files(root).into_iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "csv")).collect()
}

#[test]
fn rerun_is_cached_and_byte_identical() {
    let dir = TempDir::new().unwrap();
    let first = run(BASE, dir.path()).unwrap();
    assert!(first.skipped.is_empty());
    assert!(dir.path().join("reports/transfer_matrix.csv").exists());
    assert!(dir.path().join("reports/deltas.csv").exists());
    assert!(dir.path().join("reports/cells/seed0__A__B.json").exists());
    assert!(dir.path().join("perturbations/seed1/A__B__baseline.pert").exists());
    let before = csvs(dir.path());

    let second = run(BASE, dir.path()).unwrap();
    assert!(second.executed.is_empty(), "{:?}", second.executed);
    assert_eq!(second.skipped.len(), first.executed.len());
    assert_eq!(csvs(dir.path()), before);
    assert_eq!(second.transfer, first.transfer);

    // a fresh directory reproduces every CSV byte for byte
    let other = TempDir::new().unwrap();
    run(BASE, other.path()).unwrap();
    assert_eq!(csvs(other.path()), before);
}

#[test]
fn changed_epsilon_reruns_only_attack_dependent_stages() {
    let dir = TempDir::new().unwrap();
    run(BASE, dir.path()).unwrap();
    let changed = BASE.replace("epsilon = \"8/255\"", "epsilon = \"6/255\"");
    let out = run(&changed, dir.path()).unwrap();
    assert!(out.skipped.iter().all(|s| s.starts_with("train/") || s.starts_with("align/")));
    assert_eq!(out.skipped.len(), 4 + 2);
    assert!(out.executed.iter().all(|s| s.starts_with("cell/") || s.starts_with("analysis/")));
    assert!(out.executed.iter().any(|s| s.starts_with("cell/")));
    assert!(out.executed.iter().any(|s| s.starts_with("analysis/")));
}

#[test]
fn output_location_and_workers_do_not_change_results() {
    let m = ExperimentManifest::from_toml(BASE).unwrap();
    let mut moved = m.clone();
    moved.run.out_dir = "elsewhere".into();
    moved.run.workers = Some(7);
    assert_eq!(config_hash(&m).unwrap(), config_hash(&moved).unwrap());
    let mut reseeded = m.clone();
    reseeded.run.seeds = vec![0, 2];
    assert_ne!(config_hash(&m).unwrap(), config_hash(&reseeded).unwrap());

    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let opts = |p: &Path, w| RunOptions {
        out_dir: Some(p.to_path_buf()),
        workers: Some(w),
    };
    run_experiment(&m, &opts(a.path(), 1)).unwrap();
    run_experiment(&m, &opts(b.path(), 3)).unwrap();
    assert_eq!(csvs(a.path()), csvs(b.path()));
}

#[test]
fn no_analyses_still_evaluates() {
    let dir = TempDir::new().unwrap();
    let text = BASE.split("[[analysis]]").next().unwrap();
    let out = run(text, dir.path()).unwrap();
    assert!(out.analyses.is_empty());
    assert!(!dir.path().join("reports/analysis").exists());
    let deltas = read_report(&dir.path().join("reports/deltas.csv")).unwrap();
    assert_eq!(deltas.rows.len(), 1);
    let c = |n: &str| deltas.column(n).unwrap();
    let r = &deltas.rows[0];
    let v = |n: &str| r[c(n)].parse::<f64>().unwrap();
    assert_eq!(v("delta"), v("rate") - v("baseline"));
}

#[test]
fn failing_stage_is_named_and_earlier_outputs_kept() {
    let dir = TempDir::new().unwrap();
    // two epochs on 60 samples leave no jointly-correct pool sample
    let text = BASE
        .replace("n_train=600,n_test=150", "n_train=60,n_test=10")
        .replace("epochs = 8", "epochs = 1");
    let err = run(&text, dir.path()).unwrap_err();
    let Error::Stage { stage, .. } = &err else {
        panic!("expected a stage error, got {err}");
    };
    assert!(stage.starts_with("cell/"), "{stage}");
    assert!(dir.path().join("checkpoints/seed0/A.ckpt").exists());
    assert!(dir.path().join("checkpoints/seed0/A~B.ckpt").exists());
}

#[test]
fn sweep_layouts() {
    let sweep = |axis: &str, values: &str| {
        format!(
            "{}\n[sweep]\naxis = \"{axis}\"\nvalues = {values}\nsource = \"A\"\ntargets = [\"B\"]\nwitness = \"B\"\nconfig = {{ base_lr = 0.2, epochs = 2, temperature = 4.0 }}\n",
            BASE.split("[[analysis]]").next().unwrap()
        )
    };

    let dir = TempDir::new().unwrap();
    run(&sweep("distance", "[\"kl\", \"tv\"]"), dir.path()).unwrap();
    let r = read_report(&dir.path().join("reports/sweep.csv")).unwrap();
    let var = r.column("variant").unwrap();
    let value = r.column("value").unwrap();
    let baselines: Vec<_> = r.rows.iter().filter(|row| row[var] == "n/a").collect();
    let aligned: Vec<_> = r.rows.iter().filter(|row| row[var] != "n/a").collect();
    assert_eq!(aligned.len(), 2);
    assert_eq!(aligned[0][value], "kl");
    assert_eq!(aligned[1][value], "tv");
    // both rows are measured against one baseline
    let mean = r.column("mean").unwrap();
    assert!(baselines.windows(2).all(|w| w[0][mean] == w[1][mean]));

    let dir = TempDir::new().unwrap();
    run(&sweep("witness-capacity", "[\"mlp-S\", \"mlp-M\"]"), dir.path()).unwrap();
    let r = read_report(&dir.path().join("reports/sweep.csv")).unwrap();
    let wp = r.column("witness_params").unwrap();
    let params: Vec<&str> = r.rows.iter().map(|row| row[wp].as_str()).collect();
    assert!(params.contains(&"8554"), "{params:?}");
    assert!(params.iter().all(|p| !p.is_empty()));
}

#[test]
fn identical_witnesses_average_out() {
    let (train_d, _) = synth_dataset(&SynthSpec {
        n_train: 200,
        n_test: 10,
        ..SynthSpec::bundled_ten_class(3)
    })
    .unwrap();
    let cfg = malign_core::train::TrainConfig { epochs: 2, ..Default::default() };
    let recipe = |name: &str, seed| Recipe {
        name: name.into(),
        arch: "mlp-S".into(),
        seed,
    };
    let s = train_recipe(&recipe("S", 1), &train_d, &cfg, 0).unwrap();
    let w = train_recipe(&recipe("W", 2), &train_d, &cfg, 0).unwrap();
    let acfg = AlignmentConfig {
        base_lr: 0.1,
        ..AlignmentConfig::default()
    };
    let one = align_quantized(&s, &[w.clone()], &acfg, &train_d).unwrap();
    for k in [2, 4] {
        let many = align_quantized(&s, &vec![w.clone(); k], &acfg, &train_d).unwrap();
        assert_eq!(many.model, one.model);
        assert_eq!(many.history, one.history);
    }
}

#[test]
fn learning_rate_sweep_keeps_the_best_validated_rate() {
    let text = BASE
        .replace(
            "config = { base_lr = 0.2, epochs = 2, temperature = 4.0 }",
            "config = { epochs = 2, temperature = 4.0 }\nlr_sweep = { rates = [0.2, 0.0001], validation_target = \"C\" }",
        )
        .replace("[[alignments]]", "[[models]]\nname = \"C\"\narch = \"mlp-S\"\nseed = 3\n\n[[alignments]]");
    let dir = TempDir::new().unwrap();
    let first = run(&text, dir.path()).unwrap();
    assert!(first.executed.iter().any(|s| s == "align/seed0/A~B/lr1"));
    let r = read_report(&dir.path().join("reports/lr_sweep.csv")).unwrap();
    assert_eq!(r.rows.len(), 2 * 2);
    let col = |n: &str| r.column(n).unwrap();
    let mean = |row: &Vec<String>| row[col("mean_delta")].parse::<f64>().unwrap();
    let chosen: Vec<_> = r.rows.iter().filter(|row| row[col("selected")] == "true").collect();
    assert_eq!(chosen.len(), 2);
    assert!(r.rows.iter().all(|row| mean(row) <= mean(chosen[0])));
    let rate = chosen[0][col("rate")].as_str();
    let i = if rate == "0.2" { 0 } else { 1 };
    for s in [0, 1] {
        let ck = |n: &str| fs::read(dir.path().join(format!("checkpoints/seed{s}/{n}.ckpt"))).unwrap();
        assert_eq!(ck("A~B"), ck(&format!("A~B@lr{i}")));
    }
    let before = csvs(dir.path());
    let again = run(&text, dir.path()).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(csvs(dir.path()), before);

    // the validation target must stay out of the evaluated targets
    let leaked = text.replace("targets = [\"B\"]", "targets = [\"B\", \"C\"]");
    let m = ExperimentManifest::from_toml(&leaked);
    assert!(m.is_err() || m.unwrap().validate().is_err());
}
