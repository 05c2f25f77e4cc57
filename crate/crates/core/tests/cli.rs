//! Exit codes and outputs of the command-line front end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use esol::Error;

const TINY: &str = "widths = 4,8,8\nfeature_dim = 8\nbaseline_iterations = 3\nexpansion_iterations = 2\nshrinkage_iterations = 2\nbatch_size = 4\nscales = 1\n";

fn esol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esol")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str) -> Output {
    esol(&["gen-data", "--out", p(dir), "--count", "12", "--eval-count", "4", "--seed", seed])
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&esol(&[])), 2);
    assert_eq!(code(&esol(&["frobnicate"])), 2);
    assert_eq!(code(&esol(&["gen-data", "--count", "x", "--out", "d"])), 2);
}

#[test]
fn config_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "0")), 0);
    let conf = tmp.path().join("bad.conf");
    fs::write(&conf, "alpah = 0.1\n").unwrap();
    let out = esol(&["train-baseline", "--data", p(&data), "--config", p(&conf), "--out", p(&tmp.path().join("ck"))]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));

    let out = esol(&["gen-data", "--out", p(&tmp.path().join("x")), "--count", "0"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn missing_or_mismatched_inputs_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    fs::write(&conf, TINY).unwrap();
    let out = esol(&["train-baseline", "--data", p(&tmp.path().join("nope")), "--config", p(&conf), "--out", p(&tmp.path().join("ck"))]);
    assert_eq!(code(&out), 4);

    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "0")), 0);
    let ck = tmp.path().join("ck");
    assert_eq!(code(&esol(&["train-baseline", "--data", p(&data), "--config", p(&conf), "--out", p(&ck)])), 0);
    // a baseline checkpoint cannot be evaluated as a shrinkage one
    let out = esol(&["eval", "--data", p(&data), "--ckpt", p(&ck), "--stage", "shrinkage", "--out", p(&tmp.path().join("e.csv"))]);
    assert_eq!(code(&out), 4);
    // nor used to initialize Shrinkage
    let out = esol(&["train-shrinkage", "--data", p(&data), "--config", p(&conf), "--init", p(&ck), "--out", p(&tmp.path().join("s"))]);
    assert_eq!(code(&out), 4);
}

#[test]
fn divergence_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "1")), 0);
    let conf = tmp.path().join("hot.conf");
    fs::write(&conf, format!("{TINY}baseline_lr = 1e30\nbaseline_iterations = 20\n").replace("baseline_iterations = 3\n", "")).unwrap();
    let out = esol(&["train-baseline", "--data", p(&data), "--config", p(&conf), "--out", p(&tmp.path().join("ck"))]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
}

#[test]
fn error_kinds_map_to_documented_codes() {
    assert_eq!(Error::Config(String::new()).exit_code(), 3);
    assert_eq!(Error::Data(String::new()).exit_code(), 4);
    assert_eq!(Error::Load(String::new()).exit_code(), 4);
    assert_eq!(
        Error::Divergence {
            iteration: 0,
            reason: String::new()
        }
        .exit_code(),
        5
    );
    assert_eq!(Error::Contract(String::new()).exit_code(), 6);
    assert_eq!(
        Error::FrozenDrift {
            name: String::new(),
            iteration: 0
        }
        .exit_code(),
        6
    );
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&gen(&a, "9")), 0);
    assert_eq!(code(&gen(&b, "9")), 0);
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.csv")).unwrap());
    for line in manifest.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        for file in [f[3], f[4]] {
            assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
        }
    }
}

#[test]
fn full_run_prints_config_and_stage_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = dir.join("data");
    let conf = dir.join("run.conf");
    fs::write(&conf, TINY).unwrap();
    assert_eq!(code(&gen(&data, "2")), 0);
    let run = |args: &[&str]| {
        let out = esol(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let (b, e, s) = (dir.join("b"), dir.join("e"), dir.join("s"));
    let stdout = run(&["train-baseline", "--data", p(&data), "--config", p(&conf), "--out", p(&b)]);
    assert!(stdout.contains("# feature_dim = 8"));
    assert!(stdout.contains("# alpha = 0.01"));
    assert!(b.join("train_log.csv").exists());
    run(&["train-expansion", "--data", p(&data), "--config", p(&conf), "--init", p(&b), "--out", p(&e)]);
    run(&["train-shrinkage", "--data", p(&data), "--config", p(&conf), "--init", p(&e), "--out", p(&s)]);
    let table = dir.join("s.csv");
    let stdout = run(&["eval", "--data", p(&data), "--ckpt", p(&s), "--stage", "shrinkage", "--out", p(&table), "--config", p(&conf)]);
    assert!(stdout.contains("shrinkage,"));
    assert_eq!(fs::read_to_string(&table).unwrap().lines().count(), 2);
    let sweep = dir.join("sweep.csv");
    run(&["eval", "--sweep", "--data", p(&data), "--ckpt", p(&s), "--stage", "shrinkage", "--out", p(&sweep), "--config", p(&conf)]);
    let text = fs::read_to_string(&sweep).unwrap();
    assert!(text.starts_with("tau,precision,recall,f1,miou\n"));
    assert_eq!(text.lines().count(), 20);

    let maps = dir.join("maps");
    run(&["export-cam", "--data", p(&data), "--ckpt", p(&s), "--ids", "12,13", "--out", p(&maps), "--config", p(&conf)]);
    let ppm = fs::read(maps.join("000012_seed.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
    assert!(fs::read_dir(&maps).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "pgm")));

    let out = dir.join("ablate.csv");
    let stdout = run(&["ablate", "--axis", "beta", "--values", "0.15,1", "--config", p(&conf), "--out", p(&out)]);
    assert!(stdout.contains("# beta = 0.15"));
    let rows = fs::read_to_string(&out).unwrap();
    assert!(rows.starts_with("axis,value,seed_miou,precision,recall,f1\n"));
    assert_eq!(rows.lines().count(), 3);
}
