use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qrank::cli::{cmd_evaluate, RunConfig};
use qrank::synthetic::{write_workspace, SyntheticSpec};

fn qrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrank")).args(args).output().expect("binary runs")
}

fn workspace(dir: &Path) -> String {
    let spec = SyntheticSpec { groups: 60, seed: 21, ..Default::default() };
    write_workspace(dir, &spec, 600).unwrap().to_str().unwrap().to_string()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.clone(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn prepare_is_deterministic_and_keeps_every_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = workspace(tmp.path());
    let inputs = read_dir_bytes(tmp.path());
    let stdout = ok(&qrank(&["prepare", "-c", &cfg]));
    assert!(stdout.contains("train\t600 pairs"), "{stdout}");
    let cache = tmp.path().join("out/cache");
    let first = read_dir_bytes(&cache);
    ok(&qrank(&["prepare", "-c", &cfg]));
    assert_eq!(read_dir_bytes(&cache), first);
    let rows = fs::read_to_string(cache.join("train.features")).unwrap().lines().count();
    assert_eq!(rows, 600);
    // inputs are left alone
    assert_eq!(read_dir_bytes(tmp.path()), inputs);
}

#[test]
fn missing_embeddings_fail_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = workspace(tmp.path());
    let out = qrank(&["prepare", "-c", &cfg, "--set", "embeddings=nowhere.txt"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere.txt"), "{err}");
    assert_eq!(err.lines().count(), 1);
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn train_rank_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = workspace(tmp.path());
    ok(&qrank(&["prepare", "-c", &cfg]));
    ok(&qrank(&["train", "-c", &cfg, "--set", "train.epochs=5"]));
    let ckpt = tmp.path().join("out/model-stl.json");
    let log = fs::read_to_string(tmp.path().join("out/train-stl.log")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 5);

    ok(&qrank(&["rank", "-c", &cfg, "--model", ckpt.to_str().unwrap()]));
    let ranked = fs::read_to_string(tmp.path().join("out/rankings-model-stl-test.tsv")).unwrap();
    assert_eq!(ranked.lines().count(), 120);

    let copy = tmp.path().join("out/copy.json");
    fs::copy(&ckpt, &copy).unwrap();
    let run = RunConfig::load(&cfg, &[]).unwrap();
    let eval = cmd_evaluate(&run, &[ckpt.clone(), copy], &[], "test").unwrap();
    assert_eq!(eval.significance.unwrap().p_value, 1.0);
    assert!(eval.systems[0].report.n_queries_scored <= 12);

    let table = ok(&qrank(&["evaluate", "-c", &cfg, "--baseline", "ir", "--baseline", "random"]));
    assert!(table.contains("ir vs random: p = "), "{table}");
    assert!(tmp.path().join("out/eval-test-ir+random.json").is_file());
}

#[test]
fn changed_feature_options_need_a_new_prepare() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = workspace(tmp.path());
    ok(&qrank(&["prepare", "-c", &cfg]));
    let out = qrank(&["train", "-c", &cfg, "--set", "features.cosine=standard"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rerun `prepare`"));
}

#[test]
fn ablation_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = workspace(tmp.path());
    ok(&qrank(&["prepare", "-c", &cfg]));
    let fast = ["--set", "train.epochs=2", "--set", "seeds=[1,2]"];
    let mut args = vec!["ablate", "-c", &cfg];
    args.extend(fast);
    let table = ok(&qrank(&args));
    assert!(table.contains("mtl-qa MAP"), "{table}");
    let groups = fs::read_to_string(tmp.path().join("out/ablate-groups.tsv")).unwrap();
    let loo = fs::read_to_string(tmp.path().join("out/ablate-loo.tsv")).unwrap();
    assert_eq!(groups.lines().count(), 1 + 6);
    assert_eq!(loo.lines().count(), 1 + 14);
    assert!(groups.lines().next().unwrap().contains("stl_map_mean"));

    let everything = "features.drop=[\"cosine_embedding\",\"cosine_unigram\",\"cosine_trigram\",\"manhattan_embedding\",\"manhattan_unigram\",\"manhattan_trigram\",\"bhattacharya_embedding\",\"bhattacharya_unigram\",\"bhattacharya_trigram\",\"euclidean_embedding\",\"euclidean_unigram\",\"euclidean_trigram\",\"jaccard_unigram\",\"jaccard_trigram\"]";
    let out = qrank(&["ablate", "-c", &cfg, "--set", everything]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn learning_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = workspace(tmp.path());
    ok(&qrank(&["prepare", "-c", &cfg]));
    ok(&qrank(&[
        "curve",
        "-c",
        &cfg,
        "--set",
        "train.epochs=2",
        "--set",
        "seeds=[1,2]",
        "--set",
        "curve.aux_settings=[[\"qa\"]]",
    ]));
    for setting in ["stl", "mtl-qa"] {
        let runs = fs::read_to_string(tmp.path().join(format!("out/curve-{setting}-runs.tsv"))).unwrap();
        assert_eq!(runs.lines().count(), 1 + 10 * 2);
        let summary = fs::read_to_string(tmp.path().join(format!("out/curve-{setting}.tsv"))).unwrap();
        assert_eq!(summary.lines().next(), Some("fraction\tmean_map\tstd_map"));
        assert_eq!(summary.lines().count(), 1 + 10);
    }
}

#[test]
fn gradcheck_exit_status() {
    let pass = qrank(&["gradcheck", "--seed", "3"]);
    assert_eq!(pass.status.code(), Some(0));
    let line = String::from_utf8(pass.stdout.clone()).unwrap();
    assert!(line.trim_end().ends_with("< 1e-4: PASS"), "{line}");
    assert_eq!(qrank(&["gradcheck", "--seed", "3"]).stdout, pass.stdout);
    let fail = qrank(&["gradcheck", "--seed", "3", "--corrupt"]);
    assert_eq!(fail.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&fail.stdout).contains("FAIL"));
}

#[test]
fn usage_errors_are_validation_errors() {
    assert_eq!(qrank(&["bogus"]).status.code(), Some(1));
    assert_eq!(qrank(&["train", "-c", "/does/not/exist.toml"]).status.code(), Some(1));
    assert_eq!(qrank(&["--help"]).status.code(), Some(0));
}
