//! Acceptance checks, one PASS/FAIL/SKIP line each. The real-data check runs
//! only when `QRANK_SEMEVAL_CONFIG` names a run config over the SemEval-2016
//! question-question data (train/test plus QA) and an embedding table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qrank::cli::{cmd_evaluate, cmd_gradcheck, cmd_prepare, cmd_train, Baseline, RunConfig};
use qrank::corpus::{Label, TaskId};
use qrank::distances::{bhattacharya, euclidean, jaccard, manhattan, FeatureMask, NUM_FEATURES};
use qrank::evaluation::{evaluate, paired_randomization_test};
use qrank::neuralnet::{init_model, Matrix};
use qrank::ranker::{Provenance, RankedEntry, RankedList};
use qrank::synthetic::{write_workspace, SyntheticSpec};
use qrank::training::{load_checkpoint, save_checkpoint, train, Example, TaskStream};
use qrank::FeatureVector;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

const X1: [f64; 10] = [1., 1., 0., 0., 1., 0., 1., 1., 0., 1.];
const Y1: [f64; 10] = [0., 0., 1., 0., 1., 0., 0., 0., 1., 1.];
const X2: [f64; 10] = [0., 0., 0., 0., 0., 1., 0., 0., 1., 1.];
const Y2: [f64; 10] = [1., 1., 1., 1., 0., 0., 0., 0., 0., 1.];

fn distance_fidelity() -> Verdict {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let m = [manhattan(&X1, &Y1).unwrap(), manhattan(&X2, &Y2).unwrap()];
    let e = [euclidean(&X1, &Y1).unwrap(), euclidean(&X2, &Y2).unwrap()];
    let b = [bhattacharya(&X1, &Y1).unwrap(), bhattacharya(&X2, &Y2).unwrap()];
    let j = [jaccard(&X1, &Y1).unwrap(), jaccard(&X2, &Y2).unwrap()];
    let ok = m.iter().all(|&v| close(v, 6.0))
        && e.iter().all(|&v| close(v, 6f64.sqrt()))
        && close(b[0], -(2f64.ln()))
        && close(b[1], 0.0)
        && close(j[0], 0.2)
        && close(j[1], 0.1);
    check(ok, format!("manhattan {m:?}, euclidean {e:?}, bhattacharya {b:?}, jaccard {j:?}"))
}

fn binary_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut root_exact, mut within_ulp, mut literal) = (0, 0, 0);
    let n = 1000;
    for _ in 0..n {
        let dims = rng.gen_range(1..=200);
        let x: Vec<f64> = (0..dims).map(|_| rng.gen_range(0..2) as f64).collect();
        let y: Vec<f64> = (0..dims).map(|_| rng.gen_range(0..2) as f64).collect();
        let (e, m) = (euclidean(&x, &y).unwrap(), manhattan(&x, &y).unwrap());
        root_exact += (e == m.sqrt()) as usize;
        let sq = e * e;
        within_ulp += ((sq - m).abs() <= f64::EPSILON * m) as usize;
        literal += (sq == m) as usize;
    }
    // Squaring a correctly rounded square root need not give back the integer
    // (sqrt(2)^2 != 2 in binary64), so exactness is checked on the root.
    check(
        root_exact == n && within_ulp == n,
        format!(
            "{n} pairs: euclidean == sqrt(manhattan) bitwise in {root_exact}, euclidean^2 within 1 ulp in {within_ulp}, bitwise equal after squaring in {literal}"
        ),
    )
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let out = cmd_gradcheck(0, 20, false).unwrap();
    let secs = start.elapsed().as_secs_f64();
    check(out.passed && secs < 30.0, format!("{} over {} instances in {secs:.2}s", out.line(), out.instances))
}

/// Scores computed directly from the definitions: precision at each relevant
/// position in the top 10, first relevant position, recall at each cutoff.
fn oracle_metrics(lists: &[Vec<bool>]) -> (f64, f64, f64) {
    let (mut ap, mut rr, mut rec, mut n) = (0.0, 0.0, 0.0, 0.0);
    for rel in lists {
        let total = rel.iter().filter(|r| **r).count();
        if total == 0 {
            continue;
        }
        n += 1.0;
        let mut hits = 0;
        let mut prec_sum = 0.0;
        for k in 1..=10 {
            if k <= rel.len() && rel[k - 1] {
                hits += 1;
                prec_sum += hits as f64 / k as f64;
            }
        }
        ap += prec_sum / total.min(10) as f64;
        rr += rel.iter().take(10).position(|r| *r).map_or(0.0, |p| 1.0 / (p + 1) as f64);
        rec += (1..=10)
            .map(|k| rel.iter().take(k).filter(|r| **r).count() as f64 / total as f64)
            .sum::<f64>()
            / 10.0;
    }
    if n == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    (100.0 * ap / n, 100.0 * rr / n, 100.0 * rec / n)
}

fn ranked(id: String, rel: &[bool]) -> RankedList {
    RankedList {
        entries: rel
            .iter()
            .enumerate()
            .map(|(i, &g)| RankedEntry {
                pair_id: format!("{id}_{i}"),
                score: 1.0 / (i + 1) as f64,
                gold_relevant: g,
                orig_rank: i as u32 + 1,
                predicted_relevant: None,
            })
            .collect(),
        group_id: id,
        provenance: Provenance::IrOrder,
    }
}

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for instance in 0..200 {
        let groups = rng.gen_range(1..=30);
        let rels: Vec<Vec<bool>> = (0..groups)
            .map(|_| {
                let len = rng.gen_range(1..=25);
                let rate = rng.gen_range(0.0..0.8);
                (0..len).map(|_| rng.gen_bool(rate)).collect()
            })
            .collect();
        let lists: Vec<RankedList> = rels.iter().enumerate().map(|(g, r)| ranked(format!("I{instance}G{g}"), r)).collect();
        let report = evaluate(&lists).unwrap();
        let (map, mrr, rec) = oracle_metrics(&rels);
        worst = worst
            .max((report.map_score - map).abs())
            .max((report.mrr - mrr).abs())
            .max((report.avg_rec - rec).abs());
    }
    check(worst <= 1e-9, format!("max deviation from direct computation over 200 instances: {worst:.3e}"))
}

fn qrank(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qrank")).args(args).output().expect("binary runs")
}

fn determinism(dir: &Path) -> Verdict {
    let spec = SyntheticSpec { groups: 150, seed: 5, ..Default::default() };
    let config = write_workspace(dir, &spec, 1500).unwrap();
    let cfg = config.to_str().unwrap();
    let run = |out: &str| -> (Vec<u8>, String) {
        let set = format!("output_dir={out}");
        for cmd in ["prepare", "train"] {
            let o = qrank(&[cmd, "-c", cfg, "--set", &set, "--set", "train.aux=[\"qa\"]"]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        }
        let ckpt = dir.join(out).join("model-mtl-qa.json");
        let o = qrank(&["evaluate", "-c", cfg, "--set", &set, "--model", ckpt.to_str().unwrap(), "--split", "test"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let report = std::fs::read_to_string(dir.join(out).join("eval-test-model-mtl-qa.json")).unwrap();
        (std::fs::read(ckpt).unwrap(), report)
    };
    let (a, ra) = run("run-a");
    let (b, rb) = run("run-b");
    check(
        a == b && ra == rb,
        format!("checkpoints {} bytes, identical: {}; reports identical: {}", a.len(), a == b, ra == rb),
    )
}

/// Expected MAP of a uniformly random ordering, by sampling permutations.
fn monte_carlo_random_map(groups: &[Vec<bool>], draws: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let scored: Vec<&Vec<bool>> = groups.iter().filter(|g| g.iter().any(|r| *r)).collect();
    let mut total = 0.0;
    for g in &scored {
        let mut perm = (*g).clone();
        let mut sum = 0.0;
        for _ in 0..draws {
            perm.shuffle(&mut rng);
            sum += oracle_metrics(std::slice::from_ref(&perm)).0;
        }
        total += sum / draws as f64;
    }
    total / scored.len() as f64
}

fn synthetic_end_to_end(dir: &Path) -> Verdict {
    let start = Instant::now();
    let spec = SyntheticSpec { groups: 500, candidates_per_group: 10, seed: 6, ..Default::default() };
    let config = write_workspace(dir, &spec, 5000).unwrap();
    let cfg = RunConfig::load(&config, &[]).unwrap();
    cmd_prepare(&cfg).unwrap();
    let ckpt = cmd_train(&cfg).unwrap();
    let model = cmd_evaluate(&cfg, &[ckpt], &[], "test").unwrap().systems[0].report.clone();
    let random = cmd_evaluate(&cfg, &[], &[Baseline::Random], "test").unwrap().systems[0].report.clone();

    let test = qrank::corpus::load_pairs(dir.join("test.jsonl"), TaskId::Qq).unwrap();
    let groups: Vec<Vec<bool>> = qrank::corpus::group_records(&test)
        .unwrap()
        .iter()
        .map(|g| g.candidates.iter().map(|c| c.gold_relevant).collect())
        .collect();
    let expected = monte_carlo_random_map(&groups, 4000);
    let secs = start.elapsed().as_secs_f64();
    check(
        model.map_score >= 95.0 && (random.map_score - expected).abs() <= 3.0,
        format!(
            "STL MAP {:.2} on {} held-out groups; random MAP {:.2} vs Monte-Carlo expectation {:.2}; {secs:.1}s",
            model.map_score, model.n_groups, random.map_score, expected
        ),
    )
}

fn significance() -> Verdict {
    let a: BTreeMap<String, f64> = (0..50).map(|i| (format!("q{i}"), (i % 7) as f64 / 10.0)).collect();
    let shifted: BTreeMap<String, f64> = a.iter().map(|(k, v)| (k.clone(), v + 0.5)).collect();
    let same = paired_randomization_test(&a, &a, 10_000, 1).unwrap();
    let shift = paired_randomization_test(&shifted, &a, 10_000, 1).unwrap();
    check(same == 1.0 && shift <= 0.001, format!("identical p = {same}, shift of 0.5 p = {shift:.6}"))
}

fn checkpoint_round_trip(dir: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let examples: Vec<Example> = (0..300)
        .map(|i| {
            let y = i % 2;
            let mut values = [0.0; NUM_FEATURES];
            for v in &mut values {
                *v = y as f64 + rng.gen_range(-0.5..0.5);
            }
            Example { features: FeatureVector { values, mask: FeatureMask::all() }, label: Label::new(y, 2).unwrap() }
        })
        .collect();
    let stream = TaskStream::new(TaskId::Qq, examples, 0).unwrap();
    let config = qrank::TrainConfig { epochs: 5, ..Default::default() };
    let trained = train(&config, &stream, &[]).unwrap();
    let path = dir.join("ckpt.json");
    save_checkpoint(&trained, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let probe: Vec<Vec<f64>> = (0..32).map(|_| (0..NUM_FEATURES).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let probe = Matrix::from_rows(&probe).unwrap();
    let before = trained.model.predict(&probe, TaskId::Qq).unwrap();
    let after = loaded.model.predict(&probe, TaskId::Qq).unwrap();
    let untrained = init_model(&config, &BTreeMap::from([(TaskId::Qq, 2)])).unwrap();
    check(
        before.as_slice() == after.as_slice() && loaded == trained && untrained != trained.model,
        format!("probe outputs identical: {}; model equal: {}", before.as_slice() == after.as_slice(), loaded == trained),
    )
}

fn real_data() -> Verdict {
    let Some(config) = std::env::var_os("QRANK_SEMEVAL_CONFIG").map(PathBuf::from) else {
        return Verdict::Skip("set QRANK_SEMEVAL_CONFIG to a run config over SemEval-2016 data".into());
    };
    let base = RunConfig::load(&config, &[]).unwrap();
    cmd_prepare(&base).unwrap();
    let ir = cmd_evaluate(&base, &[], &[Baseline::Ir], "test").unwrap().systems[0].report.map_score;
    let mut rcfg = base.clone();
    rcfg.random_baseline_seeds = rcfg.random_baseline_seeds.max(50);
    let random = cmd_evaluate(&rcfg, &[], &[Baseline::Random], "test").unwrap().systems[0].report.map_score;
    let mean_map = |aux: Vec<TaskId>| -> f64 {
        let seeds = [1u64, 2, 3, 4, 5];
        seeds
            .iter()
            .map(|&seed| {
                let mut cfg = base.clone();
                cfg.train.seed = seed;
                cfg.train.aux = aux.clone();
                let ckpt = cmd_train(&cfg).unwrap();
                cmd_evaluate(&cfg, &[ckpt], &[], "test").unwrap().systems[0].report.map_score
            })
            .sum::<f64>()
            / seeds.len() as f64
    };
    let stl = mean_map(Vec::new());
    let mtl = mean_map(vec![TaskId::Qa]);
    check(
        (ir - 74.75).abs() <= 0.01 && (random - 46.98).abs() <= 2.0 && (72.0..=79.0).contains(&stl) && mtl >= stl,
        format!("IR {ir:.2}, random {random:.2}, STL {stl:.2}, MTL(QA) {mtl:.2}"),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Verdict>)> = vec![
        ("1 distance fidelity", Box::new(distance_fidelity)),
        ("2 binary identity", Box::new(binary_identity)),
        ("3 gradient check", Box::new(gradient_check)),
        ("4 metric oracle equivalence", Box::new(metric_oracle)),
        ("5 determinism", Box::new(|| determinism(&tmp.path().join("det")))),
        ("6 synthetic end-to-end", Box::new(|| synthetic_end_to_end(&tmp.path().join("e2e")))),
        ("7 significance sanity", Box::new(significance)),
        ("8 SemEval-2016 reproduction", Box::new(real_data)),
        ("9 checkpoint round-trip", Box::new(|| checkpoint_round_trip(tmp.path()))),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let (tag, detail) = match run() {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {name}: {tag} ({detail})");
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
