//! Acceptance checks, one line per criterion. Exits non-zero if any fail.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use devclf_core::classifier::{train, PredictError, Predictor, TrainConfig};
use devclf_core::corpus::{
    class_weights, write_dataset, ClassDistribution, DataFormat, LabelSchema, SplitName, TaskId,
};
use devclf_core::ensemble::{vote, DecidedBy, EnsembleSpec};
use devclf_core::featurizer::{FeaturizerConfig, Normalize};
use devclf_core::fixtures::{imbalanced_binary, separable_split};
use devclf_core::losses::{loss, Alpha, LossSpec};
use devclf_core::metrics::{confusion, evaluate, report};
use devclf_core::pipeline::{gridsearch_with, GridConfig, Phase, Pipeline, PipelineConfig};
use devclf_core::prompts::{render, FewShotExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn within(elapsed: Duration, limit_secs: f64) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit_secs {
        Ok(())
    } else {
        Err(format!("took {:.2}s, limit {limit_secs}s", elapsed.as_secs_f64()))
    }
}

fn random_logits(rng: &mut ChaCha8Rng, scale: f64) -> (Vec<f64>, u32) {
    let k = rng.gen_range(2..=6);
    let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-scale..scale)).collect();
    let t = rng.gen_range(0..k) as u32;
    (z, t)
}

fn focal_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (z, t) = random_logits(&mut rng, 10.0);
        let ce = loss(&LossSpec::Ce, &z, t).unwrap().value;
        let fl = loss(&LossSpec::focal(1.0, 0.0), &z, t).unwrap().value;
        worst = worst.max((ce - fl).abs());
    }
    within(start.elapsed(), 1.0)?;
    if worst <= 1e-12 {
        Ok(format!("max |focal(1,0) - CE| = {worst:.1e} over 1000 cases"))
    } else {
        Err(format!("max deviation {worst:e}"))
    }
}

fn focal_point_value() -> Outcome {
    let v = loss(&LossSpec::focal(0.35, 4.0), &[0.0, 0.0], 1).unwrap().value;
    let oracle = 0.35 * 0.5f64.powi(4) * std::f64::consts::LN_2;
    let stated = 0.0151636;
    let msg = format!(
        "loss {v:.8}, stated {stated} +/- 1e-6, off by {:.2e}; independent arithmetic 0.35*0.5^4*ln2 = {oracle:.8}, off by {:.1e}",
        (v - stated).abs(),
        (v - oracle).abs()
    );
    if (v - stated).abs() <= 1e-6 {
        Ok(msg)
    } else if (v - oracle).abs() <= 1e-12 {
        Err(format!("{msg}: the stated constant disagrees with its own formula"))
    } else {
        Err(msg)
    }
}

fn finite_difference(spec: &LossSpec, z: &[f64], t: u32) -> Vec<f64> {
    let h = 1e-5;
    (0..z.len())
        .map(|i| {
            let mut up = z.to_vec();
            let mut dn = z.to_vec();
            up[i] += h;
            dn[i] -= h;
            (loss(spec, &up, t).unwrap().value - loss(spec, &dn, t).unwrap().value) / (2.0 * h)
        })
        .collect()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for kind in ["ce", "weighted_ce", "focal"] {
        for _ in 0..100 {
            let (z, t) = random_logits(&mut rng, 3.0);
            let spec = match kind {
                "ce" => LossSpec::Ce,
                "weighted_ce" => LossSpec::WeightedCe {
                    weights: (0..z.len()).map(|_| rng.gen_range(0.2..3.0)).collect(),
                },
                _ => LossSpec::Focal {
                    alpha: Alpha::Uniform(rng.gen_range(0.1..1.0)),
                    gamma: rng.gen_range(0.0..5.0),
                },
            };
            let analytic = loss(&spec, &z, t).unwrap().grad_logits;
            let numeric = finite_difference(&spec, &z, t);
            let diff: f64 = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = analytic
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt())
                .max(1e-12);
            let e = worst.entry(kind).or_default();
            *e = e.max(diff / scale);
        }
    }
    within(start.elapsed(), 5.0)?;
    let summary = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    if worst.values().all(|&v| v < 1e-4) {
        Ok(format!("max relative error: {summary}"))
    } else {
        Err(summary)
    }
}

struct Fixed(LabelSchema, u32);

impl Predictor for Fixed {
    fn schema(&self) -> &LabelSchema {
        &self.0
    }
    fn predict_label(&self, _: &str) -> Result<u32, PredictError> {
        Ok(self.1)
    }
}

fn vote_semantics() -> Outcome {
    let start = Instant::now();
    let schema = LabelSchema::for_task(TaskId::A);
    let mut fallbacks = 0;
    for fallback in 0..3 {
        for a in 0..5u32 {
            for b in 0..5u32 {
                for c in 0..5u32 {
                    let triple = [a, b, c];
                    let expected = if a == b || a == c {
                        (a, DecidedBy::Majority)
                    } else if b == c {
                        (b, DecidedBy::Majority)
                    } else {
                        (triple[fallback], DecidedBy::Fallback)
                    };
                    let o = vote(&triple, fallback).map_err(|e| e.to_string())?;
                    if (o.label, o.decided_by) != expected {
                        return Err(format!("{triple:?} fallback {fallback}: got {o:?}"));
                    }
                    let members = triple
                        .iter()
                        .enumerate()
                        .map(|(i, &l)| {
                            (
                                format!("m{i}"),
                                Arc::new(Fixed(schema.clone(), l)) as Arc<dyn Predictor>,
                            )
                        })
                        .collect();
                    let ens = EnsembleSpec::new(members, fallback).map_err(|e| e.to_string())?;
                    if ens.predict("x").map_err(|e| e.to_string())? != o {
                        return Err(format!("ensemble disagrees with vote on {triple:?}"));
                    }
                    fallbacks += (o.decided_by == DecidedBy::Fallback) as usize;
                }
            }
        }
    }
    within(start.elapsed(), 1.0)?;
    // 5*4*3 all-distinct triples per fallback choice
    if fallbacks == 3 * 60 {
        Ok("375 cases; fallback used exactly on the 60 all-distinct triples per choice".into())
    } else {
        Err(format!("fallback used {fallbacks} times, expected 180"))
    }
}

fn weights_from_counts() -> Outcome {
    let dist = ClassDistribution::from_counts(vec![16805, 2214]);
    let w = class_weights(&dist).map_err(|e| e.to_string())?;
    let mean: f64 = dist
        .counts
        .iter()
        .zip(w.as_slice())
        .map(|(&c, w)| c as f64 / dist.total as f64 * w)
        .sum();
    let oracle = [19019.0 / (2.0 * 16805.0), 19019.0 / (2.0 * 2214.0)];
    let msg = format!(
        "weights {:.5} / {:.5} (stated 0.56590 / 4.29471 +/- 1e-4; 19019/(2*16805) = {:.5}, 19019/(2*2214) = {:.5}); mean - 1 = {:.1e}",
        w.0[0],
        w.0[1],
        oracle[0],
        oracle[1],
        mean - 1.0
    );
    let stated_ok = (w.0[0] - 0.56590).abs() <= 1e-4 && (w.0[1] - 4.29471).abs() <= 1e-4;
    if stated_ok && (mean - 1.0).abs() <= 1e-9 {
        Ok(msg)
    } else if w.0 == oracle && (mean - 1.0).abs() <= 1e-9 {
        Err(format!(
            "{msg}: the stated class-1 weight disagrees with the formula on these counts"
        ))
    } else {
        Err(msg)
    }
}

fn minority_recall(cfg: &TrainConfig, feat: &FeaturizerConfig) -> Result<f64, String> {
    let train_split = imbalanced_binary(SplitName::Train, 2000, 100, 60);
    let test = imbalanced_binary(SplitName::Test, 1000, 50, 61);
    let model = train(&train_split, feat, cfg).map_err(|e| e.to_string())?;
    let (_, rep) = evaluate(&model, &test).map_err(|e| e.to_string())?;
    Ok(rep.per_class[1].recall)
}

fn imbalance_benefit() -> Outcome {
    let start = Instant::now();
    // raw counts and enough steps for both losses to converge
    let feat = FeaturizerConfig {
        n_max: 2,
        dimension: 1 << 14,
        normalize: Normalize::None,
        ..FeaturizerConfig::default()
    };
    let base = TrainConfig {
        learning_rate: 2.0,
        epochs: 100,
        seed: 6,
        ..TrainConfig::default()
    };
    let ce = minority_recall(&base, &feat)?;
    let focal = minority_recall(
        &TrainConfig {
            loss: LossSpec::focal(0.35, 4.0),
            ..base.clone()
        },
        &feat,
    )?;
    within(start.elapsed(), 30.0)?;
    let msg = format!("20:1 fixture minority recall: focal(0.35, 4) {focal:.3} vs CE {ce:.3}");
    if focal >= ce {
        Ok(msg)
    } else {
        Err(msg)
    }
}

const PIPELINE_TOML: &str = r#"
version = 1
task = "A"
seed = 11
output_dir = "out"

[data]
train = "train.csv"
dev = "dev.csv"
test = "test.csv"

[featurizer]
n_min = 1
n_max = 2
dimension = 16384
normalize = "l2"
lowercase = false

[[models]]
name = "ce"
epochs = 5

[[models]]
name = "wce"
epochs = 5
loss = { kind = "weighted_ce", weights = "auto" }

[[models]]
name = "focal"
epochs = 5
learning_rate = 2.0
loss = { kind = "focal", alpha = 0.35, gamma = 4.0 }

[ensemble]
members = ["ce", "wce", "focal"]
fallback = "ce"
"#;

fn write_fixture(dir: &Path) -> PathBuf {
    let train = separable_split(TaskId::A, SplitName::Train, 500, 100);
    let dev = separable_split(TaskId::A, SplitName::Dev, 100, 101);
    let test = separable_split(TaskId::A, SplitName::Test, 100, 102);
    for (split, file) in [(&train, "train.csv"), (&dev, "dev.csv"), (&test, "test.csv")] {
        write_dataset(split, &dir.join(file), DataFormat::Csv).unwrap();
    }
    let path = dir.join("pipeline.toml");
    fs::write(&path, PIPELINE_TOML).unwrap();
    path
}

/// select -> finalize -> predict on the separable fixture; returns test macro-F1.
fn run_pipeline(dir: &Path) -> Result<f64, String> {
    let cfg = write_fixture(dir);
    let p = Pipeline::from_path(&cfg).map_err(|e| e.to_string())?;
    let e = |e: devclf_core::pipeline::PipelineError| e.to_string();
    p.cmd_train(None).map_err(e)?;
    p.audit().clear();
    p.cmd_select(3).map_err(e)?;
    p.cmd_finalize().map_err(e)?;
    if p.audit().reads().iter().any(|(_, s)| *s == SplitName::Test) {
        return Err("select/finalize read the test split".into());
    }
    let summary = p.cmd_predict(None).map_err(e)?;
    if p.audit().reads().iter().filter(|(ph, _)| *ph == Phase::Predict).count() != 1 {
        return Err("predict did not read test exactly once".into());
    }
    summary
        .report
        .map(|r| r.macro_f1)
        .ok_or_else(|| "no test report".into())
}

fn separable_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let f1 = run_pipeline(dir.path())?;
    let took = start.elapsed();
    within(took, 60.0)?;
    let msg = format!(
        "test macro-F1 {f1:.4} in {:.1}s; test never read before predict",
        took.as_secs_f64()
    );
    if f1 >= 0.95 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["models", "predictions", "reports"] {
        let dir = root.join(sub);
        let mut entries: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            out.insert(
                format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()),
                fs::read(&p).unwrap(),
            );
        }
    }
    out.insert("manifest.json".into(), fs::read(root.join("manifest.json")).unwrap());
    out
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let ta = tree(&a.path().join("out"));
    let tb = tree(&b.path().join("out"));
    if ta.keys().ne(tb.keys()) {
        return Err("output trees differ in file set".into());
    }
    let differing: Vec<&String> = ta.iter().filter(|(k, v)| tb[*k] != **v).map(|(k, _)| k).collect();
    if differing.is_empty() {
        Ok(format!("{} artifacts byte-identical across two runs", ta.len()))
    } else {
        Err(format!("differing: {differing:?}"))
    }
}

fn brute_force(gold: &[u32], pred: &[u32]) -> [f64; 8] {
    let mut n = [[0u64; 2]; 2];
    for (&g, &p) in gold.iter().zip(pred) {
        n[g as usize][p as usize] += 1;
    }
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let f1 = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let (tp, fp, fn_, tn) = (n[1][1], n[0][1], n[1][0], n[0][0]);
    let (p1, r1) = (div(tp, tp + fp), div(tp, tp + fn_));
    let (p0, r0) = (div(tn, tn + fn_), div(tn, tn + fp));
    let (f0, f1v) = (f1(p0, r0), f1(p1, r1));
    [
        p1,
        r1,
        f1v,
        p0,
        r0,
        f0,
        (f0 + f1v) / 2.0,
        div(tp + tn, tp + tn + fp + fn_),
    ]
}

fn metrics_oracle() -> Outcome {
    let schema = LabelSchema::for_task(TaskId::B);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..1000 {
        let len = rng.gen_range(1..=60);
        let gold: Vec<u32> = (0..len).map(|_| rng.gen_range(0..2)).collect();
        let pred: Vec<u32> = (0..len).map(|_| rng.gen_range(0..2)).collect();
        let r = report(&confusion(&gold, &pred, &schema).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let got = [
            r.per_class[1].precision,
            r.per_class[1].recall,
            r.per_class[1].f1,
            r.per_class[0].precision,
            r.per_class[0].recall,
            r.per_class[0].f1,
            r.macro_f1,
            r.micro_f1,
        ];
        if got != brute_force(&gold, &pred) {
            return Err(format!("case {case}: {got:?} vs {:?}", brute_force(&gold, &pred)));
        }
    }
    Ok("1000 random binary cases match TP/FP/FN/TN brute force exactly".into())
}

fn grid_search() -> Outcome {
    let grid = GridConfig::default();
    let planted = (0.5, 2.0);
    let landscape = |a: f64, g: f64| -> Result<f64, String> {
        if (a, g) == planted {
            Ok(0.97)
        } else {
            Ok(0.6 + 0.05 * g - 0.1 * (a - 0.5).abs())
        }
    };
    let r = gridsearch_with(&grid.alphas, &grid.gammas, landscape)?;
    if (r.best.alpha, r.best.gamma) != planted || r.cells.len() != 20 {
        return Err(format!(
            "planted {planted:?} but got ({}, {})",
            r.best.alpha, r.best.gamma
        ));
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train_split = imbalanced_binary(SplitName::Train, 200, 20, 70);
    let dev = imbalanced_binary(SplitName::Dev, 100, 10, 71);
    write_dataset(&train_split, &dir.path().join("train.csv"), DataFormat::Csv).unwrap();
    write_dataset(&dev, &dir.path().join("dev.csv"), DataFormat::Csv).unwrap();
    let toml = r#"
version = 1
task = "B"
output_dir = "out"
[data]
train = "train.csv"
dev = "dev.csv"
[featurizer]
n_min = 1
n_max = 2
dimension = 4096
normalize = "l2"
lowercase = false
[[models]]
name = "base"
[gridsearch]
alphas = [0.35]
gammas = [4.0]
"#;
    let mut cfg = PipelineConfig::from_toml(toml).map_err(|e| e.to_string())?;
    cfg.resolve_paths(dir.path());
    let p = Pipeline::new(cfg).map_err(|e| e.to_string())?;
    let single = p.cmd_gridsearch().map_err(|e| e.to_string())?;
    if (single.best.alpha, single.best.gamma) != (0.35, 4.0) {
        return Err(format!(
            "singleton grid returned ({}, {})",
            single.best.alpha, single.best.gamma
        ));
    }
    if !dir.path().join("out/reports/gridsearch.csv").is_file() {
        return Err("grid table not persisted".into());
    }
    Ok(format!(
        "planted {planted:?} recovered from the default 5x4 grid; singleton grid -> (0.35, 4.0)"
    ))
}

fn prompt_fidelity() -> Outcome {
    let text = "यो परीक्षण वाक्य हो ४२";
    let shots: Vec<FewShotExample> = (1..=5)
        .map(|i| FewShotExample {
            text: format!("उदाहरण {i}"),
            label: (i % 2).to_string(),
        })
        .collect();
    let cases = [
        (TaskId::A, "The language code for the given text is:", None),
        (TaskId::B, "### Examples:", Some(shots.as_slice())),
        (TaskId::C, "classify the target of hate speech", None),
    ];
    for (task, anchor, examples) in cases {
        for label in [Some("1"), None] {
            let p = render(task, text, label, examples).map_err(|e| e.to_string())?;
            if !p.contains(anchor) {
                return Err(format!("task {task}: anchor {anchor:?} missing"));
            }
            let count = p.matches(text).count();
            if count != 1 {
                return Err(format!("task {task}: input text appears {count} times"));
            }
        }
    }
    Ok("anchors present for A/B/C and input text appears exactly once (train and inference modes)".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("focal(alpha=1, gamma=0) equals cross-entropy", focal_identity),
        ("focal point value at p_t = 0.5", focal_point_value),
        ("analytic gradients match finite differences", gradients),
        ("three-member vote semantics, exhaustive", vote_semantics),
        ("inverse-frequency class weights", weights_from_counts),
        ("focal loss helps the minority class", imbalance_benefit),
        ("separable 5-class pipeline end to end", separable_end_to_end),
        ("pipeline determinism", determinism),
        ("metrics brute-force oracle", metrics_oracle),
        ("grid search", grid_search),
        ("prompt fidelity", prompt_fidelity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2}. {name} ({secs:.2}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2}. {name} ({secs:.2}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
