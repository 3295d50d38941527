//! End-to-end acceptance suite. Criteria run sequentially in one test so
//! the latency measurements never share the CPU with other work; each
//! prints one `PASS`/`FAIL` line and the test fails if any criterion does.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{deterministic_part, feat, metric, properties, read_csv, read_report, write_json};
use feat::model::{load, save, FeatModel, ModelConfig};
use feat::numerics::activations::{huber, huber_grad};
use feat::numerics::{RngStream, Tensor, Var};
use feat::scmgen::stats::spearman;
use feat::scmgen::{
    gen_dag, heteroscedastic_noise, init_roots, noise_profile, warp_column, Attachment, ScmGenConfig,
};
use feat::train::{huber_loss, total_loss, BatchTaskSets, LossReport, TaskOutputs, TaskTargets};
use rand::seq::index::sample;
use serde_json::{json, Value};
use tempfile::TempDir;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

fn criterion(id: u32, name: &str, budget_s: f64, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = f();
    let secs = start.elapsed().as_secs_f64();
    println!(
        "criterion {id} {name}: {} ({}) [{secs:.1}s, budget {budget_s:.0}s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
    v.pass
}

/// Run a property command and require a clean exit with every property passing.
fn property_command(dir: &Path, args: &[&str], config: Option<Value>) -> (bool, Value, String) {
    let mut full: Vec<String> = Vec::new();
    if let Some(cfg) = config {
        full.push("--config".into());
        full.push(write_json(dir, "config.json", &cfg).display().to_string());
    }
    full.extend(args.iter().map(|s| s.to_string()));
    let argv: Vec<&str> = full.iter().map(String::as_str).collect();
    let out = dir.join("out");
    let run = feat(Some(&out), &argv);
    if run.code != 0 && !out.join("report.json").exists() {
        return (false, Value::Null, format!("exit {}: {}", run.code, run.stderr.trim()));
    }
    let report = read_report(&out);
    let props = properties(&report);
    let failed: Vec<String> = props.iter().filter(|p| !p.2).map(|p| format!("{}={}", p.0, p.1)).collect();
    let ok = run.code == 0 && failed.is_empty() && !props.is_empty();
    let detail = if failed.is_empty() {
        format!("exit {}, {} properties", run.code, props.len())
    } else {
        format!("exit {}, failed: {}", run.code, failed.join(", "))
    };
    (ok, report, detail)
}

fn bench_config() -> Value {
    json!({
        "model": {
            "d": 64, "layers": 1, "d_state": 16, "d_hidden": 128, "d_ff": 128,
            "heads": 4, "feature_subblocks": 1, "afbm_layers": 1, "max_classes": 2
        },
        "rows": [4096, 8192, 16384, 32768, 65536],
        "cols": 20,
        "warmups": 1,
        "repeats": 5,
        "max_doubling_ratio": 2.4
    })
}

fn linear_scaling() -> Verdict {
    let dir = TempDir::new().unwrap();
    let (ok, _, detail) = property_command(dir.path(), &["--threads", "1", "bench-latency"], Some(bench_config()));
    let csv = dir.path().join("out/latency.csv");
    if !csv.exists() {
        return Verdict::new(false, detail);
    }
    let (_, rows) = read_csv(&csv);
    // independent check: second differences of flops in N vanish exactly
    let pts: Vec<(i128, i128)> = rows.iter().map(|r| (r[0].parse().unwrap(), r[3].parse().unwrap())).collect();
    let affine = pts.windows(3).all(|w| {
        let s1 = (w[1].1 - w[0].1) * (w[2].0 - w[1].0);
        let s2 = (w[2].1 - w[1].1) * (w[1].0 - w[0].0);
        s1 == s2
    });
    let times: Vec<Option<f64>> = rows.iter().map(|r| r[1].parse().ok()).collect();
    let ratios: Vec<Option<f64>> = times.windows(2).map(|w| Some(w[1]? / w[0]?)).collect();
    let ratios_ok = ratios.iter().all(|r| r.is_some_and(|v| v <= 2.4));
    let shown: Vec<String> = ratios.iter().map(|r| r.map_or("-".into(), |v| format!("{v:.2}"))).collect();
    Verdict::new(
        ok && affine && ratios_ok,
        format!("{detail}; flops affine {affine}; time(2N)/time(N) = [{}] ≤ 2.4", shown.join(", ")),
    )
}

fn command_criterion(args: &[&str], keys: &[&str]) -> Verdict {
    let dir = TempDir::new().unwrap();
    let (ok, report, detail) = property_command(dir.path(), args, None);
    if report.is_null() {
        return Verdict::new(false, detail);
    }
    let mut shown: Vec<String> = properties(&report)
        .into_iter()
        .filter(|p| keys.is_empty() || keys.contains(&p.0.as_str()))
        .map(|p| format!("{}={:.3e}", p.0, p.1))
        .collect();
    shown.insert(0, detail);
    Verdict::new(ok, shown.join("; "))
}

fn regression_fixture(n: usize, seed: u64) -> (Var, Var, Var, TaskTargets, BatchTaskSets) {
    let mut rng = RngStream::new(seed, 1);
    let cols = 3;
    let logits = Var::constant(Tensor::randn(&[n, 3], 2.0, &mut rng));
    let reg = Var::constant(Tensor::randn(&[n], 2.0, &mut rng));
    let imp = Var::constant(Tensor::randn(&[n, cols], 2.0, &mut rng));
    let targets = TaskTargets {
        classes: (0..n).map(|i| Some(i % 3)).collect(),
        values: (0..n).map(|_| Some(rng.normal())).collect(),
        cells: (0..n * cols).map(|_| Some(rng.normal())).collect(),
        cols,
    };
    let sets = BatchTaskSets {
        cls: (0..n).step_by(2).collect(),
        reg: (1..n).step_by(2).collect(),
        mask: (0..n).map(|i| (i, i % cols)).collect(),
    };
    (logits, reg, imp, targets, sets)
}

fn eval(l: &Var, r: &Var, m: &Var, t: &TaskTargets, s: &BatchTaskSets) -> LossReport {
    let outputs = TaskOutputs {
        logits: Some(l),
        regression: Some(r),
        imputation: Some(m),
    };
    total_loss(outputs, t, s, 1.0).unwrap().1
}

fn loss_semantics() -> Verdict {
    let mut fails = Vec::new();
    let branches = [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)].map(|(e, want)| huber_loss(e, 0.0, 1.0).unwrap() == want);
    if !branches.iter().all(|b| *b) {
        fails.push("huber branch values".to_string());
    }
    for delta in [0.5, 1.0, 2.0] {
        let continuous = huber(delta, delta) == 0.5 * delta * delta && huber_grad(delta, delta) == delta;
        let lower = huber_grad(delta * (1.0 - 1e-12), delta);
        if !continuous || (lower - delta).abs() > 1e-11 * delta {
            fails.push(format!("C1 at delta={delta}"));
        }
    }
    let (l, r, m, t, s) = regression_fixture(9, 1);
    let full = eval(&l, &r, &m, &t, &s);
    let drop = |f: fn(&mut BatchTaskSets)| {
        let mut s2 = s.clone();
        f(&mut s2);
        eval(&l, &r, &m, &t, &s2)
    };
    let (c, g, k) = (full.cls.unwrap(), full.reg.unwrap(), full.mask.unwrap());
    let no_cls = drop(|s| s.cls.clear());
    let no_reg = drop(|s| s.reg.clear());
    let no_mask = drop(|s| s.mask.clear());
    if full.total != c + g + k
        || (no_cls.cls, no_cls.total) != (None, g + k)
        || (no_reg.reg, no_reg.total) != (None, c + k)
        || (no_mask.mask, no_mask.total) != (None, c + g)
    {
        fails.push("switch semantics".into());
    }
    let twice = |v: &Var| Var::concat(&[v, v], 0).unwrap();
    let n = 9;
    let t2 = TaskTargets {
        classes: t.classes.iter().chain(&t.classes).copied().collect(),
        values: t.values.iter().chain(&t.values).copied().collect(),
        cells: t.cells.iter().chain(&t.cells).copied().collect(),
        cols: t.cols,
    };
    let s2 = BatchTaskSets {
        cls: s.cls.iter().copied().chain(s.cls.iter().map(|i| i + n)).collect(),
        reg: s.reg.iter().copied().chain(s.reg.iter().map(|i| i + n)).collect(),
        mask: s.mask.iter().copied().chain(s.mask.iter().map(|&(i, j)| (i + n, j))).collect(),
    };
    if eval(&twice(&l), &twice(&r), &twice(&m), &t2, &s2) != full {
        fails.push("duplication invariance".into());
    }
    Verdict::new(
        fails.is_empty(),
        if fails.is_empty() { "all exact".to_string() } else { format!("failed: {}", fails.join(", ")) },
    )
}

fn generator_statistics() -> Verdict {
    let mut fails = Vec::new();
    let mut simplex_worst: f64 = 0.0;
    for (seed, alpha) in [(1, 0.01), (2, 0.3), (3, 1.0), (4, 10.0)] {
        let cfg = ScmGenConfig { alpha: vec![alpha], rows: 500, ..ScmGenConfig::default() };
        let r = init_roots(&cfg, &mut RngStream::new(seed, 2)).unwrap();
        for w in r.weights.chunks(cfg.prototypes) {
            if w.iter().any(|v| *v < 0.0) {
                simplex_worst = f64::INFINITY;
            }
            simplex_worst = simplex_worst.max((w.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if simplex_worst > 1e-12 {
        fails.push(format!("simplex {simplex_worst}"));
    }
    let mut rng = RngStream::new(5, 0);
    let mut rank_exact = true;
    for _ in 0..20 {
        let x: Vec<f64> = (0..500).map(|i| if i % 3 == 0 { (rng.normal() * 2.0).round() } else { rng.normal() }).collect();
        let (a, b) = (rng.log_uniform(0.5, 2.0), rng.log_uniform(0.5, 2.0));
        rank_exact &= spearman(&x, &warp_column(&x, a, b).unwrap().unwrap()) == 1.0;
    }
    if !rank_exact {
        fails.push("spearman".into());
    }
    let mut rng = RngStream::new(6, 9);
    let clean: Vec<f64> = (0..100_000).map(|_| rng.normal()).collect();
    let noise: Vec<f64> = clean.iter().map(|&c| heteroscedastic_noise(c, 0.5, 1.0, &mut rng)).collect();
    let slope = noise_profile(&clean, &noise, 20).unwrap().slope;
    if (slope - 1.0).abs() > 0.1 {
        fails.push(format!("slope {slope}"));
    }
    let mut wins = 0;
    let mut acyclic = true;
    for seed in 0..100 {
        let mut max_out = |attachment| {
            let cfg = ScmGenConfig { features: 200, roots: 2, attach: 2, attachment, seed, ..ScmGenConfig::default() };
            let g = gen_dag(&cfg, &mut RngStream::new(seed, 1)).unwrap();
            acyclic &= g.topological_order().is_ok();
            g.out_degrees().into_iter().max().unwrap()
        };
        let (p, u) = (max_out(Attachment::Preferential), max_out(Attachment::Uniform));
        if p > u {
            wins += 1;
        }
    }
    if wins < 90 {
        fails.push(format!("hubs {wins}/100"));
    }
    if !acyclic {
        fails.push("cycle".into());
    }
    Verdict::new(
        fails.is_empty(),
        format!("simplex err {simplex_worst:.1e}, spearman exact {rank_exact}, slope {slope:.3}, hub wins {wins}/100, acyclic {acyclic}")
            + &if fails.is_empty() { String::new() } else { format!("; failed: {}", fails.join(", ")) },
    )
}

fn toy_generator() -> Value {
    json!({
        "features": 8, "rows": 256, "teacher": "linear", "snr_range": [50.0, 100.0],
        "task": {"kind": "classification", "classes": 2}, "warp": false
    })
}

fn toy_config() -> Value {
    json!({
        "model": {
            "d": 32, "layers": 2, "d_state": 8, "d_hidden": 64, "d_ff": 64, "heads": 2,
            "max_classes": 2, "feature_subblocks": 1, "afbm_layers": 1, "freeze_sdfe": true
        },
        "generator": toy_generator(),
        "train": {"steps": 1500, "mask_rate": 0.05, "optimizer": {"lr": 1e-3}},
        "window": 20,
        "horizon": 200
    })
}

/// Hide half the labels of a generated table; returns the query CSV path
/// and the true class of every row.
fn hide_half(table: &Path, dest: &Path, seed: u64) -> Vec<usize> {
    let (header, rows) = read_csv(table);
    let y = header.iter().position(|h| h == "y").unwrap();
    let truth: Vec<usize> = rows.iter().map(|r| r[y].parse::<f64>().unwrap() as usize).collect();
    let hidden = sample(&mut RngStream::new(seed, 0), rows.len(), rows.len() / 2).into_vec();
    let mut w = csv::Writer::from_path(dest).unwrap();
    w.write_record(&header).unwrap();
    for (i, r) in rows.iter().enumerate() {
        let mut r = r.clone();
        if hidden.contains(&i) {
            r[y].clear();
        }
        w.write_record(&r).unwrap();
    }
    w.flush().unwrap();
    truth
}

fn toy_learning() -> Verdict {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "toy.json", &toy_config());
    let out = dir.path().join("train");
    let run = feat(Some(&out), &["--seed", "0", "--config", cfg.to_str().unwrap(), "train-toy"]);
    if run.code != 0 {
        return Verdict::new(false, format!("train-toy exit {}: {}", run.code, run.stderr.trim()));
    }
    let report = read_report(&out);
    let (early, late) = (metric(&report, "early_mean_loss"), metric(&report, "late_mean_loss"));
    let ckpt = out.join("model.ckpt");
    let gen_cfg = write_json(dir.path(), "gen.json", &toy_generator());
    let (mut acc, mut maj) = (0.0, 0.0);
    for k in 0..10u64 {
        let task = dir.path().join(format!("task{k}"));
        let seed = (1_000_000 + k).to_string();
        let g = feat(Some(&task), &["--seed", &seed, "--config", gen_cfg.to_str().unwrap(), "gen"]);
        assert_eq!(g.code, 0, "{}", g.stderr);
        let query = task.join("query.csv");
        let truth = hide_half(&task.join("data.csv"), &query, k);
        std::fs::copy(task.join("data.json"), task.join("query.json")).unwrap();
        let p = feat(
            Some(&task.join("pred")),
            &["predict", "--data", query.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()],
        );
        if p.code != 0 {
            return Verdict::new(false, format!("predict exit {}: {}", p.code, p.stderr.trim()));
        }
        let (_, preds) = read_csv(&task.join("pred/predictions.csv"));
        let (_, query_rows) = read_csv(&query);
        let labels: Vec<Option<usize>> =
            query_rows.iter().map(|r| r.last().unwrap().parse::<f64>().ok().map(|v| v as usize)).collect();
        let mut counts = [0usize; 2];
        labels.iter().flatten().for_each(|&c| counts[c] += 1);
        let majority = usize::from(counts[1] > counts[0]);
        let n = preds.len() as f64;
        let correct = preds.iter().filter(|r| truth[r[0].parse::<usize>().unwrap()] == r[1].parse::<usize>().unwrap()).count();
        let base = preds.iter().filter(|r| truth[r[0].parse::<usize>().unwrap()] == majority).count();
        acc += correct as f64 / n / 10.0;
        maj += base as f64 / n / 10.0;
    }
    Verdict::new(
        late < early && acc >= maj + 0.05,
        format!("loss steps 1-20 {early:.4} → 181-200 {late:.4}; held-out accuracy {acc:.3} vs majority {maj:.3} (+0.05 required)"),
    )
}

fn same_outputs(args: &[&str], files: &[&str], dir: &Path, tag: &str) -> Result<(), String> {
    let a = dir.join(format!("{tag}_a"));
    let b = dir.join(format!("{tag}_b"));
    for out in [&a, &b] {
        let run = feat(Some(out), args);
        if run.code != 0 {
            return Err(format!("{tag} exit {}: {}", run.code, run.stderr.trim()));
        }
    }
    let strip = |r: Value| {
        let mut r = deterministic_part(&r);
        if let Some(props) = r["properties"].as_array_mut() {
            props.retain(|p| !p["name"].as_str().unwrap_or("").starts_with("time_ratio"));
        }
        r
    };
    if strip(read_report(&a)) != strip(read_report(&b)) {
        return Err(format!("{tag} report differs"));
    }
    for f in files {
        if std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok() {
            return Err(format!("{tag} {f} differs"));
        }
    }
    Ok(())
}

fn engineering_contracts() -> Verdict {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let mut fails = Vec::new();

    // checkpoint round trip
    let model = FeatModel::new(ModelConfig::tiny()).unwrap();
    let (p1, p2) = (d.join("a.ckpt"), d.join("b.ckpt"));
    save(&model, &p1).unwrap();
    save(&load(&p1).unwrap(), &p2).unwrap();
    if std::fs::read(&p1).unwrap() != std::fs::read(&p2).unwrap() {
        fails.push("checkpoint round trip".to_string());
    }

    // determinism of every command under a fixed seed
    let small_toy = json!({
        "model": {"d": 8, "layers": 1, "d_state": 4, "d_hidden": 16, "d_ff": 16, "heads": 2,
                  "max_classes": 2, "feature_subblocks": 1, "afbm_layers": 1},
        "generator": {"features": 4, "rows": 32},
        "train": {"steps": 5}
    });
    let toy = write_json(d, "toy.json", &small_toy);
    let small_bench = json!({"model": {"d": 8, "layers": 1, "d_state": 4, "d_hidden": 16, "d_ff": 16, "heads": 2,
        "feature_subblocks": 1, "afbm_layers": 1}, "rows": [64, 128], "cols": 4, "warmups": 0, "repeats": 1});
    let bench = write_json(d, "bench.json", &small_bench);
    let gen_run = feat(Some(&d.join("table")), &["--seed", "3", "gen"]);
    let table = d.join("table/data.csv");
    let query = d.join("query.csv");
    hide_half(&table, &query, 3);
    std::fs::copy(d.join("table/data.json"), d.join("query.json")).unwrap();
    let before = std::fs::read(&p1).unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (toy, bench, query, ckpt) = (s(&toy), s(&bench), s(&query), s(&p1));
    let cases: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        ("gen", vec!["--seed", "7", "gen"], vec!["data.csv", "data.json", "meta.json"]),
        ("predict", vec!["--seed", "7", "predict", "--data", &query, "--checkpoint", &ckpt, "--impute"], vec!["predictions.csv"]),
        ("train-toy", vec!["--seed", "7", "--config", &toy, "train-toy"], vec!["loss.csv", "model.ckpt"]),
        ("check-variance", vec!["--seed", "7", "check-variance"], vec![]),
        ("check-influence", vec!["--seed", "7", "check-influence"], vec![]),
        ("check-grad", vec!["--seed", "7", "check-grad"], vec![]),
        ("scan-oracle", vec!["--seed", "7", "scan-oracle"], vec![]),
        ("bench-latency", vec!["--seed", "7", "--config", &bench, "bench-latency"], vec![]),
    ];
    if gen_run.code != 0 {
        fails.push(format!("gen exit {}", gen_run.code));
    }
    for (tag, args, files) in &cases {
        if let Err(e) = same_outputs(args, files, d, tag) {
            fails.push(e);
        }
    }
    if std::fs::read(&p1).unwrap() != before {
        fails.push("predict modified the checkpoint".into());
    }

    // exit codes
    let bad_cfg = write_json(d, "bad.json", &json!({"features": 0}));
    let codes = [
        ("unknown flag", feat(None, &["gen", "--nope"]).code, 4),
        ("missing data", feat(Some(&d.join("x")), &["predict", "--data", "/nonexistent.csv", "--sidecar", &s(&d.join("query.json")), "--checkpoint", &ckpt]).code, 2),
        ("invalid config", feat(Some(&d.join("y")), &["--config", &s(&bad_cfg), "gen"]).code, 3),
        ("success", feat(Some(&d.join("z")), &["scan-oracle"]).code, 0),
    ];
    for (name, got, want) in codes {
        if got != want {
            fails.push(format!("{name}: exit {got}, want {want}"));
        }
    }
    Verdict::new(
        fails.is_empty(),
        if fails.is_empty() {
            format!("bitwise checkpoint, {} commands deterministic, exit codes 0/2/3/4", cases.len())
        } else {
            format!("failed: {}", fails.join("; "))
        },
    )
}

#[test]
fn acceptance() {
    let results = [
        criterion(1, "linear scaling", 600.0, linear_scaling),
        criterion(2, "variance boundedness", 120.0, || command_criterion(&["check-variance"], &[])),
        criterion(3, "influence symmetry and causal deficit", 60.0, || {
            command_criterion(&["check-influence"], &["unidirectional_future_influence", "tied_asymmetry"])
        }),
        criterion(4, "scan closed-form oracle", 10.0, || command_criterion(&["scan-oracle"], &[])),
        criterion(5, "gradient soundness", 120.0, || command_criterion(&["check-grad"], &[])),
        criterion(6, "loss semantics", 5.0, loss_semantics),
        criterion(7, "generator statistics", 180.0, generator_statistics),
        criterion(8, "toy learning signal", 1200.0, toy_learning),
        criterion(9, "engineering contracts", 60.0, engineering_contracts),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|r| !r.1).map(|r| r.0 + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
