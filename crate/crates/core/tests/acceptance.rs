//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero
//! exit if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::*;
use pcv_core::harness::*;
use pcv_core::model_io::load_model;
use pcv_core::train::{adamw_step, init_network, train, AdamWParams, Moments, TrainConfig};
use pcv_core::verify::*;
use pcv_core::ResNet4Config;
use rand::Rng;

const CHILD_ENV: &str = "PCV_ACCEPTANCE_SWEEP_DIR";

type Outcome = Result<String, String>;

fn mnist_dir() -> PathBuf {
    std::env::var_os("PCV_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn work_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn desk_cfg() -> SweepConfig {
    SweepConfig::desk(DataConfig::desk(DatasetChoice::Mnist, mnist_dir()))
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn within(start: Instant, limit_s: f64) -> Result<f64, String> {
    let t = start.elapsed().as_secs_f64();
    if t < limit_s {
        Ok(t)
    } else {
        Err(format!("took {t:.1}s, limit {limit_s}s"))
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 100 {
        let net = if checked % 2 == 0 {
            tiny_resnet(&mut r)
        } else {
            let dim = r.gen_range(1..=4);
            let classes = r.gen_range(2..=4);
            tiny_mlp(&mut r, dim, classes, 8)
        };
        if let Some(e) = fd_max_rel_error(&mut r, &net, 1e-5) {
            worst = worst.max(e);
            checked += 1;
        }
    }
    let t = within(start, 60.0)?;
    if worst < 1e-4 {
        Ok(format!("100 networks, max relative error {worst:.2e}, {t:.1}s"))
    } else {
        Err(format!("max relative error {worst:.2e} ≥ 1e-4"))
    }
}

fn soundness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut violations = 0usize;
    let mut samples = 0usize;
    for case in 0..50 {
        let net = if case % 2 == 0 {
            tiny_resnet(&mut r)
        } else {
            let dim = r.gen_range(1..=6);
            tiny_mlp(&mut r, dim, 3, 8)
        };
        let eps = r.gen_range(0.005..0.3);
        let prop = random_property(&mut r, &net, eps);
        let cache = match ibp_bounds(&net, &prop.input_box, &SplitSet::new()).map_err(|e| e.to_string())? {
            Propagation::Bounds(c) => c,
            Propagation::Infeasible(n) => return Err(format!("case {case}: root infeasible at {n:?}")),
        };
        let lb = crown_margin_bounds(&net, &prop, &cache).map_err(|e| e.to_string())?.min();
        for _ in 0..10_000 {
            let x = sample_box(&mut r, &prop.input_box);
            let trace = net.forward_trace_raw(&x);
            for a in 0..trace.len() {
                let (lo, hi) = cache.activation(a);
                violations += trace
                    .activation(a)
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .filter(|(v, (l, u))| !(**l <= **v && **v <= **u))
                    .count();
            }
            if true_margin(&net, &x, prop.label) < lb - 1e-9 {
                violations += 1;
            }
            samples += 1;
        }
    }
    let t = within(start, 300.0)?;
    if violations == 0 {
        Ok(format!("{samples} samples over 50 boxes, 0 violations, {t:.1}s"))
    } else {
        Err(format!("{violations} violations"))
    }
}

fn oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let (mut decided, mut contradictions) = (0, Vec::new());
    let total = 200;
    for case in 0..total {
        let dim = r.gen_range(1..=2);
        let classes = r.gen_range(2..=3);
        let net = tiny_mlp(&mut r, dim, classes, 8);
        let eps = r.gen_range(0.01..0.3);
        let prop = random_property(&mut r, &net, eps);
        let cfg = VerifyConfig {
            timeout_s: None,
            max_subdomains: 10_000,
            seed: case,
            ..VerifyConfig::default()
        };
        let out = verify(&net, &prop, &cfg).map_err(|e| e.to_string())?;
        let tol = (2.0 * logit_lipschitz(&net) * prop.input_box.widest().1 / 2000.0).max(1e-5);
        let o = exact_oracle(&net, &prop, tol).map_err(|e| e.to_string())?;
        let bad = match out.verdict {
            Verdict::Verified => o.verdict == OracleVerdict::Nonrobust,
            Verdict::Falsified => {
                let cex = out.counterexample.as_deref().unwrap_or(&[]);
                o.verdict == OracleVerdict::Robust || !prop.input_box.contains(cex) || net.predict(cex) == prop.label
            }
            _ => false,
        };
        if bad {
            contradictions.push(case);
        }
        if matches!(out.verdict, Verdict::Verified | Verdict::Falsified) {
            decided += 1;
        }
    }
    let t = within(start, 600.0)?;
    let frac = decided as f64 / total as f64;
    if contradictions.is_empty() && frac >= 0.9 {
        Ok(format!("{total} instances, 0 contradictions, decided {decided}/{total}, {t:.1}s"))
    } else {
        Err(format!("contradictions at {contradictions:?}, decided {decided}/{total}"))
    }
}

fn pruning(desk_dir: &Path) -> Outcome {
    let path = desk_dir.join(model_file_name(10, 0.0));
    let (net, header) = load_model(&path).map_err(|e| format!("needs the trained desk model: {e}"))?;
    let ratios: Vec<f64> = (1..=8).map(|k| k as f64 / 10.0).collect();
    let v = prune_violations(&net, &ratios);
    if v.is_empty() {
        Ok(format!(
            "ratios 0.1..0.8 on the seed-10 desk model (accuracy {:.3}), 0 violations",
            header.meta.accuracy.unwrap_or(f64::NAN)
        ))
    } else {
        Err(format!("{} violations, first: {}", v.len(), v[0]))
    }
}

fn optimizer() -> Outcome {
    let p = AdamWParams::default();
    let mut worst = 0.0f64;
    for (lr, w0, a, b) in [(1e-3, 2.0, 1.0, 0.0), (3e-3, -1.5, 4.0, 0.25), (1e-4, 0.3, 0.5, -2.0)] {
        let mut w = [w0];
        let mut st = Moments::zeros(1);
        let mut reference = ScalarAdamW::new(w0);
        for t in 1..=100 {
            let g = a * (w[0] - b);
            adamw_step(&mut w, &[g], &mut st, t, &p, lr).map_err(|e| e.to_string())?;
            reference.step(a * (reference.w - b), lr, p.beta1, p.beta2, p.eps, p.weight_decay);
            worst = worst.max((w[0] - reference.w).abs());
        }
    }
    let lr = 0.05;
    let mut w = [0.8f64];
    let mut st = Moments::zeros(1);
    adamw_step(&mut w, &[0.0], &mut st, 1, &p, lr).map_err(|e| e.to_string())?;
    let decay_exact = w[0] == 0.8 * (1.0 - lr * p.weight_decay);
    if worst <= 1e-10 && decay_exact {
        Ok(format!("100-step quadratic trajectories within {worst:.1e}, decay-only exact"))
    } else {
        Err(format!("trajectory gap {worst:.1e}, decay exact: {decay_exact}"))
    }
}

fn fresh(dir: &Path) {
    let _ = std::fs::remove_dir_all(dir);
}

fn desk_pipeline(dir: &Path) -> Outcome {
    let cfg = desk_cfg();
    fresh(dir);
    let start = Instant::now();
    let opts = SweepOptions {
        jobs: jobs(),
        verbose: std::env::var_os("PCV_VERBOSE").is_some(),
        ..SweepOptions::default()
    };
    let summary = run_sweep(&cfg, dir, &opts).map_err(|e| e.to_string())?;
    let t = within(start, 3600.0)?;
    if summary.interrupted {
        return Err("sweep stopped early".into());
    }
    let log = read_log(&dir.join(LOG_FILE)).map_err(|e| e.to_string())?;
    let failed: Vec<_> = log.models.iter().filter(|m| !m.reached_threshold).collect();
    if log.models.len() != 9 || !failed.is_empty() {
        return Err(format!("{} models, below threshold: {failed:?}", log.models.len()));
    }
    let report = aggregate(&log, &cfg);
    if !report.warnings.is_empty() {
        return Err(format!("report warnings: {:?}", report.warnings));
    }
    let md = std::fs::read_to_string(dir.join(REPORT_MD)).map_err(|e| e.to_string())?;
    let mut grid = Vec::new();
    for row in &report.rows {
        let [Some(cell)] = &row.cells[..] else {
            return Err(format!("{} lacks its ε cell", row.label));
        };
        let shown = format!("{:.1} ± {:.1}", cell.verified.mean, cell.verified.std);
        if cell.verified.n != 3 || !md.contains(&shown) || !md.contains(&row.label) {
            return Err(format!("{} cell {shown} over {} seeds not rendered", row.label, cell.verified.n));
        }
        grid.push(format!("{} {shown}", row.label));
    }
    let base = report.rows[0].cells[0].as_ref().unwrap();
    if report.rows.len() != 3 || !(base.verified.mean > 0.0) {
        return Err(format!("grid {grid:?}"));
    }
    Ok(format!("9/9 models at threshold, verified {}, {:.1} min", grid.join(", "), t / 60.0))
}

fn instance_lines(log: &Path) -> usize {
    std::fs::read_to_string(log)
        .map(|s| s.lines().filter(|l| l.contains(r#""type":"instance""#)).count())
        .unwrap_or(0)
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    let cfg = desk_cfg();
    fresh(second);
    std::fs::create_dir_all(second).map_err(|e| e.to_string())?;
    let total = cfg.seeds.len() * cfg.ratios.len() * cfg.epsilons.len() * cfg.n_inputs;
    let kill_at = total / 3;
    let mut child = Command::new(std::env::current_exe().map_err(|e| e.to_string())?)
        .env(CHILD_ENV, second)
        .spawn()
        .map_err(|e| e.to_string())?;
    let log = second.join(LOG_FILE);
    loop {
        if let Some(status) = child.try_wait().map_err(|e| e.to_string())? {
            return Err(format!("sweep child exited ({status}) before it could be killed"));
        }
        if instance_lines(&log) >= kill_at {
            child.kill().map_err(|e| e.to_string())?;
            child.wait().map_err(|e| e.to_string())?;
            break;
        }
        std::thread::sleep(Duration::from_millis(200));
    }
    let killed_with = instance_lines(&log);
    let opts = SweepOptions {
        jobs: jobs(),
        ..SweepOptions::default()
    };
    let s = run_sweep(&cfg, second, &opts).map_err(|e| e.to_string())?;
    let mut diffs = Vec::new();
    let mut files = vec![REPORT_MD.to_string(), REPORT_CSV.to_string()];
    for &seed in &cfg.seeds {
        for &ratio in &cfg.ratios {
            files.push(model_file_name(seed, ratio));
        }
    }
    for f in &files {
        let a = std::fs::read(first.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(second.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            diffs.push(f.clone());
        }
    }
    let keys = read_log(&log).map_err(|e| e.to_string())?.completed().len();
    if diffs.is_empty() && keys == total && !s.interrupted {
        Ok(format!(
            "fresh rerun killed after {killed_with}/{total} records and resumed ({} skipped); 9 models and both reports byte-identical",
            s.skipped_records
        ))
    } else {
        Err(format!("differing files {diffs:?}, {keys}/{total} keys"))
    }
}

fn surrogate(dir: &Path) -> Outcome {
    let start = Instant::now();
    let data = DataConfig::desk(DatasetChoice::FrostSurrogate, "");
    let (tr, te) = data.load().map_err(|e| e.to_string())?;
    let arch = ResNet4Config::desk(data.image_shape(), data.num_classes());
    let cfg = TrainConfig {
        accuracy_threshold: 0.95,
        max_epochs: 20,
        ..TrainConfig::desk(10)
    };
    let res = train(init_network(&arch, 10).map_err(|e| e.to_string())?, &tr, &te, &cfg, false)
        .map_err(|e| e.to_string())?;
    if res.final_accuracy < 0.95 {
        return Err(format!("accuracy {:.3} after {} epochs", res.final_accuracy, res.epochs_run));
    }
    let sweep = SweepConfig {
        seeds: vec![10],
        ratios: vec![0.0, 0.4],
        n_inputs: 5,
        accuracy_threshold: 0.95,
        ..SweepConfig::desk(data)
    };
    fresh(dir);
    let opts = SweepOptions {
        jobs: jobs(),
        ..SweepOptions::default()
    };
    run_sweep(&sweep, dir, &opts).map_err(|e| e.to_string())?;
    let rows = std::fs::read_to_string(dir.join(REPORT_CSV))
        .map_err(|e| e.to_string())
        .and_then(|t| parse_report_csv(&t).map_err(|e| e.to_string()))?;
    if rows.len() != 2 {
        return Err(format!("surrogate sweep report has {} rows", rows.len()));
    }
    Ok(format!(
        "accuracy {:.3} after {} epochs; surrogate sweep wrote {} report rows, {:.1}s",
        res.final_accuracy,
        res.epochs_run,
        rows.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match out {
        Ok(detail) => {
            println!("PASS  {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL  {name}: {detail} ({secs:.1}s)");
            false
        }
    }
}

fn main() -> ExitCode {
    if let Some(dir) = std::env::var_os(CHILD_ENV) {
        let opts = SweepOptions {
            jobs: jobs(),
            ..SweepOptions::default()
        };
        return match run_sweep(&desk_cfg(), Path::new(&dir), &opts) {
            Ok(_) => ExitCode::SUCCESS,
            Err(_) => ExitCode::FAILURE,
        };
    }
    let work = work_dir();
    let (desk_a, desk_b) = (work.join("desk"), work.join("desk_rerun"));
    let results = [
        run("1 gradient correctness", gradients),
        run("2 bound soundness", soundness),
        run("3 oracle consistency", oracle),
        run("5 optimizer fidelity", optimizer),
        run("8 surrogate sanity", || surrogate(&work.join("surrogate"))),
        run("6 desk pipeline", || desk_pipeline(&desk_a)),
        run("4 pruning invariants", || pruning(&desk_a)),
        run("7 determinism and resume", || determinism(&desk_a, &desk_b)),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
