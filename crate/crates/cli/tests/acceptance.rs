//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criterion failures are reported, not panicked on, so the rest of the
//! workspace tests stay usable while a criterion is red. Set
//! `KMFC_ACCEPTANCE_STRICT=1` to turn any FAIL into a nonzero exit.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use kmfc_core::bench::run_bench;
use kmfc_core::checks::{bochner_check, error_slope_check};
use kmfc_core::config::ExperimentConfig;
use kmfc_core::ensemble::{sample_noise, InitialLaw, RngStream};
use kmfc_core::kernels::{naive_alignment_counted, KernelSpec};
use kmfc_core::models::{Backend, ModelSpec};
use kmfc_core::rff::{alignment_vectors_counted, sample_basis};
use kmfc_core::trainer::{rollout, rollout_with_gradient, train, Trainer};
use kmfc_core::counters::OpCounter;
use ndarray::{s, Array2};
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn bochner() -> Outcome {
    let specs = [
        KernelSpec::Gaussian { sigma_k: 0.3 },
        KernelSpec::GeneralizedMatern { sigma_k: 0.3, alpha: 1.9, beta: 1.5 },
        KernelSpec::GeneralizedCauchy { alpha: 2.0, beta: 1.0 },
        KernelSpec::GeneralizedCauchy { alpha: 2.0, beta: 10.0 },
    ];
    let lines: Vec<_> = specs.iter().enumerate().map(|(i, s)| bochner_check(s, 2, 100_000, 20, 10 + i as u64).unwrap()).collect();
    Outcome {
        name: "rff unbiasedness",
        passed: lines.iter().all(|l| l.passed),
        detail: lines.iter().map(|l| format!("{}: {}", l.name, l.detail)).collect::<Vec<_>>().join("; "),
    }
}

fn error_slope() -> Outcome {
    let (line, _) =
        error_slope_check(&KernelSpec::Gaussian { sigma_k: 0.3 }, 2, 500, &[256, 1024, 4096, 16_384], 20, 20).unwrap();
    Outcome { name: "error-rate scaling", passed: line.passed, detail: line.detail }
}

fn complexity() -> Outcome {
    let mut cfg = ExperimentConfig::crowd_gaussian();
    // Ten steps instead of forty: the per-step work is identical, so slopes are unchanged.
    cfg.grid.horizon = 0.5;
    cfg.output.snapshot_steps = vec![];
    cfg.interaction.features = 1024;
    let n_list = [1000, 2000, 4000, 8000];
    let res = run_bench(&cfg, &n_list, 3, 1).unwrap();
    let steps = 10u64;
    let naive: Vec<u64> = res.rows_for(Backend::Naive).map(|r| r.ops).collect();
    let rff: Vec<u64> = res.rows_for(Backend::Rff).map(|r| r.ops).collect();
    let naive_exact = naive.iter().zip(n_list).all(|(ops, n)| *ops == steps * (n * n) as u64);
    let rff_linear = rff.windows(2).all(|w| w[1] == 2 * w[0]);
    let naive_slope = res.wall_clock_slope(Backend::Naive).unwrap();
    let rff_slope = res.wall_clock_slope(Backend::Rff).unwrap();
    let times: Vec<String> = res.rows.iter().map(|r| format!("{}/{:?} {:.0}ms", r.particles, r.backend, r.mean_ms)).collect();
    Outcome {
        name: "complexity counters and wall-clock slopes",
        passed: naive_exact && rff_linear && naive_slope >= 1.8 && rff_slope <= 1.3,
        detail: format!(
            "naive ops = steps*N^2: {naive_exact}; rff ops double with N: {rff_linear}; \
             slope naive {naive_slope:.3} (>= 1.8), rff {rff_slope:.3} (<= 1.3); {}",
            times.join(", ")
        ),
    }
}

fn gradient_case(base: ModelSpec, backend: Backend, seed: u64) -> (f64, String) {
    let model = ModelSpec { backend, ..base };
    let mut cfg = ExperimentConfig::crowd_gaussian();
    if model.kind == kmfc_core::models::ModelKind::Flocking {
        cfg = ExperimentConfig::flock_cauchy();
    }
    cfg.grid.horizon = 0.2;
    cfg.output.snapshot_steps = vec![];
    cfg.seed = seed;
    let trainer = Trainer::new(&cfg).unwrap();
    let grid = *trainer.grid();
    assert_eq!(grid.n_steps(), 4);
    let mut net = trainer.network().clone();
    let basis = sample_basis(model.kernel, 64, model.position_dim, RngStream::new(seed, 1)).unwrap();
    let basis = (backend == Backend::Rff).then_some(&basis);
    let noise = sample_noise(&grid, 8, model.noise_dim(), &cfg.initial, RngStream::new(seed, 3)).unwrap();
    let (_, grad) = rollout_with_gradient(&model, &net, &grid, &noise, basis).unwrap();
    let theta = net.flat_params();
    let mut rng = RngStream::new(seed, 4).rng();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let dir: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir: Vec<f64> = dir.iter().map(|v| v / norm).collect();
        let mut cost_at = |sign: f64| {
            let shifted: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + sign * h * d).collect();
            net.set_flat_params(&shifted).unwrap();
            rollout(&model, &net, &grid, &noise, basis).unwrap().total_cost
        };
        let fd = (cost_at(1.0) - cost_at(-1.0)) / (2.0 * h);
        let an: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        worst = worst.max((fd - an).abs() / an.abs().max(1e-8));
    }
    (worst, format!("{:?}/{:?} {worst:.2e}", model.kind, backend))
}

fn gradients() -> Outcome {
    let mut results = Vec::new();
    for (i, base) in [ModelSpec::crowd(), ModelSpec::flocking()].into_iter().enumerate() {
        for (j, backend) in [Backend::Naive, Backend::Rff].into_iter().enumerate() {
            results.push(gradient_case(base.clone(), backend, (10 * i + j) as u64));
        }
    }
    Outcome {
        name: "gradient correctness",
        passed: results.iter().all(|(w, _)| *w <= 1e-4),
        detail: format!("worst relative error over 20 directions: {}", results.iter().map(|r| r.1.clone()).collect::<Vec<_>>().join(", ")),
    }
}

fn flocking_aggregates() -> Outcome {
    let m = 16_384;
    let spec = KernelSpec::GeneralizedCauchy { alpha: 2.0, beta: 10.0 };
    let v = 0.1f64.sqrt();
    let law = InitialLaw::Gaussian { mean: vec![0.0; 4], std: vec![0.5, 0.5, v, v] };
    let states = law.sample(40, &mut RngStream::new(30, 0).rng()).unwrap();
    let (p, vel) = (states.slice(s![.., ..2]), states.slice(s![.., 2..]));
    let basis = sample_basis(spec, m, 2, RngStream::new(30, 1)).unwrap();
    let counter = OpCounter::new();
    let exact = naive_alignment_counted(&spec, p, vel, &counter);
    let approx = alignment_vectors_counted(&basis, p, vel, &counter);
    let gap = (&exact - &approx).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
    let tol = 10.0 / (m as f64).sqrt();

    let equal = Array2::from_shape_fn((40, 2), |(_, c)| [0.7, -0.2][c]);
    let zero_exact = naive_alignment_counted(&spec, p, equal.view(), &counter).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
    let zero_rff = alignment_vectors_counted(&basis, p, equal.view(), &counter).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
    Outcome {
        name: "flocking aggregate equivalence",
        passed: gap <= tol && zero_exact <= 1e-10 && zero_rff <= 1e-10,
        detail: format!("max gap {gap:.3e} (<= {tol:.3e}); equal velocities: exact {zero_exact:.1e}, rff {zero_rff:.1e}"),
    }
}

fn training() -> Outcome {
    let rff_cfg = ExperimentConfig::crowd_gaussian();
    let mut naive_cfg = rff_cfg.clone();
    naive_cfg.interaction.backend = Backend::Naive;
    let rff = train(&rff_cfg, |_| {}).unwrap();
    let naive = train(&naive_cfg, |_| {}).unwrap();
    let first = rff.report.initial_evaluation().unwrap();
    let last = rff.report.final_evaluation().unwrap();
    let naive_last = naive.report.final_evaluation().unwrap();
    let ratio = last.mean / first.mean;
    let gap = (last.mean - naive_last.mean).abs() / naive_last.mean;
    let ok = rff.failure.is_none() && naive.failure.is_none() && ratio <= 0.5 && last.terminal_distance <= 0.3 && gap <= 0.1;
    Outcome {
        name: "training behavior",
        passed: ok,
        detail: format!(
            "rff-trained eval cost {:.4} -> {:.4}, ratio {ratio:.4} (<= 0.5); mean terminal distance {:.4} (<= 0.3), \
             centroid distance {:.4}; naive-trained {:.4} -> {:.4} (ratio {:.4}); rff vs naive gap {:.2}% (<= 10%)",
            first.mean,
            last.mean,
            last.terminal_distance,
            last.centroid_distance,
            naive.report.initial_evaluation().unwrap().mean,
            naive_last.mean,
            naive_last.mean / naive.report.initial_evaluation().unwrap().mean,
            100.0 * gap
        ),
    }
}

/// Drops the timing column(s) from a CSV.
fn without_columns(text: &str, drop: &[&str]) -> String {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|i| !drop.contains(&header[*i])).collect();
    std::iter::once(header)
        .chain(lines.map(|l| l.split(',').collect()))
        .map(|cells: Vec<&str>| keep.iter().map(|&i| cells.get(i).copied().unwrap_or("")).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_kmfc")).args(args).output().map(|o| o.status.success()).unwrap_or(false)
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::crowd_gaussian();
    cfg.grid.horizon = 0.5;
    cfg.train.iterations = 12;
    cfg.train.particles = 64;
    cfg.train.eval_every = 5;
    cfg.train.eval_particles = 200;
    cfg.train.eval_rollouts = 2;
    cfg.interaction.features = 128;
    cfg.network.hidden = vec![16, 16];
    cfg.bench.particles = vec![100, 200, 400];
    cfg.output.snapshot_steps = vec![0, 5, 10];
    let config_path = tmp.path().join("config.toml");
    cfg.save(&config_path).unwrap();
    let config = config_path.to_str().unwrap();
    let mut mismatches = Vec::new();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let d = dir.to_str().unwrap();
        let ok = run_cli(&["train", "--config", config, "--out", d])
            && run_cli(&["eval", "--config", config, "--out", &format!("{d}/eval"), "--checkpoint", &format!("{d}/checkpoint.json")])
            && run_cli(&["bench", "--config", config, "--out", &format!("{d}/bench")])
            && run_cli(&["kernel-check", "--config", config, "--out", &format!("{d}/check")]);
        if !ok {
            return Outcome { name: "determinism", passed: false, detail: format!("run {run}: a command failed") };
        }
        outputs.push(vec![
            ("train_report.csv (timing dropped)", without_columns(&read(&dir, "train_report.csv"), &["wall_ms"])),
            ("checkpoint.json", read(&dir, "checkpoint.json")),
            ("snapshots/step_0.csv", read(&dir, "snapshots/step_0.csv")),
            ("snapshots/step_5.csv", read(&dir, "snapshots/step_5.csv")),
            ("snapshots/step_10.csv", read(&dir, "snapshots/step_10.csv")),
            ("eval/eval.csv", read(&dir, "eval/eval.csv")),
            ("bench.csv (timing dropped)", without_columns(&read(&dir, "bench/bench.csv"), &["mean_ms", "std_ms"])),
            ("check/kernel_check.csv", read(&dir, "check/kernel_check.csv")),
        ]);
    }
    for ((name, a), (_, b)) in outputs[0].iter().zip(&outputs[1]) {
        if a != b || a.is_empty() {
            mismatches.push(*name);
        }
    }
    Outcome {
        name: "determinism",
        passed: mismatches.is_empty(),
        detail: if mismatches.is_empty() {
            format!("{} outputs identical across reruns of train, eval, bench and kernel-check", outputs[0].len())
        } else {
            format!("differing outputs: {}", mismatches.join(", "))
        },
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("bochner", bochner),
        ("error slope", error_slope),
        ("complexity", complexity),
        ("gradients", gradients),
        ("flocking", flocking_aggregates),
        ("training", training),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (_, run) in criteria {
        let clock = Instant::now();
        let o = run();
        if !o.passed {
            failed += 1;
        }
        println!(
            "{} {} ({:.1}s): {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            clock.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 && std::env::var("KMFC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
