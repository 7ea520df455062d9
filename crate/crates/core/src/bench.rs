//! Naive versus feature-backend timing of full rollouts.

use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::diffnet::PolicyNetwork;
use crate::ensemble::{sample_noise, RngStream};
use crate::error::{Error, Result};
use crate::models::{Backend, ModelSpec};
use crate::rff::sample_basis;
use crate::trainer::{rollout, BASIS_STREAM, EVAL_STREAM, NETWORK_STREAM};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub particles: usize,
    pub backend: Backend,
    pub repeats: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Kernel evaluations (naive) or feature multiply-adds (RFF) for one rollout.
    pub ops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub features: usize,
    pub lanes: usize,
}

impl BenchResult {
    pub const CSV_HEADER: &'static str = "N,backend,repeats,mean_ms,std_ms,ops";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let backend = match r.backend {
                Backend::Naive => "naive",
                Backend::Rff => "rff",
            };
            out.push_str(&format!("{},{backend},{},{:.3},{:.3},{}\n", r.particles, r.repeats, r.mean_ms, r.std_ms, r.ops));
        }
        out
    }

    pub fn rows_for(&self, backend: Backend) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.backend == backend)
    }

    /// Least-squares slope of `log mean_ms` against `log N`.
    pub fn wall_clock_slope(&self, backend: Backend) -> Option<f64> {
        let (xs, ys): (Vec<f64>, Vec<f64>) =
            self.rows_for(backend).map(|r| ((r.particles as f64).ln(), r.mean_ms.ln())).unzip();
        log_log_fit(&xs, &ys)
    }
}

/// Slope of the least-squares line through `(x, y)`; `None` with fewer than two distinct `x`.
pub fn log_log_fit(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Some(sxy / sxx)
}

/// Times one full rollout per repeat for every `N` and both backends with an untrained policy.
/// Noise generation happens before the clock starts; `warmup` runs are discarded.
pub fn run_bench(config: &ExperimentConfig, n_list: &[usize], repeats: usize, warmup: usize) -> Result<BenchResult> {
    config.validate()?;
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) || n_list[0] == 0 {
        return Err(Error::Parameter("particle counts must be a nonempty ascending list of positive counts".into()));
    }
    if repeats == 0 {
        return Err(Error::Parameter("bench needs at least one repeat".into()));
    }
    let base = config.model_spec();
    let grid = config.time_grid()?;
    let net = PolicyNetwork::new(
        base.state_dim(),
        &config.network.hidden,
        base.action_dim(),
        config.network.activation,
        config.network.output_scale,
        RngStream::new(config.seed, NETWORK_STREAM),
    )?;
    let basis = sample_basis(
        base.kernel,
        config.interaction.features,
        base.position_dim,
        RngStream::new(config.seed, BASIS_STREAM),
    )?;
    let mut rows = Vec::new();
    for &n in n_list {
        let noise = sample_noise(&grid, n, base.noise_dim(), &config.initial, RngStream::new(config.seed, EVAL_STREAM))?;
        for backend in [Backend::Naive, Backend::Rff] {
            let model = ModelSpec { backend, ..base.clone() };
            let basis = (backend == Backend::Rff).then_some(&basis);
            let mut times = Vec::with_capacity(repeats);
            let mut ops = 0;
            for run in 0..warmup + repeats {
                let clock = Instant::now();
                let rec = rollout(&model, &net, &grid, &noise, basis)?;
                let ms = clock.elapsed().as_secs_f64() * 1e3;
                ops = rec.kernel_evals + rec.feature_madds;
                if run >= warmup {
                    times.push(ms);
                }
            }
            let mean = times.iter().sum::<f64>() / repeats as f64;
            let std = if repeats > 1 {
                (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt()
            } else {
                0.0
            };
            rows.push(BenchRow { particles: n, backend, repeats, mean_ms: mean, std_ms: std, ops });
        }
    }
    Ok(BenchResult { rows, features: config.interaction.features, lanes: config.bench.lanes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_fit_recovers_power_laws() {
        let x: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = [1.0f64, 4.0, 16.0, 64.0].iter().map(|v| (3.0 * v).ln()).collect();
        assert!((log_log_fit(&x, &y).unwrap() - 2.0).abs() < 1e-12);
        assert!(log_log_fit(&x[..1], &y[..1]).is_none());
        assert!(log_log_fit(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn counters_scale_exactly() {
        let mut cfg = ExperimentConfig::crowd_gaussian();
        cfg.grid.horizon = 0.1;
        cfg.interaction.features = 64;
        cfg.network.hidden = vec![8];
        cfg.output.snapshot_steps = vec![];
        let res = run_bench(&cfg, &[20, 40, 80], 1, 0).unwrap();
        let naive: Vec<u64> = res.rows_for(Backend::Naive).map(|r| r.ops).collect();
        let rff: Vec<u64> = res.rows_for(Backend::Rff).map(|r| r.ops).collect();
        assert_eq!(naive, vec![2 * 400, 2 * 1600, 2 * 6400]);
        assert_eq!(rff[1], 2 * rff[0]);
        assert_eq!(rff[2], 2 * rff[1]);
        assert_eq!(rff[0], 2 * 20 * 64 * 6);
        let csv = res.to_csv();
        assert!(csv.starts_with("N,backend,repeats,mean_ms,std_ms,ops\n20,naive,1,"));
        assert_eq!(csv.lines().count(), 7);
        assert!(run_bench(&cfg, &[40, 20], 1, 0).is_err());
    }
}
