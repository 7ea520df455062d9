//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported call is a thin wrapper over a plain function so the
//! numerics are testable natively.

use kmfc_core::config::ExperimentConfig;
use kmfc_core::counters::OpCounter;
use kmfc_core::ensemble::{sample_noise, InitialLaw, ParticleEnsemble, RngStream};
use kmfc_core::kernels::{naive_convolution_counted, KernelSpec};
use kmfc_core::models::{Backend, ModelSpec};
use kmfc_core::rff::{bochner_estimate, fast_convolution_counted, sample_basis};
use kmfc_core::trainer::{rollout, Trainer, EVAL_STREAM};
use wasm_bindgen::prelude::*;

fn kernel_from(family: &str, sigma_k: f64, alpha: f64, beta: f64) -> Result<KernelSpec, String> {
    let spec = match family {
        "gaussian" => KernelSpec::Gaussian { sigma_k },
        "matern" => KernelSpec::GeneralizedMatern { sigma_k, alpha, beta },
        "cauchy" => KernelSpec::GeneralizedCauchy { alpha, beta },
        other => return Err(format!("unknown kernel family {other:?}")),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

/// Exact kernel and its `m`-feature estimate along the first axis:
/// `points` triples `(r, K(r), K̂(r))` flattened.
pub fn profile(family: &str, sigma_k: f64, alpha: f64, beta: f64, m: usize, seed: u64, r_max: f64, points: usize) -> Result<Vec<f64>, String> {
    let spec = kernel_from(family, sigma_k, alpha, beta)?;
    let basis = sample_basis(spec, m.max(1), 2, RngStream::new(seed, 0)).map_err(|e| e.to_string())?;
    let points = points.max(2);
    let mut out = Vec::with_capacity(3 * points);
    for i in 0..points {
        let r = r_max * i as f64 / (points - 1) as f64;
        let delta = [r, 0.0];
        out.extend([r, spec.eval(&delta).map_err(|e| e.to_string())?, bochner_estimate(&basis, &delta)]);
    }
    Ok(out)
}

/// Gaussian-kernel convolution of an `n`-particle cloud, exactly and with `m` features.
/// Returns `[naive_ops, feature_ops]` followed by `(x, y, κ_exact, κ_rff)` per particle.
pub fn compare(n: usize, m: usize, sigma_k: f64, seed: u64) -> Result<Vec<f64>, String> {
    let spec = kernel_from("gaussian", sigma_k, 2.0, 1.0)?;
    let law = InitialLaw::isotropic(vec![0.0, 0.0], 0.5);
    let cloud = law.sample(n.max(1), &mut RngStream::new(seed, 0).rng()).map_err(|e| e.to_string())?;
    let ens = ParticleEnsemble::new(cloud).map_err(|e| e.to_string())?;
    let basis = sample_basis(spec, m.max(1), 2, RngStream::new(seed, 1)).map_err(|e| e.to_string())?;
    let (naive_ops, rff_ops) = (OpCounter::new(), OpCounter::new());
    let exact = naive_convolution_counted(&spec, ens.states(), &naive_ops);
    let approx = fast_convolution_counted(&basis, ens.states(), &rff_ops);
    let mut out = vec![naive_ops.total() as f64, rff_ops.total() as f64];
    for (i, row) in ens.states().rows().into_iter().enumerate() {
        out.extend([row[0], row[1], exact[i], approx[i]]);
    }
    Ok(out)
}

/// Small crowd-motion training session driven one iteration at a time.
pub struct Session {
    trainer: Trainer,
    config: ExperimentConfig,
}

impl Session {
    pub fn new(seed: u64, use_features: bool, particles: usize) -> Result<Self, String> {
        let mut config = ExperimentConfig::crowd_gaussian();
        config.seed = seed;
        config.interaction.backend = if use_features { Backend::Rff } else { Backend::Naive };
        config.interaction.features = 256;
        config.network.hidden = vec![32, 32];
        config.optimizer.learning_rate = 3e-3;
        config.train.particles = particles.max(1);
        config.train.eval_particles = 300;
        config.train.eval_rollouts = 1;
        let trainer = Trainer::new(&config).map_err(|e| e.to_string())?;
        Ok(Self { trainer, config })
    }

    /// Runs `k` iterations; returns the last training cost.
    pub fn step(&mut self, k: usize) -> Result<f64, String> {
        let mut cost = f64::NAN;
        for _ in 0..k {
            cost = self.trainer.step().map_err(|e| e.to_string())?;
        }
        Ok(cost)
    }

    pub fn iteration(&self) -> usize {
        self.trainer.iteration()
    }

    /// Positions `(x, y)` at grid step `step` of an exact-kernel rollout under the current policy.
    pub fn positions(&self, step: usize) -> Result<Vec<f64>, String> {
        let model = ModelSpec { backend: Backend::Naive, ..self.trainer.model().clone() };
        let grid = self.trainer.grid();
        let noise = sample_noise(
            grid,
            self.config.train.eval_particles,
            model.noise_dim(),
            &self.config.initial,
            RngStream::new(self.config.seed, EVAL_STREAM),
        )
        .map_err(|e| e.to_string())?;
        let rec = rollout(&model, self.trainer.network(), grid, &noise, None).map_err(|e| e.to_string())?;
        let step = step.min(grid.n_steps());
        Ok(rec.states.outer_iter().nth(step).map(|s| s.iter().copied().collect()).unwrap_or_default())
    }

    pub fn n_steps(&self) -> usize {
        self.trainer.grid().n_steps()
    }
}

#[wasm_bindgen]
pub fn kernel_profile(family: &str, sigma_k: f64, alpha: f64, beta: f64, m: usize, seed: u32, r_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
    profile(family, sigma_k, alpha, beta, m, seed as u64, r_max, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn convolution_compare(n: usize, m: usize, sigma_k: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    compare(n, m, sigma_k, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub struct CrowdDemo {
    inner: Session,
}

#[wasm_bindgen]
impl CrowdDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, use_features: bool, particles: usize) -> Result<CrowdDemo, JsError> {
        Session::new(seed as u64, use_features, particles).map(|inner| CrowdDemo { inner }).map_err(|e| JsError::new(&e))
    }

    pub fn step(&mut self, k: usize) -> Result<f64, JsError> {
        self.inner.step(k).map_err(|e| JsError::new(&e))
    }

    pub fn iteration(&self) -> usize {
        self.inner.iteration()
    }

    pub fn n_steps(&self) -> usize {
        self.inner.n_steps()
    }

    pub fn positions(&self, step: usize) -> Result<Vec<f64>, JsError> {
        self.inner.positions(step).map_err(|e| JsError::new(&e))
    }
}
