//! Experiment configuration: one TOML file with flat typed sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffnet::{Activation, AdamConfig};
use crate::ensemble::{InitialLaw, TimeGrid};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::models::{Backend, Congestion, ModelKind, ModelSpec, TerminalCost};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub kernel: KernelSpec,
    pub grid: GridSection,
    pub initial: InitialLaw,
    pub interaction: InteractionSection,
    pub network: NetworkSection,
    pub optimizer: AdamConfig,
    pub train: TrainSection,
    pub bench: BenchSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub position_dim: usize,
    pub sigma: f64,
    pub lambda: f64,
    pub congestion: Congestion,
    pub terminal: TerminalCost,
    pub targets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionSection {
    pub backend: Backend,
    /// Number of frequency samples `M`.
    pub features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub particles: usize,
    pub eval_every: usize,
    pub eval_particles: usize,
    pub eval_rollouts: usize,
    pub divergence_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub particles: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    /// Worker lanes the rollout is pinned to; only 1 is implemented.
    pub lanes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Time steps written to `snapshots/step_<n>.csv`.
    pub snapshot_steps: Vec<usize>,
}

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: [&str; 4] = ["crowd-gaussian", "crowd-matern", "flock-cauchy", "flock-cauchy-beta1"];

impl ExperimentConfig {
    /// Crowd motion with a Gaussian kernel: `T = 2`, `Δt = 0.05`, `σ = 0.1`, `λ = 5`, `σ_K = 0.3`.
    pub fn crowd_gaussian() -> Self {
        Self {
            seed: 0,
            model: ModelSection {
                kind: ModelKind::Crowd,
                position_dim: 2,
                sigma: 0.1,
                lambda: 5.0,
                congestion: Congestion::Linear,
                terminal: TerminalCost::NearestTarget,
                targets: vec![vec![1.0, 1.0]],
            },
            kernel: KernelSpec::Gaussian { sigma_k: 0.3 },
            grid: GridSection { horizon: 2.0, dt: 0.05 },
            initial: InitialLaw::isotropic(vec![0.0, 0.0], 0.5),
            interaction: InteractionSection { backend: Backend::Rff, features: 1024 },
            network: NetworkSection { hidden: vec![64, 64], activation: Activation::Tanh, output_scale: 0.1 },
            optimizer: AdamConfig::default(),
            train: TrainSection {
                iterations: 500,
                particles: 256,
                eval_every: 50,
                eval_particles: 1000,
                eval_rollouts: 8,
                divergence_threshold: 1e6,
            },
            bench: BenchSection { particles: vec![1000, 2000, 4000, 8000], repeats: 3, warmup: 1, lanes: 1 },
            output: OutputSection { dir: PathBuf::from("runs/crowd-gaussian"), snapshot_steps: vec![0, 13, 26, 40] },
        }
    }

    /// Crowd motion with a generalized Matérn kernel, `α = 1.9`, `β = 1.5`.
    pub fn crowd_matern() -> Self {
        let mut cfg = Self::crowd_gaussian();
        cfg.kernel = KernelSpec::GeneralizedMatern { sigma_k: 0.3, alpha: 1.9, beta: 1.5 };
        cfg.output.dir = PathBuf::from("runs/crowd-matern");
        cfg
    }

    /// Planar flocking toward `(±2, 0)` with a generalized Cauchy kernel, `α = 2`, `β = 10`.
    pub fn flock_cauchy() -> Self {
        let mut cfg = Self::crowd_gaussian();
        cfg.model = ModelSection {
            kind: ModelKind::Flocking,
            position_dim: 2,
            sigma: 0.1,
            lambda: 5.0,
            congestion: Congestion::Linear,
            terminal: TerminalCost::NearestTarget,
            targets: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
        };
        cfg.kernel = KernelSpec::GeneralizedCauchy { alpha: 2.0, beta: 10.0 };
        let v = 0.1f64.sqrt();
        cfg.initial = InitialLaw::Gaussian { mean: vec![0.0; 4], std: vec![0.5, 0.5, v, v] };
        cfg.output.dir = PathBuf::from("runs/flock-cauchy");
        cfg
    }

    pub fn flock_cauchy_beta1() -> Self {
        let mut cfg = Self::flock_cauchy();
        cfg.kernel = KernelSpec::GeneralizedCauchy { alpha: 2.0, beta: 1.0 };
        cfg.output.dir = PathBuf::from("runs/flock-cauchy-beta1");
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "crowd-gaussian" => Ok(Self::crowd_gaussian()),
            "crowd-matern" => Ok(Self::crowd_matern()),
            "flock-cauchy" => Ok(Self::flock_cauchy()),
            "flock-cauchy-beta1" => Ok(Self::flock_cauchy_beta1()),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected one of {}", PRESETS.join(", ")))),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            kind: m.kind,
            position_dim: m.position_dim,
            sigma: m.sigma,
            lambda: m.lambda,
            congestion: m.congestion,
            terminal: m.terminal,
            targets: m.targets.clone(),
            kernel: self.kernel,
            backend: self.interaction.backend,
        }
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.dt)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model_spec();
        model.validate()?;
        let grid = self.time_grid()?;
        self.initial.validate()?;
        if self.initial.dim() != model.state_dim() {
            return Err(Error::Config(format!(
                "initial law has dimension {}, model state has {}",
                self.initial.dim(),
                model.state_dim()
            )));
        }
        if self.interaction.features == 0 {
            return Err(Error::Config("interaction.features must be >= 1".into()));
        }
        if self.network.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden layer widths must be >= 1".into()));
        }
        let t = &self.train;
        if t.particles == 0 || t.eval_particles == 0 || t.eval_rollouts == 0 || t.eval_every == 0 {
            return Err(Error::Config("train particle, rollout and cadence counts must be >= 1".into()));
        }
        if !(t.divergence_threshold > 0.0) {
            return Err(Error::Config("train.divergence_threshold must be positive".into()));
        }
        let b = &self.bench;
        if b.particles.is_empty() || b.particles.windows(2).any(|w| w[0] >= w[1]) || b.particles[0] == 0 {
            return Err(Error::Config("bench.particles must be a nonempty ascending list of positive counts".into()));
        }
        if b.repeats < 3 {
            return Err(Error::Config(format!("bench.repeats must be >= 3, got {}", b.repeats)));
        }
        if b.lanes != 1 {
            return Err(Error::Config(format!("only single-lane execution is implemented, got lanes = {}", b.lanes)));
        }
        if let Some(s) = self.output.snapshot_steps.iter().find(|&&s| s > grid.n_steps()) {
            return Err(Error::Config(format!("snapshot step {s} exceeds the {} grid steps", grid.n_steps())));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, hex encoded. The output directory
    /// is left out so the hash names the experiment, not where it was written.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output.dir = PathBuf::new();
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Run manifest written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Output files relative to the manifest.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, outputs: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            version: format!("kmfc {}", env!("CARGO_PKG_VERSION")),
            seed: config.seed,
            config_hash: config.hash(),
            config: config.clone(),
            outputs,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
