//! Particle storage, time discretization and seeded noise.
//!
//! Every random draw in the crate goes through an [`RngStream`]: a `(seed,
//! stream id)` pair mapped onto an independent ChaCha8 stream, so that any
//! rollout or training run can be replayed bit-for-bit.

use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time discretization of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    /// Builds a grid, rejecting horizons that are not an integer number of steps.
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::TimeGrid(format!("horizon must be positive, got {horizon}")));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::TimeGrid(format!("step must be positive, got {dt}")));
        }
        let ratio = horizon / dt;
        let n_steps = ratio.round();
        if n_steps < 1.0 || (ratio - n_steps).abs() > 1e-9 * n_steps.max(1.0) {
            return Err(Error::TimeGrid(format!(
                "horizon {horizon} is not an integer multiple of step {dt} (ratio {ratio})"
            )));
        }
        Ok(Self { horizon, dt, n_steps: n_steps as usize })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Time of the left endpoint of step `n`.
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
}

/// `N` particle states in `R^d`; the rows form the empirical measure.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    states: Array2<f64>,
}

impl ParticleEnsemble {
    pub fn new(states: Array2<f64>) -> Result<Self> {
        let (n, d) = states.dim();
        if n == 0 || d == 0 {
            return Err(Error::Shape(format!("ensemble must be non-empty, got {n}x{d}")));
        }
        if let Some(pos) = states.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: 0, particle: pos / d });
        }
        Ok(Self { states })
    }

    /// Builds an ensemble from row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged particle rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let states = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(states)
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn states(&self) -> ArrayView2<'_, f64> {
        self.states.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.states
    }
}

/// A reproducible random stream identified by `(seed, stream id)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Child stream for an independent consumer (a parallel lane, an iteration).
    pub fn child(&self, offset: u64) -> Self {
        Self { seed: self.seed, stream: self.stream.wrapping_mul(0x9E37_79B9).wrapping_add(offset + 1) }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Law of the initial particle states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialLaw {
    /// Independent Gaussian coordinates with per-coordinate mean and standard deviation.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    /// Every particle starts at the same point.
    PointMass { at: Vec<f64> },
}

impl InitialLaw {
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let std = vec![std; mean.len()];
        InitialLaw::Gaussian { mean, std }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::PointMass { at } => at.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InitialLaw::Gaussian { mean, std } => {
                if mean.len() != std.len() {
                    return Err(Error::Shape(format!(
                        "initial mean has {} coordinates but std has {}",
                        mean.len(),
                        std.len()
                    )));
                }
                if std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                    return Err(Error::Parameter("initial std must be finite and >= 0".into()));
                }
            }
            InitialLaw::PointMass { at } => {
                if at.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Parameter("point mass location must be finite".into()));
                }
            }
        }
        if self.dim() == 0 {
            return Err(Error::Shape("initial law has zero dimension".into()));
        }
        Ok(())
    }

    /// Draws `n` initial states.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        self.validate()?;
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        match self {
            InitialLaw::Gaussian { mean, std } => {
                for mut row in out.rows_mut() {
                    for k in 0..d {
                        let z: f64 = StandardNormal.sample(rng);
                        row[k] = mean[k] + std[k] * z;
                    }
                }
            }
            InitialLaw::PointMass { at } => {
                for mut row in out.rows_mut() {
                    row.assign(&ndarray::ArrayView1::from(at.as_slice()));
                }
            }
        }
        Ok(out)
    }
}

/// Brownian increments and initial states for one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePack {
    /// `n_steps x N x m`, each entry `~ Normal(0, dt)`.
    pub increments: Array3<f64>,
    /// `N x d`.
    pub initial_states: Array2<f64>,
}

impl NoisePack {
    pub fn particles(&self) -> usize {
        self.initial_states.nrows()
    }

    pub fn noise_dim(&self) -> usize {
        self.increments.dim().2
    }

    pub fn n_steps(&self) -> usize {
        self.increments.dim().0
    }
}

/// Samples initial states, then all Brownian increments, from one stream.
pub fn sample_noise(
    grid: &TimeGrid,
    particles: usize,
    noise_dim: usize,
    init: &InitialLaw,
    stream: RngStream,
) -> Result<NoisePack> {
    if particles == 0 {
        return Err(Error::Parameter("particle count must be >= 1".into()));
    }
    let mut rng = stream.rng();
    let initial_states = init.sample(particles, &mut rng)?;
    let scale = grid.dt().sqrt();
    let increments = Array3::from_shape_simple_fn((grid.n_steps(), particles, noise_dim), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    Ok(NoisePack { increments, initial_states })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        let g = TimeGrid::new(2.0, 0.05).unwrap();
        assert_eq!(g.n_steps(), 40);
        assert_eq!(TimeGrid::new(1.0, 1.0).unwrap().n_steps(), 1);
        assert!(matches!(TimeGrid::new(1.0, 0.3), Err(Error::TimeGrid(_))));
        assert!(TimeGrid::new(0.0, 0.1).is_err());
        assert!(TimeGrid::new(1.0, -0.1).is_err());
        assert!((g.n_steps() as f64 * g.dt() - g.horizon()).abs() <= 1e-9 * g.horizon());
    }

    #[test]
    fn ensemble_rejects_bad_input() {
        assert!(ParticleEnsemble::new(Array2::zeros((0, 2))).is_err());
        assert!(ParticleEnsemble::new(Array2::zeros((3, 0))).is_err());
        let mut a = Array2::zeros((3, 2));
        a[[2, 1]] = f64::NAN;
        assert!(matches!(ParticleEnsemble::new(a), Err(Error::NonFiniteState { particle: 2, .. })));
    }

    #[test]
    fn noise_is_deterministic() {
        let g = TimeGrid::new(1.0, 0.1).unwrap();
        let law = InitialLaw::isotropic(vec![0.0, 0.0], 0.5);
        let a = sample_noise(&g, 17, 2, &law, RngStream::new(7, 3)).unwrap();
        let b = sample_noise(&g, 17, 2, &law, RngStream::new(7, 3)).unwrap();
        assert_eq!(a, b);
        let c = sample_noise(&g, 17, 2, &law, RngStream::new(7, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn increment_variance_band() {
        // 10^5 scalar increments at dt = 0.05.
        let g = TimeGrid::new(5.0, 0.05).unwrap();
        let law = InitialLaw::PointMass { at: vec![0.0] };
        let pack = sample_noise(&g, 500, 2, &law, RngStream::new(11, 0)).unwrap();
        let n = pack.increments.len() as f64;
        assert_eq!(n, 1e5);
        let mean = pack.increments.sum() / n;
        let var = pack.increments.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.0485..=0.0515).contains(&var), "variance {var}");
        assert!(mean.abs() <= 4.0 * (0.05 / n).sqrt(), "mean {mean}");
    }

    #[test]
    fn point_mass_rows_equal() {
        let g = TimeGrid::new(1.0, 0.5).unwrap();
        let law = InitialLaw::PointMass { at: vec![1.5, -2.0] };
        let pack = sample_noise(&g, 9, 2, &law, RngStream::new(0, 0)).unwrap();
        for row in pack.initial_states.rows() {
            assert_eq!(row.to_vec(), vec![1.5, -2.0]);
        }
    }

    #[test]
    fn zero_particles_rejected() {
        let g = TimeGrid::new(1.0, 0.5).unwrap();
        let law = InitialLaw::PointMass { at: vec![0.0] };
        assert!(sample_noise(&g, 0, 1, &law, RngStream::new(0, 0)).is_err());
    }
}
