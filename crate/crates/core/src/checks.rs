//! Self-checks of a kernel's feature sampler: Monte Carlo unbiasedness and
//! the `M^{-1/2}` decay of the approximation error.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::bench::log_log_fit;
use crate::ensemble::{InitialLaw, ParticleEnsemble, RngStream};
use crate::error::Result;
use crate::kernels::{naive_convolution, KernelSpec};
use crate::rff::{bochner_estimate, fast_convolution, sample_basis};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Length scale used to place test offsets where the kernel varies.
fn length_scale(spec: &KernelSpec) -> f64 {
    match spec {
        KernelSpec::Gaussian { sigma_k } | KernelSpec::GeneralizedMatern { sigma_k, .. } => *sigma_k,
        KernelSpec::GeneralizedCauchy { .. } => 1.0,
    }
}

/// Compares the mean of `cos(ω·δ)` over `m` frequencies with `K(δ)` for `n_deltas`
/// random offsets; passes when every gap is below `4/√m`.
pub fn bochner_check(spec: &KernelSpec, dim: usize, m: usize, n_deltas: usize, seed: u64) -> Result<CheckLine> {
    let basis = sample_basis(*spec, m, dim, RngStream::new(seed, 0))?;
    let mut rng = RngStream::new(seed, 1).rng();
    let scale = length_scale(spec);
    let tol = 4.0 / (m as f64).sqrt();
    let mut worst: f64 = 0.0;
    for _ in 0..n_deltas {
        let delta: Vec<f64> = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        let gap = (bochner_estimate(&basis, &delta) - spec.eval(&delta)?).abs();
        worst = worst.max(gap);
    }
    Ok(CheckLine {
        name: format!("bochner {}", spec.family_name()),
        passed: worst <= tol,
        detail: format!("max gap {worst:.3e} over {n_deltas} offsets, tolerance {tol:.3e} (M = {m})"),
    })
}

/// Log-log slope of the RMSE between feature and exact convolutions over a Gaussian cloud,
/// averaged over `redraws` bases per `M`. Passes when the slope lies in `[-0.65, -0.35]`.
pub fn error_slope_check(
    spec: &KernelSpec,
    dim: usize,
    particles: usize,
    feature_counts: &[usize],
    redraws: usize,
    seed: u64,
) -> Result<(CheckLine, Vec<(usize, f64)>)> {
    let law = InitialLaw::isotropic(vec![0.0; dim], 0.5);
    let cloud: Array2<f64> = law.sample(particles, &mut RngStream::new(seed, 0).rng())?;
    let ens = ParticleEnsemble::new(cloud)?;
    let exact = naive_convolution(spec, &ens)?;
    let mut curve = Vec::with_capacity(feature_counts.len());
    for (j, &m) in feature_counts.iter().enumerate() {
        let mut total = 0.0;
        for r in 0..redraws {
            let stream = RngStream::new(seed, 1 + (j * redraws + r) as u64);
            let approx = fast_convolution(&sample_basis(*spec, m, dim, stream)?, &ens)?;
            let mse = (&approx - &exact).mapv(|e| e * e).mean().expect("nonempty");
            total += mse.sqrt();
        }
        curve.push((m, total / redraws as f64));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = curve.iter().map(|(m, e)| ((*m as f64).ln(), e.ln())).unzip();
    let slope = log_log_fit(&x, &y).unwrap_or(f64::NAN);
    let line = CheckLine {
        name: format!("error slope {}", spec.family_name()),
        passed: (-0.65..=-0.35).contains(&slope),
        detail: format!(
            "slope {slope:.3} (target [-0.65, -0.35]); rmse {}",
            curve.iter().map(|(m, e)| format!("M={m}: {e:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    };
    Ok((line, curve))
}

/// The standard suite: Bochner at `M = 10^5` on 20 offsets, and the error slope over
/// `M ∈ {256, 1024, 4096, 16384}` on 500 particles with 20 redraws.
pub fn kernel_check(spec: &KernelSpec, dim: usize, seed: u64) -> Result<Vec<CheckLine>> {
    spec.validate()?;
    Ok(vec![
        bochner_check(spec, dim, 100_000, 20, seed)?,
        error_slope_check(spec, dim, 500, &[256, 1024, 4096, 16_384], 20, seed)?.0,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_runs_and_formats() {
        let spec = KernelSpec::Gaussian { sigma_k: 0.3 };
        let b = bochner_check(&spec, 2, 20_000, 5, 1).unwrap();
        assert!(b.passed, "{b}");
        assert!(b.to_string().starts_with("[PASS] bochner gaussian"));
        let (line, curve) = error_slope_check(&spec, 2, 100, &[64, 256, 1024], 4, 2).unwrap();
        assert_eq!(curve.len(), 3);
        assert!(curve[2].1 < curve[0].1, "{line}");
    }
}
