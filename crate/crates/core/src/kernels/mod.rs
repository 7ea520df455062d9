//! Isotropic positive-definite interaction kernels and exact O(N²) convolutions.
//!
//! All kernels are normalized so that `K(0) = 1`:
//!
//! - Gaussian: `exp(-r² / (2 σ²))`
//! - generalized Matérn: `u^β K_β(u) / (Γ(β) 2^(β-1))` with `u = √(2β) (r/σ)^(α/2)`
//! - generalized Cauchy: `(1 + r^α)^(-β)`

mod bessel;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::counters::OpCounter;
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};

pub use bessel::ln_bessel_k;

/// Largest Matérn smoothness accepted by the numerical Bessel route.
const MATERN_MAX_BETA: f64 = 500.0;

/// Tagged description of an isotropic kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelSpec {
    Gaussian { sigma_k: f64 },
    GeneralizedMatern { sigma_k: f64, alpha: f64, beta: f64 },
    GeneralizedCauchy { alpha: f64, beta: f64 },
}

impl KernelSpec {
    /// The standard Cauchy kernel `1 / (1 + r²)`.
    pub fn cauchy() -> Self {
        KernelSpec::GeneralizedCauchy { alpha: 2.0, beta: 1.0 }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            KernelSpec::Gaussian { .. } => "gaussian",
            KernelSpec::GeneralizedMatern { .. } => "generalized-matern",
            KernelSpec::GeneralizedCauchy { .. } => "generalized-cauchy",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} must be positive, got {v}")))
            }
        };
        let exponent = |v: f64| {
            if v.is_finite() && v > 0.0 && v <= 2.0 {
                Ok(())
            } else {
                Err(Error::Parameter(format!("alpha must lie in (0, 2], got {v}")))
            }
        };
        match *self {
            KernelSpec::Gaussian { sigma_k } => positive("sigma_k", sigma_k),
            KernelSpec::GeneralizedMatern { sigma_k, alpha, beta } => {
                positive("sigma_k", sigma_k)?;
                exponent(alpha)?;
                positive("beta", beta)?;
                if beta > MATERN_MAX_BETA {
                    return Err(Error::Unsupported(format!(
                        "generalized Matérn with beta = {beta} exceeds the Bessel route's range (beta <= {MATERN_MAX_BETA})"
                    )));
                }
                Ok(())
            }
            KernelSpec::GeneralizedCauchy { alpha, beta } => {
                exponent(alpha)?;
                positive("beta", beta)
            }
        }
    }

    /// `K(0)`; every implemented family is normalized to one.
    pub fn at_zero(&self) -> f64 {
        1.0
    }

    /// Kernel value at displacement `delta`.
    pub fn eval(&self, delta: &[f64]) -> Result<f64> {
        self.validate()?;
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("displacement must be finite".into()));
        }
        Ok(self.value_sq(delta.iter().map(|v| v * v).sum()))
    }

    /// Kernel value as a function of the squared distance. Assumes a valid spec.
    #[inline]
    pub fn value_sq(&self, r2: f64) -> f64 {
        match *self {
            KernelSpec::Gaussian { sigma_k } => (-0.5 * r2 / (sigma_k * sigma_k)).exp(),
            KernelSpec::GeneralizedCauchy { alpha, beta } => {
                let ra = if alpha == 2.0 { r2 } else { r2.powf(0.5 * alpha) };
                let base = 1.0 + ra;
                if beta == 1.0 {
                    1.0 / base
                } else {
                    base.powf(-beta)
                }
            }
            KernelSpec::GeneralizedMatern { sigma_k, alpha, beta } => {
                let r = r2.sqrt();
                if r < 1e-12 * sigma_k {
                    return 1.0;
                }
                let u = matern_arg(r, sigma_k, alpha, beta);
                matern_profile(beta, u)
            }
        }
    }

    /// Radial derivative `dK/dr` at distance `r > 0`.
    pub fn radial_derivative(&self, r: f64) -> f64 {
        match *self {
            KernelSpec::Gaussian { sigma_k } => {
                let s2 = sigma_k * sigma_k;
                -r / s2 * (-0.5 * r * r / s2).exp()
            }
            KernelSpec::GeneralizedCauchy { alpha, beta } => {
                let ra = r.powf(alpha);
                -beta * alpha * r.powf(alpha - 1.0) * (1.0 + ra).powf(-beta - 1.0)
            }
            KernelSpec::GeneralizedMatern { sigma_k, alpha, beta } => {
                if r < 1e-12 * sigma_k {
                    return 0.0;
                }
                let s = r / sigma_k;
                let u = (2.0 * beta).sqrt() * s.powf(0.5 * alpha);
                let du_dr = (2.0 * beta).sqrt() * 0.5 * alpha * s.powf(0.5 * alpha - 1.0) / sigma_k;
                matern_profile_derivative(beta, u) * du_dr
            }
        }
    }

    /// Writes `∇K(delta)` into `grad` and returns `K(delta)`. Assumes a valid spec.
    pub fn value_and_gradient(&self, delta: &[f64], grad: &mut [f64]) -> f64 {
        let r2: f64 = delta.iter().map(|v| v * v).sum();
        let value = self.value_sq(r2);
        if let KernelSpec::Gaussian { sigma_k } = *self {
            let c = -value / (sigma_k * sigma_k);
            for (g, d) in grad.iter_mut().zip(delta) {
                *g = c * d;
            }
            return value;
        }
        let r = r2.sqrt();
        if r == 0.0 {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return value;
        }
        let c = self.radial_derivative(r) / r;
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = c * d;
        }
        value
    }
}

fn matern_arg(r: f64, sigma_k: f64, alpha: f64, beta: f64) -> f64 {
    let s = r / sigma_k;
    let s_pow = if alpha == 2.0 { s } else { s.powf(0.5 * alpha) };
    (2.0 * beta).sqrt() * s_pow
}

/// Normalized Matérn profile `u^β K_β(u) / (Γ(β) 2^(β-1))`.
fn matern_profile(beta: f64, u: f64) -> f64 {
    if beta == 0.5 {
        (-u).exp()
    } else if beta == 1.5 {
        (1.0 + u) * (-u).exp()
    } else if beta == 2.5 {
        (1.0 + u + u * u / 3.0) * (-u).exp()
    } else {
        matern_profile_bessel(beta, u)
    }
}

fn matern_profile_derivative(beta: f64, u: f64) -> f64 {
    if beta == 0.5 {
        -(-u).exp()
    } else if beta == 1.5 {
        -u * (-u).exp()
    } else if beta == 2.5 {
        -(u / 3.0) * (1.0 + u) * (-u).exp()
    } else {
        // d/du [u^β K_β(u)] = -u^β K_{β-1}(u)
        let ln_norm = ln_gamma(beta) + (beta - 1.0) * std::f64::consts::LN_2;
        -(beta * u.ln() + ln_bessel_k(beta - 1.0, u) - ln_norm).exp()
    }
}

/// General-order Matérn profile through the numerical Bessel route.
pub(crate) fn matern_profile_bessel(beta: f64, u: f64) -> f64 {
    if u <= 0.0 {
        return 1.0;
    }
    let ln_norm = ln_gamma(beta) + (beta - 1.0) * std::f64::consts::LN_2;
    (beta * u.ln() + ln_bessel_k(beta, u) - ln_norm).exp().min(1.0)
}

/// Exact empirical convolution `(1/N) Σ_j K(x_i − x_j)` for every particle.
pub fn naive_convolution(spec: &KernelSpec, ensemble: &ParticleEnsemble) -> Result<Array1<f64>> {
    spec.validate()?;
    Ok(naive_convolution_counted(spec, ensemble.states(), &OpCounter::new()))
}

/// Same as [`naive_convolution`] over a raw state matrix; records `N²` kernel evaluations.
pub fn naive_convolution_counted(
    spec: &KernelSpec,
    states: ArrayView2<'_, f64>,
    counter: &OpCounter,
) -> Array1<f64> {
    let n = states.nrows();
    let d = states.ncols();
    let inv_n = 1.0 / n as f64;
    let mut out = Array1::zeros(n);
    for i in 0..n {
        let xi = states.row(i);
        let mut acc = 0.0;
        for j in 0..n {
            let xj = states.row(j);
            let mut r2 = 0.0;
            for k in 0..d {
                let dk = xi[k] - xj[k];
                r2 += dk * dk;
            }
            acc += spec.value_sq(r2);
        }
        out[i] = acc * inv_n;
    }
    counter.add_kernel_evals((n * n) as u64);
    out
}

/// Exact weighted convolution: row `i` is `(1/N) Σ_j w_j K(x_i − x_j)`.
pub fn naive_weighted_convolution(
    spec: &KernelSpec,
    ensemble: &ParticleEnsemble,
    weights: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    spec.validate()?;
    if weights.nrows() != ensemble.len() {
        return Err(Error::Shape(format!(
            "weights have {} rows for {} particles",
            weights.nrows(),
            ensemble.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Parameter("weights must be finite".into()));
    }
    Ok(naive_weighted_convolution_counted(spec, ensemble.states(), weights, &OpCounter::new()))
}

pub fn naive_weighted_convolution_counted(
    spec: &KernelSpec,
    states: ArrayView2<'_, f64>,
    weights: ArrayView2<'_, f64>,
    counter: &OpCounter,
) -> Array2<f64> {
    let n = states.nrows();
    let d = states.ncols();
    let k = weights.ncols();
    let inv_n = 1.0 / n as f64;
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        let xi = states.row(i);
        let mut row = out.row_mut(i);
        for j in 0..n {
            let xj = states.row(j);
            let mut r2 = 0.0;
            for c in 0..d {
                let dc = xi[c] - xj[c];
                r2 += dc * dc;
            }
            let kij = spec.value_sq(r2);
            let wj = weights.row(j);
            for c in 0..k {
                row[c] += kij * wj[c];
            }
        }
        row.mapv_inplace(|v| v * inv_n);
    }
    counter.add_kernel_evals((n * n) as u64);
    out
}

/// Exact alignment vectors `A_i = (1/N) Σ_j K(p_i − p_j)(v_i − v_j)`.
pub fn naive_alignment_counted(
    spec: &KernelSpec,
    positions: ArrayView2<'_, f64>,
    velocities: ArrayView2<'_, f64>,
    counter: &OpCounter,
) -> Array2<f64> {
    let n = positions.nrows();
    let d = positions.ncols();
    let k = velocities.ncols();
    let inv_n = 1.0 / n as f64;
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        let pi = positions.row(i);
        let vi = velocities.row(i);
        let mut row = out.row_mut(i);
        for j in 0..n {
            let pj = positions.row(j);
            let mut r2 = 0.0;
            for c in 0..d {
                let dc = pi[c] - pj[c];
                r2 += dc * dc;
            }
            let kij = spec.value_sq(r2);
            let vj = velocities.row(j);
            for c in 0..k {
                row[c] += kij * (vi[c] - vj[c]);
            }
        }
        row.mapv_inplace(|v| v * inv_n);
    }
    counter.add_kernel_evals((n * n) as u64);
    out
}

/// Vector-Jacobian product of the exact convolution: `∂L/∂X` given `∂L/∂κ`.
///
/// `∂L/∂x_i = (1/N) Σ_j (g_i + g_j) ∇K(x_i − x_j)`.
pub fn naive_convolution_vjp(spec: &KernelSpec, states: ArrayView2<'_, f64>, grad: ndarray::ArrayView1<'_, f64>) -> Array2<f64> {
    let (n, d) = states.dim();
    let inv_n = 1.0 / n as f64;
    let mut out = Array2::zeros((n, d));
    let mut delta = vec![0.0; d];
    let mut dk = vec![0.0; d];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for c in 0..d {
                delta[c] = states[[i, c]] - states[[j, c]];
            }
            spec.value_and_gradient(&delta, &mut dk);
            let w = (grad[i] + grad[j]) * inv_n;
            for c in 0..d {
                out[[i, c]] += w * dk[c];
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`naive_alignment_counted`]: returns `(∂L/∂P, ∂L/∂V)`.
///
/// With `A_i = (1/N) Σ_j K_ij (v_i − v_j)`:
/// `∂L/∂v_i = (1/N) Σ_j K_ij (g_i − g_j)` and
/// `∂L/∂p_i = (1/N) Σ_j ((g_i − g_j)·(v_i − v_j)) ∇K(p_i − p_j)`.
pub fn naive_alignment_vjp(
    spec: &KernelSpec,
    positions: ArrayView2<'_, f64>,
    velocities: ArrayView2<'_, f64>,
    grad: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = positions.dim();
    let k = velocities.ncols();
    let inv_n = 1.0 / n as f64;
    let mut gp = Array2::zeros((n, d));
    let mut gv = Array2::zeros((n, k));
    let mut delta = vec![0.0; d];
    let mut dk = vec![0.0; d];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for c in 0..d {
                delta[c] = positions[[i, c]] - positions[[j, c]];
            }
            let kij = spec.value_and_gradient(&delta, &mut dk);
            let mut inner = 0.0;
            for c in 0..k {
                let dg = grad[[i, c]] - grad[[j, c]];
                gv[[i, c]] += kij * dg * inv_n;
                inner += dg * (velocities[[i, c]] - velocities[[j, c]]);
            }
            for c in 0..d {
                gp[[i, c]] += inner * dk[c] * inv_n;
            }
        }
    }
    (gp, gv)
}
