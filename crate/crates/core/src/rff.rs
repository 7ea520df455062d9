//! Random Fourier features.
//!
//! A [`FeatureBasis`] holds `M` frequencies drawn from the kernel's spectral
//! law. The induced map `Φ(x) = √(K(0)/M) (cos ω_m·x, sin ω_m·x)_m` satisfies
//! `Φ(x)ᵀΦ(y) ≈ K(x − y)`, so a convolution against the empirical measure
//! collapses to one dot product with the mean feature vector.
//!
//! Spectral samplers:
//!
//! - Gaussian: `ω ~ N(0, σ⁻² I)`.
//! - Generalized Cauchy `(1 + r^α)^(−β)`: `ω = G^(1/α) S` with
//!   `G ~ Gamma(β, 1)` and `S` isotropic α-stable.
//! - Generalized Matérn: the profile is a Gamma mixture of stretched
//!   exponentials, `K(r) = E[exp(−β (r/σ)^α / (2g))]` with `g ~ Gamma(β, 1)`,
//!   so `ω = (β / (2g))^(1/α) S / σ`.
//!
//! The isotropic α-stable vector is sub-Gaussian: `S = √(2A) z` with
//! `z ~ N(0, I)` and `A` positive (α/2)-stable (`E e^(−tA) = e^(−t^(α/2))`),
//! drawn with Kanter's representation. For α = 2, `A ≡ 1`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::counters::OpCounter;
use crate::ensemble::{ParticleEnsemble, RngStream};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;

/// Frozen spectral frequencies for one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBasis {
    spec: KernelSpec,
    /// `M x d`.
    frequencies: Array2<f64>,
    kernel_at_zero: f64,
    stream: RngStream,
}

/// Velocity-weighted mean feature vectors: a `k x 2M` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAggregate {
    pub matrix: Array2<f64>,
}

impl FeatureAggregate {
    /// `S Φ(x)` for a single feature row.
    pub fn readout(&self, features: ArrayView1<'_, f64>) -> Array1<f64> {
        self.matrix.dot(&features)
    }
}

/// Positive stable variate with Laplace transform `exp(−t^a)`, `0 < a < 1`.
fn positive_stable<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    let u: f64 = PI * rng.sample::<f64, _>(Open01);
    let e: f64 = Exp1.sample(rng);
    let left = (a * u).sin() / u.sin().powf(1.0 / a);
    let right = (((1.0 - a) * u).sin() / e).powf((1.0 - a) / a);
    left * right
}

/// Mixing scale `A` of a sub-Gaussian isotropic α-stable vector.
fn subgaussian_scale<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    if alpha == 2.0 {
        1.0
    } else {
        positive_stable(0.5 * alpha, rng)
    }
}

/// Draws one frequency vector into `out`.
fn sample_frequency<R: Rng + ?Sized>(spec: &KernelSpec, out: &mut [f64], rng: &mut R) -> Result<()> {
    for z in out.iter_mut() {
        *z = StandardNormal.sample(rng);
    }
    let scale = match *spec {
        KernelSpec::Gaussian { sigma_k } => 1.0 / sigma_k,
        KernelSpec::GeneralizedCauchy { alpha, beta } => {
            let g: f64 = gamma(beta)?.sample(rng);
            let a = subgaussian_scale(alpha, rng);
            g.powf(1.0 / alpha) * (2.0 * a).sqrt()
        }
        KernelSpec::GeneralizedMatern { sigma_k, alpha, beta } => {
            let g: f64 = gamma(beta)?.sample(rng);
            let a = subgaussian_scale(alpha, rng);
            (beta / (2.0 * g)).powf(1.0 / alpha) * (2.0 * a).sqrt() / sigma_k
        }
    };
    out.iter_mut().for_each(|z| *z *= scale);
    Ok(())
}

fn gamma(shape: f64) -> Result<Gamma<f64>> {
    Gamma::new(shape, 1.0).map_err(|e| Error::Unsupported(format!("gamma mixing with shape {shape}: {e}")))
}

impl FeatureBasis {
    /// Samples `M` frequencies in dimension `d` from the kernel's spectral law.
    pub fn sample(spec: KernelSpec, m: usize, d: usize, stream: RngStream) -> Result<Self> {
        spec.validate()?;
        if m == 0 || d == 0 {
            return Err(Error::Parameter(format!("basis needs M >= 1 and d >= 1, got M={m}, d={d}")));
        }
        let mut rng = stream.rng();
        let mut frequencies = Array2::zeros((m, d));
        for mut row in frequencies.rows_mut() {
            sample_frequency(&spec, row.as_slice_mut().expect("standard layout"), &mut rng)?;
        }
        Ok(Self { spec, frequencies, kernel_at_zero: spec.at_zero(), stream })
    }

    /// Builds a basis from explicit frequencies (e.g. loaded from disk).
    pub fn from_frequencies(spec: KernelSpec, frequencies: Array2<f64>, stream: RngStream) -> Result<Self> {
        spec.validate()?;
        if frequencies.nrows() == 0 || frequencies.ncols() == 0 {
            return Err(Error::Shape("empty frequency matrix".into()));
        }
        if frequencies.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("frequencies must be finite".into()));
        }
        Ok(Self { spec, frequencies, kernel_at_zero: spec.at_zero(), stream })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn frequencies(&self) -> ArrayView2<'_, f64> {
        self.frequencies.view()
    }

    /// Number of sampled frequencies `M`; the feature dimension is `2M`.
    pub fn m(&self) -> usize {
        self.frequencies.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.m()
    }

    pub fn kernel_at_zero(&self) -> f64 {
        self.kernel_at_zero
    }

    pub fn stream(&self) -> RngStream {
        self.stream
    }

    fn amplitude(&self) -> f64 {
        (self.kernel_at_zero / self.m() as f64).sqrt()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::Shape(format!("states have dimension {d}, basis has {}", self.dim())));
        }
        Ok(())
    }

    /// `N x 2M` feature matrix (cosine block, then sine block).
    pub fn features(&self, states: ArrayView2<'_, f64>, counter: &OpCounter) -> Array2<f64> {
        let (n, d) = states.dim();
        let m = self.m();
        let amp = self.amplitude();
        let proj = states.dot(&self.frequencies.t());
        counter.add_feature_madds((n * m * d) as u64);
        let mut phi = Array2::zeros((n, 2 * m));
        for (z_row, mut phi_row) in proj.rows().into_iter().zip(phi.rows_mut()) {
            let (cos_block, sin_block) = phi_row.as_slice_mut().expect("standard layout").split_at_mut(m);
            for ((z, c), s) in z_row.iter().zip(cos_block).zip(sin_block) {
                let (sn, cs) = z.sin_cos();
                *c = amp * cs;
                *s = amp * sn;
            }
        }
        phi
    }

    /// Pulls a gradient with respect to the features back to the states.
    pub fn features_vjp(&self, phi: ArrayView2<'_, f64>, grad_phi: ArrayView2<'_, f64>) -> Array2<f64> {
        let m = self.m();
        let n = phi.nrows();
        // dΦc/dz = −Φs, dΦs/dz = Φc
        let mut q = Array2::zeros((n, m));
        for i in 0..n {
            let p = phi.row(i);
            let g = grad_phi.row(i);
            let mut qi = q.row_mut(i);
            for k in 0..m {
                qi[k] = -p[m + k] * g[k] + p[k] * g[m + k];
            }
        }
        q.dot(&self.frequencies)
    }
}

/// Samples a feature basis; see [`FeatureBasis::sample`].
pub fn sample_basis(spec: KernelSpec, m: usize, d: usize, stream: RngStream) -> Result<FeatureBasis> {
    FeatureBasis::sample(spec, m, d, stream)
}

/// Row `i` is `Φ(x_i)`.
pub fn feature_map(basis: &FeatureBasis, ensemble: &ParticleEnsemble) -> Result<Array2<f64>> {
    basis.check_dim(ensemble.dim())?;
    Ok(basis.features(ensemble.states(), &OpCounter::new()))
}

/// `κ_i = Φ(x_i)ᵀ φ̄` with `φ̄ = (1/N) Σ_j Φ(x_j)`. Not clamped.
pub fn fast_convolution(basis: &FeatureBasis, ensemble: &ParticleEnsemble) -> Result<Array1<f64>> {
    basis.check_dim(ensemble.dim())?;
    Ok(fast_convolution_counted(basis, ensemble.states(), &OpCounter::new()))
}

pub fn fast_convolution_counted(basis: &FeatureBasis, states: ArrayView2<'_, f64>, counter: &OpCounter) -> Array1<f64> {
    fast_convolution_with_features(basis, states, counter).0
}

/// [`fast_convolution_counted`] that also returns the `N x 2M` feature matrix.
pub fn fast_convolution_with_features(
    basis: &FeatureBasis,
    states: ArrayView2<'_, f64>,
    counter: &OpCounter,
) -> (Array1<f64>, Array2<f64>) {
    let phi = basis.features(states, counter);
    let mean = mean_rows(phi.view(), counter);
    (readout_dot(phi.view(), mean.view(), counter), phi)
}

/// Vector-Jacobian product of [`fast_convolution_counted`]: `∂L/∂X` given `∂L/∂κ`.
pub fn fast_convolution_vjp(basis: &FeatureBasis, states: ArrayView2<'_, f64>, grad: ArrayView1<'_, f64>) -> Array2<f64> {
    let phi = basis.features(states, &OpCounter::new());
    fast_convolution_vjp_from_features(basis, phi.view(), grad)
}

/// [`fast_convolution_vjp`] with the feature matrix of the forward pass supplied.
pub fn fast_convolution_vjp_from_features(basis: &FeatureBasis, phi: ArrayView2<'_, f64>, grad: ArrayView1<'_, f64>) -> Array2<f64> {
    let n = phi.nrows() as f64;
    let mean = phi.mean_axis(Axis(0)).expect("non-empty");
    // ψ = (1/N) Σ_j g_j Φ_j
    let psi = grad.dot(&phi) / n;
    let mut grad_phi = Array2::zeros(phi.raw_dim());
    for (gi, mut row) in grad.iter().zip(grad_phi.rows_mut()) {
        row.assign(&psi);
        row.scaled_add(*gi, &mean);
    }
    basis.features_vjp(phi, grad_phi.view())
}

fn mean_rows(phi: ArrayView2<'_, f64>, counter: &OpCounter) -> Array1<f64> {
    let (n, f) = phi.dim();
    let mut acc = Array1::zeros(f);
    for row in phi.rows() {
        acc += &row;
    }
    counter.add_feature_madds((n * f) as u64);
    acc / n as f64
}

fn readout_dot(phi: ArrayView2<'_, f64>, v: ArrayView1<'_, f64>, counter: &OpCounter) -> Array1<f64> {
    counter.add_feature_madds(phi.len() as u64);
    phi.dot(&v)
}

/// `S = (1/N) Σ_j w_jᵀ Φ(p_j)`, a `k x 2M` matrix.
pub fn aggregate(basis: &FeatureBasis, positions: &ParticleEnsemble, weights: ArrayView2<'_, f64>) -> Result<FeatureAggregate> {
    basis.check_dim(positions.dim())?;
    if weights.nrows() != positions.len() {
        return Err(Error::Shape(format!("{} weight rows for {} particles", weights.nrows(), positions.len())));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Parameter("weights must be finite".into()));
    }
    let counter = OpCounter::new();
    let phi = basis.features(positions.states(), &counter);
    Ok(aggregate_features(phi.view(), weights, &counter))
}

fn aggregate_features(phi: ArrayView2<'_, f64>, weights: ArrayView2<'_, f64>, counter: &OpCounter) -> FeatureAggregate {
    let n = phi.nrows() as f64;
    counter.add_feature_madds((weights.len() * phi.ncols()) as u64);
    FeatureAggregate { matrix: weights.t().dot(&phi) / n }
}

/// Alignment vectors `A_i = v_i ⊙ (S₀Φ(p_i)) − S₁Φ(p_i)` through the two aggregates.
pub fn alignment_vectors(
    basis: &FeatureBasis,
    positions: &ParticleEnsemble,
    velocities: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    basis.check_dim(positions.dim())?;
    if velocities.nrows() != positions.len() {
        return Err(Error::Shape(format!("{} velocities for {} positions", velocities.nrows(), positions.len())));
    }
    Ok(alignment_vectors_counted(basis, positions.states(), velocities, &OpCounter::new()))
}

pub fn alignment_vectors_counted(
    basis: &FeatureBasis,
    positions: ArrayView2<'_, f64>,
    velocities: ArrayView2<'_, f64>,
    counter: &OpCounter,
) -> Array2<f64> {
    alignment_vectors_with_features(basis, positions, velocities, counter).0
}

/// [`alignment_vectors_counted`] that also returns the `N x 2M` feature matrix.
pub fn alignment_vectors_with_features(
    basis: &FeatureBasis,
    positions: ArrayView2<'_, f64>,
    velocities: ArrayView2<'_, f64>,
    counter: &OpCounter,
) -> (Array2<f64>, Array2<f64>) {
    let phi = basis.features(positions, counter);
    let s0 = mean_rows(phi.view(), counter);
    let s1 = aggregate_features(phi.view(), velocities, counter);
    let kappa = readout_dot(phi.view(), s0.view(), counter);
    counter.add_feature_madds((s1.matrix.len() * phi.nrows()) as u64);
    let mut out = phi.dot(&s1.matrix.t());
    out.zip_mut_with(&velocities, |a, v| *a = -*a + *v);
    for (mut row, (k, v)) in out.rows_mut().into_iter().zip(kappa.iter().zip(velocities.rows())) {
        // row currently holds v − S₁Φ; fix the first term to v ⊙ κ
        row.zip_mut_with(&v, |a, vi| *a += vi * (k - 1.0));
    }
    (out, phi)
}

/// Vector-Jacobian product of [`alignment_vectors_counted`]: returns `(∂L/∂P, ∂L/∂V)`.
pub fn alignment_vectors_vjp(
    basis: &FeatureBasis,
    positions: ArrayView2<'_, f64>,
    velocities: ArrayView2<'_, f64>,
    grad: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let phi = basis.features(positions, &OpCounter::new());
    alignment_vectors_vjp_from_features(basis, phi.view(), velocities, grad)
}

/// [`alignment_vectors_vjp`] with the feature matrix of the forward pass supplied.
pub fn alignment_vectors_vjp_from_features(
    basis: &FeatureBasis,
    phi: ArrayView2<'_, f64>,
    velocities: ArrayView2<'_, f64>,
    grad: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let n = phi.nrows() as f64;
    let s0 = phi.mean_axis(Axis(0)).expect("non-empty");
    let s1 = velocities.t().dot(&phi) / n;
    let t = grad.t().dot(&phi) / n;
    let gv: Array1<f64> = (&grad * &velocities).sum_axis(Axis(1));
    let u = gv.dot(&phi) / n;
    let kappa = phi.dot(&s0);

    // ∂L/∂Φ_i = (g_i·v_i) S₀ + u − S₁ᵀ g_i − Tᵀ v_i
    let mut grad_phi = grad.dot(&s1) + velocities.dot(&t);
    grad_phi.mapv_inplace(|x| -x);
    for (mut row, gvi) in grad_phi.rows_mut().into_iter().zip(gv.iter()) {
        row += &u;
        row.scaled_add(*gvi, &s0);
    }
    let grad_p = basis.features_vjp(phi, grad_phi.view());

    // ∂L/∂V_i = g_i κ_i − T Φ_i
    let mut grad_v = phi.dot(&t.t());
    grad_v.mapv_inplace(|x| -x);
    for ((mut row, g), k) in grad_v.rows_mut().into_iter().zip(grad.rows()).zip(kappa.iter()) {
        row.scaled_add(*k, &g);
    }
    (grad_p, grad_v)
}

/// On-disk form of a basis: the kernel spec, the stream it was drawn from and the frequencies.
#[derive(Debug, Serialize, Deserialize)]
struct BasisHeader {
    kernel: KernelSpec,
    m: usize,
    d: usize,
    seed: u64,
    stream: u64,
}

impl FeatureBasis {
    /// Writes the basis as CSV: a `#`-prefixed JSON header line, then one frequency per row.
    pub fn to_csv(&self) -> String {
        let header = BasisHeader {
            kernel: self.spec,
            m: self.m(),
            d: self.dim(),
            seed: self.stream.seed,
            stream: self.stream.stream,
        };
        let mut out = format!("# {}\n", serde_json::to_string(&header).expect("header serializes"));
        let cols: Vec<String> = (0..self.dim()).map(|k| format!("w{k}")).collect();
        out.push_str(&cols.join(","));
        out.push('\n');
        for row in self.frequencies.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header_line = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| Error::Config("basis file missing header line".into()))?;
        let header: BasisHeader =
            serde_json::from_str(header_line).map_err(|e| Error::Config(format!("basis header: {e}")))?;
        lines.next();
        let mut flat = Vec::with_capacity(header.m * header.d);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            for cell in line.split(',') {
                flat.push(
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("basis value {cell:?}: {e}")))?,
                );
            }
        }
        let frequencies = Array2::from_shape_vec((header.m, header.d), flat)
            .map_err(|e| Error::Shape(format!("basis body does not match header: {e}")))?;
        Self::from_frequencies(header.kernel, frequencies, RngStream::new(header.seed, header.stream))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Monte-Carlo estimate `(1/M) Σ_m cos(ω_m·δ)` of `K(δ)/K(0)`.
pub fn bochner_estimate(basis: &FeatureBasis, delta: &[f64]) -> f64 {
    let delta = ArrayView1::from(delta);
    let s: f64 = basis.frequencies.rows().into_iter().map(|w| w.dot(&delta).cos()).sum();
    basis.kernel_at_zero * s / basis.m() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::InitialLaw;
    use crate::kernels::{naive_alignment_counted, naive_convolution, naive_weighted_convolution};
    use proptest::prelude::{prop, prop_assert, proptest};

    fn cloud(n: usize, d: usize, std: f64, seed: u64) -> ParticleEnsemble {
        let law = InitialLaw::isotropic(vec![0.0; d], std);
        ParticleEnsemble::new(law.sample(n, &mut RngStream::new(seed, 99).rng()).unwrap()).unwrap()
    }

    #[test]
    fn gaussian_frequency_variance() {
        let basis = sample_basis(KernelSpec::Gaussian { sigma_k: 0.3 }, 100_000, 2, RngStream::new(1, 1)).unwrap();
        for col in basis.frequencies().columns() {
            let var = col.iter().map(|w| w * w).sum::<f64>() / col.len() as f64;
            let target = 1.0 / 0.09;
            assert!(var >= target * 0.985 && var <= target * 1.015, "variance {var}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = KernelSpec::GeneralizedMatern { sigma_k: 0.3, alpha: 1.9, beta: 1.5 };
        let a = sample_basis(spec, 64, 3, RngStream::new(5, 2)).unwrap();
        let b = sample_basis(spec, 64, 3, RngStream::new(5, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cauchy_bochner_identity() {
        let m = 20_000;
        let basis = sample_basis(KernelSpec::cauchy(), m, 2, RngStream::new(3, 0)).unwrap();
        let est = bochner_estimate(&basis, &[0.6, 0.8]);
        assert!((est - 0.5).abs() <= 3.0 / (m as f64).sqrt(), "estimate {est}");
    }

    #[test]
    fn feature_map_examples() {
        let m = 16;
        let basis = sample_basis(KernelSpec::Gaussian { sigma_k: 0.3 }, m, 2, RngStream::new(0, 0)).unwrap();
        let ens = ParticleEnsemble::from_rows(&[vec![0.0, 0.0], vec![0.7, -2.1]]).unwrap();
        let phi = feature_map(&basis, &ens).unwrap();
        let amp = (1.0 / m as f64).sqrt();
        for k in 0..m {
            assert_eq!(phi[[0, k]], amp);
            assert_eq!(phi[[0, m + k]], 0.0);
        }
        for row in phi.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.abs() <= amp));
        }
        let wrong = ParticleEnsemble::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(feature_map(&basis, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn feature_inner_product_approximates_kernel() {
        let m = 4096;
        let spec = KernelSpec::Gaussian { sigma_k: 0.3 };
        let basis = sample_basis(spec, m, 2, RngStream::new(8, 0)).unwrap();
        let mut rng = RngStream::new(8, 1).rng();
        for _ in 0..20 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ens = ParticleEnsemble::from_rows(&[x.clone(), y.clone()]).unwrap();
            let phi = feature_map(&basis, &ens).unwrap();
            let approx = phi.row(0).dot(&phi.row(1));
            let exact = spec.eval(&[x[0] - y[0], x[1] - y[1]]).unwrap();
            assert!((approx - exact).abs() <= 5.0 / (m as f64).sqrt());
        }
    }

    #[test]
    fn fast_convolution_examples() {
        let spec = KernelSpec::Gaussian { sigma_k: 0.3 };
        let m = 4096;
        let basis = sample_basis(spec, m, 2, RngStream::new(4, 0)).unwrap();
        let same = ParticleEnsemble::from_rows(&vec![vec![0.4, -0.2]; 5]).unwrap();
        for v in fast_convolution(&basis, &same).unwrap() {
            assert!((v - 1.0).abs() < 1e-10);
        }
        let one = ParticleEnsemble::from_rows(&[vec![3.0, 1.0]]).unwrap();
        assert!((fast_convolution(&basis, &one).unwrap()[0] - 1.0).abs() < 1e-10);

        let ens = cloud(200, 2, 0.5, 1);
        let fast = fast_convolution(&basis, &ens).unwrap();
        let exact = naive_convolution(&spec, &ens).unwrap();
        let gap = (&fast - &exact).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
        assert!(gap <= 8.0 / (m as f64).sqrt(), "gap {gap}");
    }

    #[test]
    fn aggregate_examples() {
        let m = 16_384;
        let spec = KernelSpec::GeneralizedCauchy { alpha: 2.0, beta: 10.0 };
        let basis = sample_basis(spec, m, 2, RngStream::new(6, 0)).unwrap();
        let pos = cloud(50, 2, 0.5, 3);
        let ones = Array2::ones((50, 1));
        let s0 = aggregate(&basis, &pos, ones.view()).unwrap();
        let phi = feature_map(&basis, &pos).unwrap();
        let mean = phi.mean_axis(Axis(0)).unwrap();
        for (a, b) in s0.matrix.row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-14);
        }

        let w = cloud(50, 3, 1.0, 4).into_inner();
        let s = aggregate(&basis, &pos, w.view()).unwrap();
        let exact = naive_weighted_convolution(&spec, &pos, w.view()).unwrap();
        for i in 0..50 {
            let approx = s.readout(phi.row(i));
            for c in 0..3 {
                assert!((approx[c] - exact[[i, c]]).abs() <= 8.0 / (m as f64).sqrt());
            }
        }

        let single = ParticleEnsemble::from_rows(&[vec![0.3, 0.9]]).unwrap();
        let v = ndarray::array![[1.0, -2.0, 0.5]];
        let s1 = aggregate(&basis, &single, v.view()).unwrap();
        let out = s1.readout(feature_map(&basis, &single).unwrap().row(0));
        for c in 0..3 {
            assert!((out[c] - v[[0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_examples() {
        let m = 16_384;
        let spec = KernelSpec::cauchy();
        let basis = sample_basis(spec, m, 2, RngStream::new(9, 0)).unwrap();

        let pos = ParticleEnsemble::from_rows(&vec![vec![1.0, 2.0]; 6]).unwrap();
        let vel = Array2::from_elem((6, 2), 0.7);
        let a = alignment_vectors(&basis, &pos, vel.view()).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-10));

        let single = ParticleEnsemble::from_rows(&[vec![-1.0, 0.5]]).unwrap();
        let a = alignment_vectors(&basis, &single, ndarray::array![[3.0, -4.0]].view()).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-10));

        let pos = cloud(40, 2, 0.5, 10);
        let vel = cloud(40, 2, 1.0, 11).into_inner();
        let approx = alignment_vectors(&basis, &pos, vel.view()).unwrap();
        let exact = naive_alignment_counted(&spec, pos.states(), vel.view(), &OpCounter::new());
        let tol = 10.0 / (m as f64).sqrt();
        for (a, e) in approx.iter().zip(exact.iter()) {
            assert!((a - e).abs() <= tol, "{a} vs {e}");
        }
    }

    fn directional_fd<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>, dir: &Array2<f64>, h: f64) -> f64 {
        (f(&(x + &(dir * h))) - f(&(x - &(dir * h)))) / (2.0 * h)
    }

    #[test]
    fn fast_convolution_gradient_matches_finite_differences() {
        let basis = sample_basis(KernelSpec::Gaussian { sigma_k: 0.3 }, 64, 2, RngStream::new(2, 0)).unwrap();
        let x = cloud(7, 2, 0.4, 5).into_inner();
        let g = ndarray::array![0.3, -1.0, 0.5, 2.0, 0.1, -0.7, 1.2];
        let loss = |x: &Array2<f64>| fast_convolution_counted(&basis, x.view(), &OpCounter::new()).dot(&g);
        let grad = fast_convolution_vjp(&basis, x.view(), g.view());
        let dir = cloud(7, 2, 1.0, 6).into_inner();
        let fd = directional_fd(loss, &x, &dir, 1e-5);
        let an = (&grad * &dir).sum();
        assert!((fd - an).abs() <= 1e-7 * an.abs().max(1.0), "{fd} vs {an}");
    }

    #[test]
    fn alignment_gradient_matches_finite_differences() {
        let basis = sample_basis(KernelSpec::cauchy(), 48, 2, RngStream::new(2, 1)).unwrap();
        let p = cloud(6, 2, 0.6, 7).into_inner();
        let v = cloud(6, 2, 1.0, 8).into_inner();
        let g = cloud(6, 2, 1.0, 9).into_inner();
        let (gp, gv) = alignment_vectors_vjp(&basis, p.view(), v.view(), g.view());
        let dp = cloud(6, 2, 1.0, 12).into_inner();
        let dv = cloud(6, 2, 1.0, 13).into_inner();
        let fp = |p: &Array2<f64>| (alignment_vectors_counted(&basis, p.view(), v.view(), &OpCounter::new()) * &g).sum();
        let fv = |v: &Array2<f64>| (alignment_vectors_counted(&basis, p.view(), v.view(), &OpCounter::new()) * &g).sum();
        let fd_p = directional_fd(fp, &p, &dp, 1e-5);
        let fd_v = directional_fd(fv, &v, &dv, 1e-5);
        assert!((fd_p - (&gp * &dp).sum()).abs() < 1e-7 * fd_p.abs().max(1.0));
        assert!((fd_v - (&gv * &dv).sum()).abs() < 1e-7 * fd_v.abs().max(1.0));
    }

    #[test]
    fn counters_scale_linearly() {
        let basis = sample_basis(KernelSpec::Gaussian { sigma_k: 0.3 }, 32, 2, RngStream::new(0, 0)).unwrap();
        let c1 = OpCounter::new();
        fast_convolution_counted(&basis, cloud(100, 2, 0.5, 0).states(), &c1);
        let c2 = OpCounter::new();
        fast_convolution_counted(&basis, cloud(200, 2, 0.5, 0).states(), &c2);
        assert_eq!(c2.feature_madds(), 2 * c1.feature_madds());
        assert_eq!(c1.feature_madds(), 100 * 32 * (2 + 4));
        assert_eq!(c1.kernel_evals(), 0);
    }

    #[test]
    fn csv_round_trip() {
        let spec = KernelSpec::GeneralizedMatern { sigma_k: 0.3, alpha: 1.9, beta: 1.5 };
        let basis = sample_basis(spec, 33, 3, RngStream::new(12, 4)).unwrap();
        let back = FeatureBasis::from_csv(&basis.to_csv()).unwrap();
        assert_eq!(basis, back);
        assert!(FeatureBasis::from_csv("garbage").is_err());
    }

    #[test]
    fn bochner_unbiased_for_every_sampler() {
        let m = 100_000;
        let specs = [
            KernelSpec::Gaussian { sigma_k: 0.3 },
            KernelSpec::GeneralizedMatern { sigma_k: 0.3, alpha: 2.0, beta: 1.5 },
            KernelSpec::GeneralizedMatern { sigma_k: 0.3, alpha: 1.9, beta: 1.5 },
            KernelSpec::GeneralizedMatern { sigma_k: 0.5, alpha: 1.2, beta: 3.3 },
            KernelSpec::cauchy(),
            KernelSpec::GeneralizedCauchy { alpha: 2.0, beta: 10.0 },
            KernelSpec::GeneralizedCauchy { alpha: 0.8, beta: 0.6 },
        ];
        let mut rng = RngStream::new(77, 0).rng();
        for (s, spec) in specs.iter().enumerate() {
            let basis = sample_basis(*spec, m, 2, RngStream::new(21, s as u64)).unwrap();
            for _ in 0..10 {
                let delta = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
                let est = bochner_estimate(&basis, &delta);
                let exact = spec.eval(&delta).unwrap();
                assert!((est - exact).abs() <= 4.0 / (m as f64).sqrt(), "{spec:?} {delta:?}: {est} vs {exact}");
            }
        }
    }

    proptest! {
        #[test]
        fn self_energy_is_exact(x in prop::collection::vec(-50.0f64..50.0, 3), seed in 0u64..1000) {
            let basis = sample_basis(KernelSpec::GeneralizedCauchy { alpha: 1.5, beta: 2.0 }, 37, 3, RngStream::new(seed, 0)).unwrap();
            let ens = ParticleEnsemble::from_rows(&[x]).unwrap();
            let phi = feature_map(&basis, &ens).unwrap();
            prop_assert!((phi.row(0).dot(&phi.row(0)) - 1.0).abs() < 1e-10);
        }

        #[test]
        fn aggregate_is_linear(seed in 0u64..1000) {
            let basis = sample_basis(KernelSpec::Gaussian { sigma_k: 0.5 }, 20, 2, RngStream::new(seed, 0)).unwrap();
            let pos = cloud(9, 2, 1.0, seed);
            let w1 = cloud(9, 3, 1.0, seed + 1).into_inner();
            let w2 = cloud(9, 3, 1.0, seed + 2).into_inner();
            let sum = aggregate(&basis, &pos, (&w1 + &w2).view()).unwrap().matrix;
            let parts = aggregate(&basis, &pos, w1.view()).unwrap().matrix + aggregate(&basis, &pos, w2.view()).unwrap().matrix;
            prop_assert!(sum.iter().zip(parts.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }
}
