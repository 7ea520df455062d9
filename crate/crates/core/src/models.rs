//! The two control problems: crowd motion and flocking.
//!
//! Each model supplies a drift, a running cost and a terminal cost over
//! `(t, state, control, interaction)`. The interaction is the kernel
//! convolution `κ_i` (crowd) or the alignment vector `A_i` (flocking),
//! computed either exactly in O(N²) or through random features in O(NM).
//!
//! Under the feature backend `κ_i` can dip slightly below zero; the costs
//! are evaluated as-is without clamping.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::counters::OpCounter;
use crate::diffnet::{CustomOp, Graph};
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::kernels::{
    naive_alignment_counted, naive_alignment_vjp, naive_convolution_counted, naive_convolution_vjp, KernelSpec,
};
use crate::rff::{
    alignment_vectors_counted, alignment_vectors_vjp_from_features, alignment_vectors_with_features,
    fast_convolution_counted, fast_convolution_vjp_from_features, fast_convolution_with_features, FeatureBasis,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Crowd,
    Flocking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Naive,
    Rff,
}

/// Congestion penalty `φ(κ)` of the crowd model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Congestion {
    /// `λ κ`
    Linear,
    /// `λ κ²`
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalCost {
    /// `min_k ‖p − target_k‖²` over the position block.
    NearestTarget,
    /// `g ≡ 0`
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Crowd: the state itself (must be 2). Flocking: the position block; the state is `(p, v)`.
    pub position_dim: usize,
    pub sigma: f64,
    pub lambda: f64,
    pub congestion: Congestion,
    pub terminal: TerminalCost,
    pub targets: Vec<Vec<f64>>,
    pub kernel: KernelSpec,
    pub backend: Backend,
}

impl ModelSpec {
    /// Crowd model defaults: `σ = 0.1`, `λ = 5`, Gaussian kernel `σ_K = 0.3`, target `(1, 1)`.
    pub fn crowd() -> Self {
        Self {
            kind: ModelKind::Crowd,
            position_dim: 2,
            sigma: 0.1,
            lambda: 5.0,
            congestion: Congestion::Linear,
            terminal: TerminalCost::NearestTarget,
            targets: vec![vec![1.0, 1.0]],
            kernel: KernelSpec::Gaussian { sigma_k: 0.3 },
            backend: Backend::Rff,
        }
    }

    /// Planar flocking with Cauchy interactions and targets at `(±2, 0)`.
    pub fn flocking() -> Self {
        Self {
            kind: ModelKind::Flocking,
            position_dim: 2,
            sigma: 0.1,
            lambda: 5.0,
            congestion: Congestion::Linear,
            terminal: TerminalCost::NearestTarget,
            targets: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            kernel: KernelSpec::GeneralizedCauchy { alpha: 2.0, beta: 10.0 },
            backend: Backend::Rff,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            ModelKind::Crowd => self.position_dim,
            ModelKind::Flocking => 2 * self.position_dim,
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.position_dim
    }

    pub fn action_dim(&self) -> usize {
        self.position_dim
    }

    /// Width of the interaction value per particle.
    pub fn interaction_dim(&self) -> usize {
        match self.kind {
            ModelKind::Crowd => 1,
            ModelKind::Flocking => self.position_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.kind == ModelKind::Crowd && self.position_dim != 2 {
            return Err(Error::Parameter(format!("crowd model is planar (d = m = 2), got d = {}", self.position_dim)));
        }
        if self.position_dim == 0 {
            return Err(Error::Parameter("position dimension must be >= 1".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Parameter(format!("volatility must be >= 0, got {}", self.sigma)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Parameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.terminal == TerminalCost::NearestTarget {
            if self.targets.is_empty() {
                return Err(Error::Parameter("nearest-target terminal cost needs at least one target".into()));
            }
            if let Some(t) = self.targets.iter().find(|t| t.len() != self.position_dim) {
                return Err(Error::Shape(format!("target {t:?} does not have {} coordinates", self.position_dim)));
            }
        }
        Ok(())
    }

    fn position_view<'a>(&self, states: ArrayView2<'a, f64>) -> ArrayView2<'a, f64> {
        states.slice_move(s![.., ..self.position_dim])
    }
}

/// Per-particle interaction values for one time step.
#[derive(Debug, Clone, PartialEq)]
pub enum InteractionValue {
    /// `κ_i`, one per particle.
    Convolution(Array1<f64>),
    /// `A_i`, one row per particle.
    Alignment(Array2<f64>),
}

/// Interaction of a single particle.
#[derive(Debug, Clone, Copy)]
pub enum Interaction<'a> {
    Convolution(f64),
    Alignment(&'a [f64]),
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what} has {got} entries, expected {want}")));
    }
    Ok(())
}

/// Drift `b(t, x, a)`: the control itself (crowd) or `(v, a)` (flocking).
pub fn drift(model: &ModelSpec, _t: f64, state: &[f64], control: &[f64], _interaction: Interaction<'_>) -> Result<Vec<f64>> {
    check_len("state", state.len(), model.state_dim())?;
    check_len("control", control.len(), model.action_dim())?;
    Ok(match model.kind {
        ModelKind::Crowd => control.to_vec(),
        ModelKind::Flocking => {
            let k = model.position_dim;
            let mut out = state[k..].to_vec();
            out.extend_from_slice(control);
            out
        }
    })
}

/// Running cost `½‖a‖² + φ(κ)` (crowd) or `½‖a‖² + (λ/2)‖A‖²` (flocking).
pub fn running_cost(model: &ModelSpec, _t: f64, state: &[f64], control: &[f64], interaction: Interaction<'_>) -> Result<f64> {
    check_len("state", state.len(), model.state_dim())?;
    check_len("control", control.len(), model.action_dim())?;
    let effort = 0.5 * control.iter().map(|a| a * a).sum::<f64>();
    match (model.kind, interaction) {
        (ModelKind::Crowd, Interaction::Convolution(kappa)) => Ok(effort
            + match model.congestion {
                Congestion::Linear => model.lambda * kappa,
                Congestion::Quadratic => model.lambda * kappa * kappa,
            }),
        (ModelKind::Flocking, Interaction::Alignment(a)) => {
            check_len("alignment vector", a.len(), model.position_dim)?;
            Ok(effort + 0.5 * model.lambda * a.iter().map(|x| x * x).sum::<f64>())
        }
        (kind, _) => Err(Error::Shape(format!("wrong interaction kind for {kind:?} model"))),
    }
}

/// Terminal cost on the position block.
pub fn terminal_cost(model: &ModelSpec, state: &[f64]) -> Result<f64> {
    check_len("state", state.len(), model.state_dim())?;
    Ok(match model.terminal {
        TerminalCost::None => 0.0,
        TerminalCost::NearestTarget => nearest_target_sq(&model.targets, &state[..model.position_dim]).0,
    })
}

fn nearest_target_sq(targets: &[Vec<f64>], p: &[f64]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (k, t) in targets.iter().enumerate() {
        let d2: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best.0 {
            best = (d2, k);
        }
    }
    best
}

/// Interaction values for the whole ensemble under the model's backend.
pub fn compute_interactions(
    model: &ModelSpec,
    ensemble: &ParticleEnsemble,
    basis: Option<&FeatureBasis>,
) -> Result<InteractionValue> {
    model.validate()?;
    check_len("state dimension", ensemble.dim(), model.state_dim())?;
    let counter = OpCounter::new();
    let backend = InteractionBackend::new(model, basis, Rc::new(counter))?;
    Ok(backend.evaluate(ensemble.states()))
}

/// Resolved interaction path for one model: the kernel or the feature basis.
#[derive(Clone)]
pub struct InteractionBackend {
    kind: ModelKind,
    position_dim: usize,
    path: Path,
    counter: Rc<OpCounter>,
}

#[derive(Clone)]
enum Path {
    Naive(KernelSpec),
    Rff(Rc<FeatureBasis>),
}

impl InteractionBackend {
    pub fn new(model: &ModelSpec, basis: Option<&FeatureBasis>, counter: Rc<OpCounter>) -> Result<Self> {
        let path = match model.backend {
            Backend::Naive => Path::Naive(model.kernel),
            Backend::Rff => {
                let basis = basis.ok_or_else(|| Error::Parameter("feature backend requires a basis".into()))?;
                if basis.spec() != &model.kernel {
                    return Err(Error::Parameter(format!(
                        "basis was sampled for {:?}, model uses {:?}",
                        basis.spec(),
                        model.kernel
                    )));
                }
                if basis.dim() != model.position_dim {
                    return Err(Error::Shape(format!(
                        "basis dimension {} does not match position dimension {}",
                        basis.dim(),
                        model.position_dim
                    )));
                }
                Path::Rff(Rc::new(basis.clone()))
            }
        };
        Ok(Self { kind: model.kind, position_dim: model.position_dim, path, counter })
    }

    /// Exact backend regardless of the model's setting.
    pub fn naive(model: &ModelSpec, counter: Rc<OpCounter>) -> Self {
        Self { kind: model.kind, position_dim: model.position_dim, path: Path::Naive(model.kernel), counter }
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    fn evaluate(&self, states: ArrayView2<'_, f64>) -> InteractionValue {
        let k = self.position_dim;
        match self.kind {
            ModelKind::Crowd => InteractionValue::Convolution(match &self.path {
                Path::Naive(spec) => naive_convolution_counted(spec, states, &self.counter),
                Path::Rff(basis) => fast_convolution_counted(basis, states, &self.counter),
            }),
            ModelKind::Flocking => {
                let p = states.slice(s![.., ..k]);
                let v = states.slice(s![.., k..]);
                InteractionValue::Alignment(match &self.path {
                    Path::Naive(spec) => naive_alignment_counted(spec, p, v, &self.counter),
                    Path::Rff(basis) => alignment_vectors_counted(basis, p, v, &self.counter),
                })
            }
        }
    }

    /// Adds the interaction node for `states` (`N x d`) to a graph: `N x 1` or `N x k`.
    pub fn on_graph<G: Graph>(&self, graph: &mut G, states: &G::Var) -> G::Var {
        let op: Rc<dyn CustomOp> = match self.kind {
            ModelKind::Crowd => Rc::new(ConvolutionOp {
                path: self.path.clone(),
                counter: self.counter.clone(),
                features: RefCell::new(None),
            }),
            ModelKind::Flocking => Rc::new(AlignmentOp {
                path: self.path.clone(),
                position_dim: self.position_dim,
                counter: self.counter.clone(),
                features: RefCell::new(None),
            }),
        };
        graph.custom(op, &[states])
    }
}

/// Each op instance is applied once; under the feature path it keeps the
/// forward feature matrix for its backward pass.
struct ConvolutionOp {
    path: Path,
    counter: Rc<OpCounter>,
    features: RefCell<Option<Array2<f64>>>,
}

impl CustomOp for ConvolutionOp {
    fn name(&self) -> &'static str {
        "convolution"
    }

    fn forward(&self, inputs: &[&Array2<f64>]) -> Array2<f64> {
        let x = inputs[0].view();
        let kappa = match &self.path {
            Path::Naive(spec) => naive_convolution_counted(spec, x, &self.counter),
            Path::Rff(basis) => {
                let (kappa, phi) = fast_convolution_with_features(basis, x, &self.counter);
                *self.features.borrow_mut() = Some(phi);
                kappa
            }
        };
        kappa.insert_axis(ndarray::Axis(1))
    }

    fn backward(&self, inputs: &[&Array2<f64>], _output: &Array2<f64>, grad: &Array2<f64>) -> Vec<Array2<f64>> {
        let x = inputs[0].view();
        let g = grad.column(0);
        vec![match &self.path {
            Path::Naive(spec) => naive_convolution_vjp(spec, x, g),
            Path::Rff(basis) => {
                let phi = self.features.borrow();
                let phi = phi.as_ref().expect("forward runs before backward");
                fast_convolution_vjp_from_features(basis, phi.view(), g)
            }
        }]
    }
}

/// Alignment vectors from the full `(p, v)` state matrix.
struct AlignmentOp {
    path: Path,
    position_dim: usize,
    counter: Rc<OpCounter>,
    features: RefCell<Option<Array2<f64>>>,
}

impl CustomOp for AlignmentOp {
    fn name(&self) -> &'static str {
        "alignment"
    }

    fn forward(&self, inputs: &[&Array2<f64>]) -> Array2<f64> {
        let k = self.position_dim;
        let p = inputs[0].slice(s![.., ..k]);
        let v = inputs[0].slice(s![.., k..]);
        match &self.path {
            Path::Naive(spec) => naive_alignment_counted(spec, p, v, &self.counter),
            Path::Rff(basis) => {
                let (out, phi) = alignment_vectors_with_features(basis, p, v, &self.counter);
                *self.features.borrow_mut() = Some(phi);
                out
            }
        }
    }

    fn backward(&self, inputs: &[&Array2<f64>], _output: &Array2<f64>, grad: &Array2<f64>) -> Vec<Array2<f64>> {
        let k = self.position_dim;
        let p = inputs[0].slice(s![.., ..k]);
        let v = inputs[0].slice(s![.., k..]);
        let (gp, gv) = match &self.path {
            Path::Naive(spec) => naive_alignment_vjp(spec, p, v, grad.view()),
            Path::Rff(basis) => {
                let phi = self.features.borrow();
                let phi = phi.as_ref().expect("forward runs before backward");
                alignment_vectors_vjp_from_features(basis, phi.view(), v, grad.view())
            }
        };
        let mut out = Array2::zeros(inputs[0].raw_dim());
        out.slice_mut(s![.., ..k]).assign(&gp);
        out.slice_mut(s![.., k..]).assign(&gv);
        vec![out]
    }
}

/// `min_k ‖p_i − target_k‖²` per row of the position block.
struct NearestTargetOp {
    targets: Vec<Vec<f64>>,
    position_dim: usize,
}

impl CustomOp for NearestTargetOp {
    fn name(&self) -> &'static str {
        "nearest-target"
    }

    fn forward(&self, inputs: &[&Array2<f64>]) -> Array2<f64> {
        let x = inputs[0];
        Array2::from_shape_fn((x.nrows(), 1), |(i, _)| {
            let p: Vec<f64> = x.row(i).iter().take(self.position_dim).copied().collect();
            nearest_target_sq(&self.targets, &p).0
        })
    }

    fn backward(&self, inputs: &[&Array2<f64>], _output: &Array2<f64>, grad: &Array2<f64>) -> Vec<Array2<f64>> {
        let x = inputs[0];
        let mut out = Array2::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            let p: Vec<f64> = x.row(i).iter().take(self.position_dim).copied().collect();
            let (_, k) = nearest_target_sq(&self.targets, &p);
            for c in 0..self.position_dim {
                out[[i, c]] = 2.0 * (p[c] - self.targets[k][c]) * grad[[i, 0]];
            }
        }
        vec![out]
    }
}

/// Batched model functions on a [`Graph`]; these are what rollouts differentiate.
impl ModelSpec {
    /// `b(t, X, A)` for all particles, `N x d`.
    pub fn drift_graph<G: Graph>(&self, graph: &mut G, states: &G::Var, controls: &G::Var) -> G::Var {
        match self.kind {
            ModelKind::Crowd => controls.clone(),
            ModelKind::Flocking => {
                let k = self.position_dim;
                let v = graph.slice_cols(states, k, 2 * k);
                graph.concat(&[&v, controls])
            }
        }
    }

    /// `σ ΔW` lifted to the state space, `N x d`.
    pub fn diffusion(&self, increments: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = increments.nrows();
        let mut out = Array2::zeros((n, self.state_dim()));
        let offset = match self.kind {
            ModelKind::Crowd => 0,
            ModelKind::Flocking => self.position_dim,
        };
        out.slice_mut(s![.., offset..offset + self.noise_dim()]).assign(&(&increments * self.sigma));
        out
    }

    /// Per-particle running cost, `N x 1`.
    pub fn running_cost_graph<G: Graph>(&self, graph: &mut G, controls: &G::Var, interaction: &G::Var) -> G::Var {
        let effort = graph.row_sum_sq(controls);
        let effort = graph.scale(&effort, 0.5);
        let penalty = match self.kind {
            ModelKind::Crowd => match self.congestion {
                Congestion::Linear => graph.scale(interaction, self.lambda),
                Congestion::Quadratic => {
                    let sq = graph.mul(interaction, interaction);
                    graph.scale(&sq, self.lambda)
                }
            },
            ModelKind::Flocking => {
                let sq = graph.row_sum_sq(interaction);
                graph.scale(&sq, 0.5 * self.lambda)
            }
        };
        graph.add(&effort, &penalty)
    }

    /// Per-particle terminal cost, `N x 1`.
    pub fn terminal_cost_graph<G: Graph>(&self, graph: &mut G, states: &G::Var) -> G::Var {
        let n = graph.value(states).nrows();
        match self.terminal {
            TerminalCost::None => graph.constant(Array2::zeros((n, 1))),
            TerminalCost::NearestTarget if self.targets.len() == 1 => {
                let pos = if self.kind == ModelKind::Crowd {
                    states.clone()
                } else {
                    graph.slice_cols(states, 0, self.position_dim)
                };
                let neg = Array2::from_shape_fn((1, self.position_dim), |(_, c)| -self.targets[0][c]);
                let neg = graph.constant(neg);
                let diff = graph.add_row(&pos, &neg);
                graph.row_sum_sq(&diff)
            }
            TerminalCost::NearestTarget => graph.custom(
                Rc::new(NearestTargetOp { targets: self.targets.clone(), position_dim: self.position_dim }),
                &[states],
            ),
        }
    }

    /// Positions of every particle.
    pub fn positions(&self, states: ArrayView2<'_, f64>) -> Array2<f64> {
        self.position_view(states).to_owned()
    }
}
