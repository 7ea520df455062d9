//! Particle rollouts, the policy-gradient loop and exact-kernel evaluation.
//!
//! One rollout routine is written against [`Graph`], so the forward-only
//! path and the differentiated path share every arithmetic operation and
//! produce bit-identical costs.

use std::rc::Rc;
use std::time::Instant;

use ndarray::{stack, Array1, Array2, Array3, Axis};

use crate::config::ExperimentConfig;
use crate::counters::OpCounter;
use crate::diffnet::{Checkpoint, Eval, Graph, OptimizerState, PolicyNetwork, Tape};
use crate::ensemble::{sample_noise, InitialLaw, NoisePack, RngStream, TimeGrid};
use crate::error::{Error, Result};
use crate::models::{Backend, InteractionBackend, ModelSpec};
use crate::rff::{sample_basis, FeatureBasis};

/// Stream ids under the run seed.
pub const BASIS_STREAM: u64 = 1;
pub const NETWORK_STREAM: u64 = 2;
pub const TRAIN_STREAM: u64 = 1_000_000;
pub const EVAL_STREAM: u64 = 2_000_000;

/// Everything recorded along one simulated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// `(n_steps + 1) x N x d`
    pub states: Array3<f64>,
    /// `n_steps x N x action_dim`
    pub controls: Array3<f64>,
    /// `n_steps x N x interaction_dim`
    pub interactions: Array3<f64>,
    /// `n_steps x N`
    pub running_costs: Array2<f64>,
    /// `N`
    pub terminal_costs: Array1<f64>,
    pub total_cost: f64,
    pub dt: f64,
    pub kernel_evals: u64,
    pub feature_madds: u64,
}

impl RolloutRecord {
    /// `(1/N) Σ_i (Σ_n c_n^i Δt + g(X_T^i))` from the stored pieces.
    pub fn recompute_total(&self) -> f64 {
        let running = self.running_costs.sum() * self.dt;
        let terminal = self.terminal_costs.sum();
        (running + terminal) / self.terminal_costs.len() as f64
    }

    pub fn final_states(&self) -> Array2<f64> {
        self.states.index_axis(Axis(0), self.states.dim().0 - 1).to_owned()
    }
}

fn check_shapes(model: &ModelSpec, net: &PolicyNetwork, grid: &TimeGrid, noise: &NoisePack) -> Result<()> {
    model.validate()?;
    if noise.n_steps() != grid.n_steps() {
        return Err(Error::Shape(format!("noise has {} steps, grid has {}", noise.n_steps(), grid.n_steps())));
    }
    if noise.noise_dim() != model.noise_dim() {
        return Err(Error::Shape(format!("noise dimension {} != model noise dimension {}", noise.noise_dim(), model.noise_dim())));
    }
    if noise.initial_states.ncols() != model.state_dim() || noise.increments.dim().1 != noise.particles() {
        return Err(Error::Shape("initial states or increments do not match the model state".into()));
    }
    if net.state_dim() != model.state_dim() || net.action_dim() != model.action_dim() {
        return Err(Error::Shape(format!(
            "policy maps {} -> {}, model needs {} -> {}",
            net.state_dim(),
            net.action_dim(),
            model.state_dim(),
            model.action_dim()
        )));
    }
    Ok(())
}

/// Euler-Maruyama rollout on `graph`; returns the `1 x 1` total cost node.
fn simulate<G: Graph>(
    graph: &mut G,
    params: &[G::Var],
    model: &ModelSpec,
    net: &PolicyNetwork,
    grid: &TimeGrid,
    noise: &NoisePack,
    backend: &InteractionBackend,
) -> Result<(G::Var, RolloutRecord)> {
    check_shapes(model, net, grid, noise)?;
    let dt = grid.dt();
    let mut x = graph.constant(noise.initial_states.clone());
    let mut states = vec![noise.initial_states.clone()];
    let (mut controls, mut interactions, mut running) = (Vec::new(), Vec::new(), Vec::new());
    let mut acc: Option<G::Var> = None;
    for step in 0..grid.n_steps() {
        let t = grid.time(step);
        let a = net.forward_graph(graph, params, t, &x);
        let k = backend.on_graph(graph, &x);
        let c = model.running_cost_graph(graph, &a, &k);
        let b = model.drift_graph(graph, &x, &a);
        let b_dt = graph.scale(&b, dt);
        let moved = graph.add(&x, &b_dt);
        let kick = graph.constant(model.diffusion(noise.increments.index_axis(Axis(0), step)));
        let next = graph.add(&moved, &kick);

        let next_value = graph.value(&next);
        if let Some(pos) = next_value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: step + 1, particle: pos / next_value.ncols() });
        }
        states.push(next_value.clone());
        controls.push(graph.value(&a).clone());
        interactions.push(graph.value(&k).clone());
        running.push(graph.value(&c).column(0).to_owned());
        acc = Some(match acc {
            None => c,
            Some(sum) => graph.add(&sum, &c),
        });
        x = next;
    }
    let terminal = model.terminal_cost_graph(graph, &x);
    let sum = acc.expect("grids have at least one step");
    let running_part = graph.scale(&sum, dt);
    let per_particle = graph.add(&running_part, &terminal);
    let total = graph.mean(&per_particle);

    fn view<D: ndarray::Dimension>(v: &[ndarray::Array<f64, D>]) -> Vec<ndarray::ArrayView<'_, f64, D>> {
        v.iter().map(|a| a.view()).collect()
    }
    let record = RolloutRecord {
        states: stack(Axis(0), &view(&states)).expect("uniform shapes"),
        controls: stack(Axis(0), &view(&controls)).expect("uniform shapes"),
        interactions: stack(Axis(0), &view(&interactions)).expect("uniform shapes"),
        running_costs: stack(Axis(0), &view(&running)).expect("uniform shapes"),
        terminal_costs: graph.value(&terminal).column(0).to_owned(),
        total_cost: graph.value(&total)[[0, 0]],
        dt,
        kernel_evals: backend.counter().kernel_evals(),
        feature_madds: backend.counter().feature_madds(),
    };
    Ok((total, record))
}

/// Forward rollout under the model's backend; `basis` is required for the feature backend.
pub fn rollout(
    model: &ModelSpec,
    net: &PolicyNetwork,
    grid: &TimeGrid,
    noise: &NoisePack,
    basis: Option<&FeatureBasis>,
) -> Result<RolloutRecord> {
    let backend = InteractionBackend::new(model, basis, Rc::new(OpCounter::new()))?;
    let mut graph = Eval;
    let params = net.register(&mut graph);
    Ok(simulate(&mut graph, &params, model, net, grid, noise, &backend)?.1)
}

/// Rollout plus the pathwise gradient of the total cost, in [`PolicyNetwork::flat_params`] order.
pub fn rollout_with_gradient(
    model: &ModelSpec,
    net: &PolicyNetwork,
    grid: &TimeGrid,
    noise: &NoisePack,
    basis: Option<&FeatureBasis>,
) -> Result<(RolloutRecord, Vec<f64>)> {
    let backend = InteractionBackend::new(model, basis, Rc::new(OpCounter::new()))?;
    let mut tape = Tape::new();
    let params = net.register(&mut tape);
    let (total, record) = simulate(&mut tape, &params, model, net, grid, noise, &backend)?;
    let grads = tape.backward(total, 1.0)?;
    Ok((record, net.flatten_grads(&grads)))
}

/// Monte Carlo estimate of the cost under the exact kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean: f64,
    pub stderr: f64,
    pub costs: Vec<f64>,
    /// Mean over rollouts and particles of the distance from `X_T` to the nearest target.
    pub terminal_distance: f64,
    /// Mean over rollouts of the distance from the terminal centroid to the nearest target.
    pub centroid_distance: f64,
}

fn nearest_distance(targets: &[Vec<f64>], p: &[f64]) -> f64 {
    targets
        .iter()
        .map(|t| t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// Averages the total cost over `n_rollouts` noise draws with the backend forced to exact sums.
/// Rollout `r` uses stream `EVAL_STREAM + r` under `seed`.
pub fn evaluate(
    model: &ModelSpec,
    net: &PolicyNetwork,
    grid: &TimeGrid,
    init: &InitialLaw,
    n_eval: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<Evaluation> {
    if n_eval == 0 || n_rollouts == 0 {
        return Err(Error::Parameter("evaluation needs at least one particle and one rollout".into()));
    }
    let exact = ModelSpec { backend: Backend::Naive, ..model.clone() };
    let mut costs = Vec::with_capacity(n_rollouts);
    let (mut dist, mut centroid_dist) = (0.0, 0.0);
    for r in 0..n_rollouts {
        let noise = sample_noise(grid, n_eval, exact.noise_dim(), init, RngStream::new(seed, EVAL_STREAM + r as u64))?;
        let rec = rollout(&exact, net, grid, &noise, None)?;
        costs.push(rec.total_cost);
        let fin = rec.final_states();
        let pos = fin.slice(ndarray::s![.., ..exact.position_dim]);
        if !exact.targets.is_empty() {
            dist += pos.rows().into_iter().map(|p| nearest_distance(&exact.targets, p.as_slice().unwrap_or(&p.to_vec()))).sum::<f64>()
                / n_eval as f64;
            let c = pos.mean_axis(Axis(0)).expect("nonempty");
            centroid_dist += nearest_distance(&exact.targets, &c.to_vec());
        }
    }
    let n = n_rollouts as f64;
    let mean = costs.iter().sum::<f64>() / n;
    let stderr = if n_rollouts > 1 {
        (costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    let (terminal_distance, centroid_distance) =
        if exact.targets.is_empty() { (f64::NAN, f64::NAN) } else { (dist / n, centroid_dist / n) };
    Ok(Evaluation { mean, stderr, costs, terminal_distance, centroid_distance })
}

/// One row of the training report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub iteration: usize,
    pub train_cost: Option<f64>,
    pub eval_cost: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    pub evaluations: Vec<(usize, Evaluation)>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "iteration,train_cost,eval_cost,wall_ms";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{:.3}\n", r.iteration, opt(r.train_cost), opt(r.eval_cost), r.wall_ms));
        }
        out
    }

    pub fn initial_evaluation(&self) -> Option<&Evaluation> {
        self.evaluations.first().map(|(_, e)| e)
    }

    pub fn final_evaluation(&self) -> Option<&Evaluation> {
        self.evaluations.last().map(|(_, e)| e)
    }

    pub fn train_costs(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.train_cost).collect()
    }
}

/// Stateful policy-gradient loop: one population rollout per iteration.
pub struct Trainer {
    config: ExperimentConfig,
    model: ModelSpec,
    grid: TimeGrid,
    basis: Option<FeatureBasis>,
    net: PolicyNetwork,
    theta: Vec<f64>,
    optimizer: OptimizerState,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = config.model_spec();
        let grid = config.time_grid()?;
        let basis = match model.backend {
            Backend::Naive => None,
            Backend::Rff => Some(sample_basis(
                model.kernel,
                config.interaction.features,
                model.position_dim,
                RngStream::new(config.seed, BASIS_STREAM),
            )?),
        };
        let net = PolicyNetwork::new(
            model.state_dim(),
            &config.network.hidden,
            model.action_dim(),
            config.network.activation,
            config.network.output_scale,
            RngStream::new(config.seed, NETWORK_STREAM),
        )?;
        let theta = net.flat_params();
        let optimizer = OptimizerState::new(theta.len(), config.optimizer);
        Ok(Self { config: config.clone(), model, grid, basis, net, theta, optimizer, iteration: 0 })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn network(&self) -> &PolicyNetwork {
        &self.net
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn basis(&self) -> Option<&FeatureBasis> {
        self.basis.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_network(&self.net, &self.config.hash())
    }

    /// Fresh noise, taped rollout, backward pass and one optimizer update. Returns the rollout cost.
    pub fn step(&mut self) -> Result<f64> {
        let k = self.iteration;
        let noise = sample_noise(
            &self.grid,
            self.config.train.particles,
            self.model.noise_dim(),
            &self.config.initial,
            RngStream::new(self.config.seed, TRAIN_STREAM + k as u64),
        )?;
        let (record, grad) = match rollout_with_gradient(&self.model, &self.net, &self.grid, &noise, self.basis.as_ref()) {
            Err(Error::NonFiniteState { .. }) => return Err(Error::Diverged { iteration: k, cost: f64::NAN }),
            other => other?,
        };
        let cost = record.total_cost;
        if !cost.is_finite() || cost > self.config.train.divergence_threshold {
            return Err(Error::Diverged { iteration: k, cost });
        }
        self.optimizer.step(&mut self.theta, &grad, k)?;
        self.net.set_flat_params(&self.theta)?;
        self.iteration += 1;
        Ok(cost)
    }

    /// Exact-kernel evaluation of the current policy with the configured population and rollout count.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let t = &self.config.train;
        evaluate(&self.model, &self.net, &self.grid, &self.config.initial, t.eval_particles, t.eval_rollouts, self.config.seed)
    }
}

/// Result of [`train`]. `failure` holds the error that stopped training early, if any;
/// the report then covers every iteration completed before it.
pub struct TrainRun {
    pub report: TrainReport,
    pub trainer: Trainer,
    pub failure: Option<Error>,
}

/// Runs the configured number of iterations, evaluating at iteration 0, every
/// `eval_every` iterations and after the last one. `on_row` sees each report row as it is produced.
pub fn train(config: &ExperimentConfig, mut on_row: impl FnMut(&ReportRow)) -> Result<TrainRun> {
    let mut trainer = Trainer::new(config)?;
    let mut report = TrainReport { seed: config.seed, config_hash: config.hash(), rows: Vec::new(), evaluations: Vec::new() };
    let iterations = config.train.iterations;
    let mut failure = None;
    for k in 0..=iterations {
        let clock = Instant::now();
        let eval_cost = if k % config.train.eval_every == 0 || k == iterations {
            let e = trainer.evaluate()?;
            let mean = e.mean;
            report.evaluations.push((k, e));
            Some(mean)
        } else {
            None
        };
        let train_cost = if k < iterations {
            match trainer.step() {
                Ok(c) => Some(c),
                Err(e) => {
                    failure = Some(e);
                    None
                }
            }
        } else {
            None
        };
        let row = ReportRow { iteration: k, train_cost, eval_cost, wall_ms: clock.elapsed().as_secs_f64() * 1e3 };
        on_row(&row);
        report.rows.push(row);
        if failure.is_some() {
            break;
        }
    }
    Ok(TrainRun { report, trainer, failure })
}

/// Snapshot CSV of one time step: `t,particle,x0,..,x{d-1}`.
pub fn snapshot_csv(record: &RolloutRecord, step: usize) -> Result<String> {
    let n_states = record.states.dim().0;
    if step >= n_states {
        return Err(Error::Parameter(format!("snapshot step {step} outside 0..{n_states}")));
    }
    let states = record.states.index_axis(Axis(0), step);
    let d = states.ncols();
    let mut out = String::from("t,particle");
    for c in 0..d {
        out.push_str(&format!(",x{c}"));
    }
    out.push('\n');
    let t = step as f64 * record.dt;
    for (i, row) in states.rows().into_iter().enumerate() {
        out.push_str(&format!("{t},{i}"));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}
