//! Synchronous quantized consensus-gradient iteration.
//!
//! Each round every agent `i` draws a stochastic gradient `g_i` at its current
//! state, broadcasts `Q(x_i)`, and updates
//!
//! ```text
//! x_i <- x_i + eps^k sum_j w_ij (Q(x_j) - Q(x_i)) - eps^k lambda^k g_i
//! ```
//!
//! using only round-`k` broadcasts. Because `W` is symmetric the coupling terms
//! cancel in the network average, so `mean(x)` moves only by the averaged
//! gradient step regardless of quantization error.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::GradientOracle;
use crate::quantizer::QuantizerSpec;
use crate::rng::SeedStreams;
use crate::schedule::Schedule;
use crate::topology::Topology;

/// Runs abort once `max |x|` exceeds this.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub k: u64,
    /// `m x d`; row `i` is agent `i`'s state.
    pub x: DMatrix<f64>,
}

impl NetworkState {
    pub fn zeros(agents: usize, dimension: usize) -> Self {
        Self {
            k: 0,
            x: DMatrix::zeros(agents, dimension),
        }
    }

    pub fn agents(&self) -> usize {
        self.x.nrows()
    }

    pub fn dimension(&self) -> usize {
        self.x.ncols()
    }

    pub fn agent(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }

    /// Column mean `xbar`.
    pub fn average(&self) -> DVector<f64> {
        average_state(self)
    }

    /// `||x - 1 (x) xbar||`.
    pub fn consensus_error(&self) -> f64 {
        let avg = self.average();
        let mut sq = 0.0;
        for i in 0..self.agents() {
            for c in 0..self.dimension() {
                sq += (self.x[(i, c)] - avg[c]).powi(2);
            }
        }
        sq.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.x.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn average_state(state: &NetworkState) -> DVector<f64> {
    let m = state.agents() as f64;
    DVector::from_fn(state.dimension(), |c, _| state.x.column(c).sum() / m)
}

/// Everything exchanged or computed in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub k: u64,
    pub epsilon: f64,
    pub lambda: f64,
    /// `x^k`, private to each agent.
    pub state: DMatrix<f64>,
    /// `Q(x^k)`, the shared messages.
    pub broadcasts: DMatrix<f64>,
    /// `g^k`, private; kept for evaluation only.
    pub gradients: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub k: u64,
    pub epsilon: f64,
    pub lambda: f64,
    pub consensus_error: f64,
    pub optimality_gap: Option<f64>,
    /// `||(1/m) sum_i grad f_i(x_i^k)||`.
    pub avg_grad_norm: f64,
    /// `||grad f(xbar^k)||`.
    pub grad_norm_at_average: f64,
    /// `f(xbar^k)`.
    pub value_at_average: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogMode {
    #[default]
    MetricsOnly,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub iterations_requested: u64,
    pub iterations_completed: u64,
    pub quantizer: QuantizerSpec,
    pub batch: usize,
    /// Coordinates clipped by a saturating quantizer over the run.
    pub saturated_elements: u64,
    /// `sum ||Q(x_i) - x_i||^2 / sum ||x_i||^2` over the run, the empirical
    /// variance-to-norm ratio of the quantizer.
    pub variance_to_norm_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub topology: Topology,
    pub metadata: RunMetadata,
    /// One entry per state `x^0 .. x^t`.
    pub metrics: Vec<IterationMetrics>,
    /// Round logs in full mode.
    pub rounds: Option<Vec<RoundLog>>,
    /// `Q(x^t)` in full mode, so the last round can be attacked.
    pub final_broadcasts: Option<DMatrix<f64>>,
    pub final_state: NetworkState,
    weighted_sum: DMatrix<f64>,
    weight_total: f64,
}

impl Trajectory {
    pub fn iterations(&self) -> u64 {
        self.final_state.k
    }

    pub fn rounds(&self) -> Result<&[RoundLog]> {
        self.rounds.as_deref().ok_or(Error::MissingLogs)
    }
}

/// `sum_k eps^k lambda^k x_p^k / sum_k eps^k lambda^k` over `x^0 .. x^t`.
pub fn weighted_average_iterate(traj: &Trajectory, agent: usize) -> Result<DVector<f64>> {
    if agent >= traj.weighted_sum.nrows() {
        return Err(Error::InvalidArgument(format!("no agent {agent}")));
    }
    if traj.weight_total <= 0.0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    Ok(traj.weighted_sum.row(agent).transpose() / traj.weight_total)
}

/// Step-weighted gradient statistic over rounds `0..=t`:
///
/// ```text
/// [ sum_k eps^k lambda^k (||grad f(xbar^k)||^2 + ||(1/m) sum_i grad f_i(x_i^k)||^2)
///   + 2 (f(xbar^{t+1}) - f(xbar^0)) ] / sum_k eps^k lambda^k
/// ```
///
/// Needs metrics up to `k = t + 1`.
pub fn gradient_rate_statistic(metrics: &[IterationMetrics], t: usize) -> Result<f64> {
    if metrics.len() < t + 2 {
        return Err(Error::InvalidArgument(format!(
            "statistic at t = {t} needs {} metric rows, have {}",
            t + 2,
            metrics.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for m in &metrics[..=t] {
        let w = m.epsilon * m.lambda;
        num += w * (m.grad_norm_at_average.powi(2) + m.avg_grad_norm.powi(2));
        den += w;
    }
    num += 2.0 * (metrics[t + 1].value_at_average - metrics[0].value_at_average);
    Ok(num / den)
}

/// Weighted mean of explicit iterates.
pub fn weighted_average(iterates: &[DVector<f64>], weights: &[f64]) -> Result<DVector<f64>> {
    if iterates.is_empty() || iterates.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} iterates with {} weights",
            iterates.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(
            "weights must sum to a positive value".into(),
        ));
    }
    let sum = iterates
        .iter()
        .zip(weights)
        .fold(DVector::zeros(iterates[0].len()), |acc, (x, w)| {
            acc + x * *w
        });
    Ok(sum / total)
}

/// Per-agent random streams for gradients and quantization.
#[derive(Debug, Clone)]
pub struct AgentStreams {
    pub gradient: Vec<ChaCha20Rng>,
    pub quantizer: Vec<ChaCha20Rng>,
}

impl AgentStreams {
    pub fn new(seed: u64, agents: usize) -> Self {
        let s = SeedStreams::new(seed);
        Self {
            gradient: s.gradient_streams(agents),
            quantizer: s.quantizer_streams(agents),
        }
    }
}

/// Output of one round.
#[derive(Debug, Clone)]
pub struct Step {
    pub next: NetworkState,
    pub log: RoundLog,
    pub saturated: usize,
}

pub struct Engine<'a> {
    topology: &'a Topology,
    schedule: &'a Schedule,
    quantizer: &'a QuantizerSpec,
    problem: &'a dyn GradientOracle,
    batch: usize,
}

impl<'a> Engine<'a> {
    pub fn new(
        topology: &'a Topology,
        schedule: &'a Schedule,
        quantizer: &'a QuantizerSpec,
        problem: &'a dyn GradientOracle,
    ) -> Result<Self> {
        if topology.agents() != problem.agents() {
            return Err(Error::InvalidArgument(format!(
                "topology has {} agents, problem has {}",
                topology.agents(),
                problem.agents()
            )));
        }
        schedule.check()?;
        quantizer.validate()?;
        Ok(Self {
            topology,
            schedule,
            quantizer,
            problem,
            batch: 1,
        })
    }

    pub fn with_batch(mut self, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::BatchOutOfRange { batch, max: 0 });
        }
        self.batch = batch;
        Ok(self)
    }

    pub fn topology(&self) -> &Topology {
        self.topology
    }

    pub fn schedule(&self) -> &Schedule {
        self.schedule
    }

    pub fn quantizer(&self) -> &QuantizerSpec {
        self.quantizer
    }

    pub fn problem(&self) -> &dyn GradientOracle {
        self.problem
    }

    /// Samples `g_i^k` at `x_i^k` for every agent.
    pub fn sample_gradients(
        &self,
        state: &NetworkState,
        gradient_streams: &mut [ChaCha20Rng],
    ) -> Result<DMatrix<f64>> {
        let mut g = DMatrix::zeros(state.agents(), state.dimension());
        for (i, rng) in gradient_streams.iter_mut().enumerate().take(state.agents()) {
            let gi = self
                .problem
                .stochastic_gradient(i, &state.agent(i), self.batch, rng)?;
            g.set_row(i, &gi.transpose());
        }
        Ok(g)
    }

    /// Quantizes every agent's state with its own stream.
    pub fn broadcast(
        &self,
        state: &NetworkState,
        quantizer_streams: &mut [ChaCha20Rng],
    ) -> Result<(DMatrix<f64>, usize)> {
        let mut q = DMatrix::zeros(state.agents(), state.dimension());
        let mut saturated = 0;
        for (i, rng) in quantizer_streams
            .iter_mut()
            .enumerate()
            .take(state.agents())
        {
            let out = self.quantizer.quantize(&state.agent(i), rng)?;
            saturated += out.saturated;
            q.set_row(i, &out.values.transpose());
        }
        Ok((q, saturated))
    }

    /// One synchronous round.
    pub fn step(&self, state: &NetworkState, streams: &mut AgentStreams) -> Result<Step> {
        let gradients = self.sample_gradients(state, &mut streams.gradient)?;
        self.step_with_gradients(state, gradients, &mut streams.quantizer)
    }

    /// One round with externally supplied gradients `g^k`.
    pub fn step_with_gradients(
        &self,
        state: &NetworkState,
        gradients: DMatrix<f64>,
        quantizer_streams: &mut [ChaCha20Rng],
    ) -> Result<Step> {
        self.check_shape(state)?;
        if gradients.shape() != state.x.shape() {
            return Err(Error::InvalidArgument(format!(
                "gradient matrix {:?} does not match state {:?}",
                gradients.shape(),
                state.x.shape()
            )));
        }
        let k = state.k;
        let epsilon = self.schedule.epsilon_at(k);
        let lambda = self.schedule.lambda_at(k);
        let (broadcasts, saturated) = self.broadcast(state, quantizer_streams)?;
        let x = apply_update(
            self.topology,
            &state.x,
            &broadcasts,
            &gradients,
            epsilon,
            lambda,
        );
        let next = NetworkState { k: k + 1, x };
        let max_abs = next.max_abs();
        if max_abs.is_nan() || max_abs > DIVERGENCE_THRESHOLD {
            return Err(Error::Diverged {
                iteration: k + 1,
                max_abs,
            });
        }
        Ok(Step {
            next,
            log: RoundLog {
                k,
                epsilon,
                lambda,
                state: state.x.clone(),
                broadcasts,
                gradients,
            },
            saturated,
        })
    }

    fn check_shape(&self, state: &NetworkState) -> Result<()> {
        if state.agents() != self.topology.agents() || state.dimension() != self.problem.dimension()
        {
            return Err(Error::InvalidArgument(format!(
                "state is {}x{}, expected {}x{}",
                state.agents(),
                state.dimension(),
                self.topology.agents(),
                self.problem.dimension()
            )));
        }
        Ok(())
    }

    pub fn metrics(&self, state: &NetworkState) -> IterationMetrics {
        let avg = state.average();
        let m = state.agents();
        let mut local_sum = DVector::zeros(state.dimension());
        for i in 0..m {
            local_sum += self.problem.exact_gradient(i, &state.agent(i));
        }
        IterationMetrics {
            k: state.k,
            epsilon: self.schedule.epsilon_at(state.k),
            lambda: self.schedule.lambda_at(state.k),
            consensus_error: state.consensus_error(),
            optimality_gap: self.problem.optimum().map(|opt| (&avg - opt).norm()),
            avg_grad_norm: (local_sum / m as f64).norm(),
            grad_norm_at_average: self.problem.gradient(&avg).norm(),
            value_at_average: self.problem.value(&avg),
        }
    }

    /// `iterations` rounds from `x^0 = 0`, deterministic in `seed`.
    pub fn run(&self, iterations: u64, seed: u64, mode: LogMode) -> Result<Trajectory> {
        match self.run_partial(iterations, seed, mode) {
            (traj, None) => Ok(traj),
            (_, Some(e)) => Err(e),
        }
    }

    /// Like [`Engine::run`] but returns the trajectory completed so far
    /// alongside the error that stopped it.
    pub fn run_partial(
        &self,
        iterations: u64,
        seed: u64,
        mode: LogMode,
    ) -> (Trajectory, Option<Error>) {
        let m = self.topology.agents();
        let d = self.problem.dimension();
        let mut streams = AgentStreams::new(seed, m);
        let mut state = NetworkState::zeros(m, d);
        let mut rounds = (mode == LogMode::Full).then(Vec::new);
        let mut metrics = vec![self.metrics(&state)];
        let mut weighted_sum = DMatrix::zeros(m, d);
        let mut weight_total = 0.0;
        let mut saturated = 0u64;
        let mut error_energy = 0.0;
        let mut state_energy = 0.0;
        let mut failure = None;

        let w0 = self.schedule.step_at(0);
        weighted_sum += &state.x * w0;
        weight_total += w0;

        for _ in 0..iterations {
            match self.step(&state, &mut streams) {
                Ok(step) => {
                    saturated += step.saturated as u64;
                    error_energy += (&step.log.broadcasts - &step.log.state).norm_squared();
                    state_energy += step.log.state.norm_squared();
                    if let Some(r) = rounds.as_mut() {
                        r.push(step.log);
                    }
                    state = step.next;
                    let w = self.schedule.step_at(state.k);
                    weighted_sum += &state.x * w;
                    weight_total += w;
                    metrics.push(self.metrics(&state));
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }

        let final_broadcasts = if mode == LogMode::Full && failure.is_none() {
            match self.broadcast(&state, &mut streams.quantizer) {
                Ok((q, _)) => Some(q),
                Err(e) => {
                    failure = Some(e);
                    None
                }
            }
        } else {
            None
        };

        let traj = Trajectory {
            topology: self.topology.clone(),
            metadata: RunMetadata {
                seed,
                iterations_requested: iterations,
                iterations_completed: state.k,
                quantizer: *self.quantizer,
                batch: self.batch,
                saturated_elements: saturated,
                variance_to_norm_ratio: (state_energy > 0.0).then(|| error_energy / state_energy),
            },
            metrics,
            rounds,
            final_broadcasts,
            final_state: state,
            weighted_sum,
            weight_total,
        };
        (traj, failure)
    }
}

/// `x_i + eps sum_j w_ij (q_j - q_i) - eps lambda g_i` for every agent.
pub fn apply_update(
    topology: &Topology,
    state: &DMatrix<f64>,
    broadcasts: &DMatrix<f64>,
    gradients: &DMatrix<f64>,
    epsilon: f64,
    lambda: f64,
) -> DMatrix<f64> {
    let m = state.nrows();
    let d = state.ncols();
    let step = epsilon * lambda;
    DMatrix::from_fn(m, d, |i, c| {
        let coupling: f64 = topology
            .neighbors(i)
            .map(|j| topology.weight(i, j) * (broadcasts[(j, c)] - broadcasts[(i, c)]))
            .sum();
        state[(i, c)] + epsilon * coupling - step * gradients[(i, c)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_sensor_problem, SensorConfig};
    use crate::quantizer::ClampPolicy;
    use crate::topology::PRESET_RING5_CHORD;
    use rand::Rng;

    /// `f_i(x) = 1/2 ||x - c_i||^2` with an identical curvature for every
    /// agent, so the summed gradient depends on the states only through their
    /// average.
    struct SharedCurvature {
        centers: Vec<DVector<f64>>,
        sigma: f64,
    }

    impl GradientOracle for SharedCurvature {
        fn agents(&self) -> usize {
            self.centers.len()
        }
        fn dimension(&self) -> usize {
            self.centers[0].len()
        }
        fn local_value(&self, i: usize, x: &DVector<f64>) -> f64 {
            0.5 * (x - &self.centers[i]).norm_squared()
        }
        fn exact_gradient(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
            x - &self.centers[i]
        }
        fn stochastic_gradient(
            &self,
            i: usize,
            x: &DVector<f64>,
            _batch: usize,
            rng: &mut dyn rand::RngCore,
        ) -> Result<DVector<f64>> {
            let noise = DVector::from_fn(x.len(), |_, _| rng.random_range(-1.0..1.0));
            Ok(self.exact_gradient(i, x) + noise * self.sigma)
        }
    }

    fn shared_curvature() -> SharedCurvature {
        SharedCurvature {
            centers: (0..5)
                .map(|i| DVector::from_vec(vec![0.2 * i as f64 - 0.4, 0.1 * i as f64]))
                .collect(),
            sigma: 0.3,
        }
    }

    fn naive_step(
        w: &DMatrix<f64>,
        x: &DMatrix<f64>,
        q: &DMatrix<f64>,
        g: &DMatrix<f64>,
        eps: f64,
        lam: f64,
    ) -> DMatrix<f64> {
        let (m, d) = x.shape();
        let mut out = x.clone();
        for i in 0..m {
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..m {
                    if w[(i, j)] > 0.0 {
                        acc += w[(i, j)] * (q[(j, c)] - q[(i, c)]);
                    }
                }
                out[(i, c)] = x[(i, c)] + eps * acc - eps * lam * g[(i, c)];
            }
        }
        out
    }

    #[test]
    fn consensus_with_zero_gradient_is_fixed() {
        let topo = Topology::preset(PRESET_RING5_CHORD).unwrap();
        let sched = Schedule::reference();
        let q = QuantizerSpec::identity();
        let p = shared_curvature();
        let engine = Engine::new(&topo, &sched, &q, &p).unwrap();
        let x = DMatrix::from_fn(5, 2, |_, c| [0.7, -0.2][c]);
        let state = NetworkState { k: 3, x: x.clone() };
        let mut rngs = SeedStreams::new(1).quantizer_streams(5);
        let step = engine
            .step_with_gradients(&state, DMatrix::zeros(5, 2), &mut rngs)
            .unwrap();
        assert_eq!(step.next.x, x);
        assert_eq!(step.next.k, 4);
    }

    #[test]
    fn two_agent_hand_case() {
        // w = 1/2, eps = 0.5, lambda = 0.4, x = (1, 3), g = (2, -1):
        // x1' = 1 + 0.5 * 0.5 * (3 - 1) - 0.2 * 2 = 1.1
        // x2' = 3 + 0.5 * 0.5 * (1 - 3) + 0.2 * 1 = 2.7
        let topo = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 3.0]);
        let g = DMatrix::from_column_slice(2, 1, &[2.0, -1.0]);
        let next = apply_update(&topo, &x, &x, &g, 0.5, 0.4);
        assert!((next[(0, 0)] - 1.1).abs() < 1e-15);
        assert!((next[(1, 0)] - 2.7).abs() < 1e-15);
    }

    #[test]
    fn step_matches_naive_loop() {
        let mut rng = SeedStreams::new(2).redraw(0);
        for (m, edges) in [
            (2usize, vec![(0usize, 1usize)]),
            (3, vec![(0, 1), (1, 2)]),
            (3, vec![(0, 1), (1, 2), (0, 2)]),
        ] {
            let topo = Topology::from_edges(m, &edges).unwrap();
            for d in 1..=2 {
                let x = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
                let q = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
                let g = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
                let eps = rng.random_range(0.0..1.0);
                let lam = rng.random_range(0.0..1.0);
                let fast = apply_update(&topo, &x, &q, &g, eps, lam);
                let slow = naive_step(topo.weights(), &x, &q, &g, eps, lam);
                assert!((fast - slow).amax() <= 1e-14);
            }
        }
    }

    #[test]
    fn zero_iterations_keeps_initial_state() {
        let topo = Topology::preset(PRESET_RING5_CHORD).unwrap();
        let sched = Schedule::reference();
        let q = QuantizerSpec::identity();
        let p = shared_curvature();
        let traj = Engine::new(&topo, &sched, &q, &p)
            .unwrap()
            .run(0, 1, LogMode::Full)
            .unwrap();
        assert_eq!(traj.iterations(), 0);
        assert_eq!(traj.metrics.len(), 1);
        assert_eq!(traj.final_state, NetworkState::zeros(5, 2));
        assert!(traj.rounds().unwrap().is_empty());
    }

    #[test]
    fn run_is_deterministic() {
        let topo = Topology::preset(PRESET_RING5_CHORD).unwrap();
        let sched = Schedule::reference();
        let q = QuantizerSpec::ternary(5.0).unwrap();
        let p = make_sensor_problem(5, &SensorConfig::default(), 3).unwrap();
        let engine = Engine::new(&topo, &sched, &q, &p).unwrap();
        let a = engine.run(200, 9, LogMode::Full).unwrap();
        let b = engine.run(200, 9, LogMode::Full).unwrap();
        assert_eq!(a, b);
        let c = engine.run(200, 10, LogMode::Full).unwrap();
        assert_ne!(a.final_state, c.final_state);
    }

    #[test]
    fn average_is_immune_to_quantization() {
        let topo = Topology::preset(PRESET_RING5_CHORD).unwrap();
        let sched = Schedule::reference();
        let p = shared_curvature();
        let ident = QuantizerSpec::identity();
        let tern = QuantizerSpec::ternary(4.0).unwrap();
        let a = Engine::new(&topo, &sched, &ident, &p)
            .unwrap()
            .run(300, 5, LogMode::Full)
            .unwrap();
        let b = Engine::new(&topo, &sched, &tern, &p)
            .unwrap()
            .run(300, 5, LogMode::Full)
            .unwrap();
        let ra = a.rounds().unwrap();
        let rb = b.rounds().unwrap();
        let mut max_diff: f64 = 0.0;
        for (x, y) in ra.iter().zip(rb) {
            let xa = NetworkState {
                k: x.k,
                x: x.state.clone(),
            }
            .average();
            let xb = NetworkState {
                k: y.k,
                x: y.state.clone(),
            }
            .average();
            max_diff = max_diff.max((xa - xb).norm());
        }
        assert!(max_diff <= 1e-9, "{max_diff}");
        // The states themselves differ.
        assert!((&a.final_state.x - &b.final_state.x).amax() > 1e-3);
    }

    #[test]
    fn average_state_examples() {
        let s = NetworkState {
            k: 0,
            x: DMatrix::from_column_slice(2, 1, &[0.0, 2.0]),
        };
        assert_eq!(s.average()[0], 1.0);
        let row = [0.25, -4.0];
        let s = NetworkState {
            k: 0,
            x: DMatrix::from_fn(4, 2, |_, c| row[c]),
        };
        assert_eq!(s.average(), DVector::from_column_slice(&row));
        assert_eq!(s.consensus_error(), 0.0);

        let mut rng = SeedStreams::new(4).redraw(0);
        let s = NetworkState {
            k: 0,
            x: DMatrix::from_fn(7, 3, |_, _| rng.random_range(-10.0..10.0)),
        };
        let avg = s.average();
        for c in 0..3 {
            let mut acc = 0.0;
            for i in 0..7 {
                acc += s.x[(i, c)];
            }
            assert!((avg[c] - acc / 7.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn weighted_average_cases() {
        let c = DVector::from_vec(vec![1.5, -2.0]);
        let iterates = vec![c.clone(); 4];
        let got = weighted_average(&iterates, &[0.4, 0.3, 0.2, 0.1]).unwrap();
        assert!((got - &c).amax() < 1e-15);

        // (2 * 1 + 1 * 4) / 3 = 2
        let got = weighted_average(
            &[DVector::from_vec(vec![1.0]), DVector::from_vec(vec![4.0])],
            &[2.0, 1.0],
        )
        .unwrap();
        assert!((got[0] - 2.0).abs() < 1e-15);

        let xs: Vec<_> = (0..5).map(|i| DVector::from_vec(vec![i as f64])).collect();
        let got = weighted_average(&xs, &[0.7; 5]).unwrap();
        assert!((got[0] - 2.0).abs() < 1e-15);
        assert!(weighted_average(&[], &[]).is_err());
    }

    #[test]
    fn trajectory_weighted_iterate_matches_explicit() {
        let topo = Topology::preset(PRESET_RING5_CHORD).unwrap();
        let sched = Schedule::reference();
        let q = QuantizerSpec::identity();
        let p = shared_curvature();
        let traj = Engine::new(&topo, &sched, &q, &p)
            .unwrap()
            .run(40, 2, LogMode::Full)
            .unwrap();
        let rounds = traj.rounds().unwrap();
        let mut xs: Vec<DVector<f64>> = rounds.iter().map(|r| r.state.row(1).transpose()).collect();
        xs.push(traj.final_state.agent(1));
        let ws: Vec<f64> = (0..=40).map(|k| sched.step_at(k)).collect();
        let expected = weighted_average(&xs, &ws).unwrap();
        let got = weighted_average_iterate(&traj, 1).unwrap();
        assert!((got - expected).amax() < 1e-12);
    }

    #[test]
    fn threshold_violation_aborts_with_partial_trajectory() {
        let topo = Topology::preset(PRESET_RING5_CHORD).unwrap();
        let sched = Schedule::reference();
        let q = QuantizerSpec::ternary(0.05).unwrap();
        let p = make_sensor_problem(5, &SensorConfig::default(), 1).unwrap();
        let engine = Engine::new(&topo, &sched, &q, &p).unwrap();
        let (traj, err) = engine.run_partial(100, 1, LogMode::MetricsOnly);
        assert!(matches!(err, Some(Error::ThresholdViolation { .. })));
        assert!(traj.iterations() < 100);
        assert_eq!(traj.metrics.len() as u64, traj.iterations() + 1);

        let saturating = q.with_clamp_policy(ClampPolicy::Saturate);
        let traj = Engine::new(&topo, &sched, &saturating, &p)
            .unwrap()
            .run(100, 1, LogMode::MetricsOnly)
            .unwrap();
        assert!(traj.metadata.saturated_elements > 0);
    }

    #[test]
    fn divergence_is_reported() {
        let topo = Topology::preset(PRESET_RING5_CHORD).unwrap();
        // Huge gradient steps on a stiff problem.
        let sched = Schedule::new(1e4, 1.0, 0.3, 0.3, 0.6).unwrap();
        let q = QuantizerSpec::identity();
        let cfg = SensorConfig {
            measurement_scale: 3.0,
            ..SensorConfig::default()
        };
        let p = make_sensor_problem(5, &cfg, 1).unwrap();
        let engine = Engine::new(&topo, &sched, &q, &p).unwrap();
        match engine.run(1000, 1, LogMode::MetricsOnly) {
            Err(Error::Diverged { iteration, max_abs }) => {
                assert!(iteration > 0);
                assert!(max_abs > DIVERGENCE_THRESHOLD);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let topo = Topology::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let sched = Schedule::reference();
        let q = QuantizerSpec::identity();
        let p = shared_curvature();
        assert!(Engine::new(&topo, &sched, &q, &p).is_err());
    }

    #[test]
    fn rate_statistic_by_hand() {
        let row = |k: u64, eps: f64, lam: f64, a: f64, b: f64, f: f64| IterationMetrics {
            k,
            epsilon: eps,
            lambda: lam,
            consensus_error: 0.0,
            optimality_gap: None,
            avg_grad_norm: b,
            grad_norm_at_average: a,
            value_at_average: f,
        };
        let rows = vec![
            row(0, 1.0, 1.0, 1.0, 2.0, 5.0),
            row(1, 0.5, 0.5, 2.0, 0.0, 4.0),
            row(2, 0.25, 0.5, 0.0, 0.0, 3.5),
        ];
        // (1 * (1 + 4) + 0.25 * 4 + 2 * (3.5 - 5)) / 1.25
        let s = gradient_rate_statistic(&rows, 1).unwrap();
        assert!((s - 3.0 / 1.25).abs() < 1e-15);
        assert!(gradient_rate_statistic(&rows, 2).is_err());
    }
}
