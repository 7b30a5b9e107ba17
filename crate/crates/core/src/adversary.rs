//! Gradient inference from observed messages.
//!
//! Given the public weights and step sizes, an observer who sees agent `i`'s
//! state before and after a round, plus every message it received, can invert
//! the update rule for `g_i`:
//!
//! ```text
//! g_i = (s_i + eps sum_j w_ij (b_j - s_i) - s_i') / (eps lambda)
//! ```
//!
//! where `b_j` are the round's broadcasts and `s_i`, `s_i'` the target's
//! observed states. Without quantization the broadcasts are the states and
//! the inversion is exact. With ternary quantization the observer only has
//! `Q(x)` and the residual quantization noise, amplified by `1/(eps lambda)`,
//! swamps the estimate.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, NetworkState, RoundLog, Trajectory};
use crate::error::{Error, Result};
use crate::rng::SeedStreams;

/// Steps below this make the inversion ill-conditioned.
pub const MIN_STEP: f64 = 1e-12;

/// What the adversary gets to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationKind {
    /// Unquantized run: broadcasts are the exact states.
    Baseline,
    /// External wiretap on every channel; sees broadcasts only, so the
    /// target's states are known only through `Q(x_i)`.
    Eavesdropper,
    /// Additionally holds the target's internal states `x_i^k`, `x_i^{k+1}`
    /// and substitutes neighbor broadcasts for neighbor states.
    HonestButCurious,
}

impl std::fmt::Display for ObservationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ObservationKind::Baseline => "baseline",
            ObservationKind::Eavesdropper => "eavesdropper",
            ObservationKind::HonestButCurious => "honest-but-curious",
        })
    }
}

/// Public information about one round, from the adversary's point of view.
/// Holds no gradient values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackObservation {
    pub kind: ObservationKind,
    pub k: u64,
    pub target: usize,
    /// Row `target` of `W`.
    pub weights: Vec<f64>,
    pub epsilon: f64,
    pub lambda: f64,
    /// Round-`k` messages of all agents.
    pub broadcasts: DMatrix<f64>,
    /// Target state at `k` as observed.
    pub target_state: DVector<f64>,
    /// Target state at `k + 1` as observed.
    pub target_next: DVector<f64>,
}

impl AttackObservation {
    /// Builds the observation of round `k` of a fully logged trajectory.
    /// Unquantized runs always yield [`ObservationKind::Baseline`].
    pub fn from_trajectory(
        traj: &Trajectory,
        k: usize,
        target: usize,
        mode: ObservationKind,
    ) -> Result<Self> {
        let rounds = traj.rounds()?;
        let round = rounds.get(k).ok_or_else(|| {
            Error::InvalidArgument(format!("round {k} not in trajectory of {}", rounds.len()))
        })?;
        if target >= traj.topology.agents() {
            return Err(Error::InvalidArgument(format!("no agent {target}")));
        }
        let kind = if traj.metadata.quantizer.is_identity() {
            ObservationKind::Baseline
        } else {
            mode
        };
        let (next_state, next_broadcasts) = match rounds.get(k + 1) {
            Some(next) => (&next.state, Some(&next.broadcasts)),
            None => (&traj.final_state.x, traj.final_broadcasts.as_ref()),
        };
        let (target_state, target_next) = match kind {
            ObservationKind::Baseline | ObservationKind::HonestButCurious => (
                round.state.row(target).transpose(),
                next_state.row(target).transpose(),
            ),
            ObservationKind::Eavesdropper => {
                let nb = next_broadcasts.ok_or(Error::MissingLogs)?;
                (
                    round.broadcasts.row(target).transpose(),
                    nb.row(target).transpose(),
                )
            }
        };
        Ok(Self {
            kind,
            k: round.k,
            target,
            weights: traj
                .topology
                .weights()
                .row(target)
                .iter()
                .copied()
                .collect(),
            epsilon: round.epsilon,
            lambda: round.lambda,
            broadcasts: round.broadcasts.clone(),
            target_state,
            target_next,
        })
    }
}

fn invert(obs: &AttackObservation) -> Result<DVector<f64>> {
    let step = obs.epsilon * obs.lambda;
    if step.is_nan() || step < MIN_STEP {
        return Err(Error::IllConditioned(step));
    }
    let s = &obs.target_state;
    let mut coupling = DVector::zeros(s.len());
    for (j, &w) in obs.weights.iter().enumerate() {
        if w > 0.0 {
            coupling += (obs.broadcasts.row(j).transpose() - s) * w;
        }
    }
    Ok((s + coupling * obs.epsilon - &obs.target_next) / step)
}

/// Exact inversion against an unquantized run.
pub fn infer_gradient_baseline(obs: &AttackObservation) -> Result<DVector<f64>> {
    if obs.kind != ObservationKind::Baseline {
        return Err(Error::InvalidArgument(format!(
            "baseline inference needs an unquantized observation, got {}",
            obs.kind
        )));
    }
    invert(obs)
}

/// The same inversion with quantized messages standing in for states.
pub fn infer_gradient_quantized(obs: &AttackObservation) -> Result<DVector<f64>> {
    if obs.kind == ObservationKind::Baseline {
        return Err(Error::InvalidArgument(
            "quantized inference needs a quantized observation".into(),
        ));
    }
    invert(obs)
}

pub fn infer_gradient(obs: &AttackObservation) -> Result<DVector<f64>> {
    match obs.kind {
        ObservationKind::Baseline => infer_gradient_baseline(obs),
        _ => infer_gradient_quantized(obs),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub k: u64,
    pub target: usize,
    pub kind: ObservationKind,
    pub inferred: DVector<f64>,
    pub truth: DVector<f64>,
    /// `||inferred - truth|| / max(||truth||, 1e-12)`.
    pub relative_error: f64,
}

/// Scores an inference against the private gradient.
pub fn score(obs: &AttackObservation, inferred: DVector<f64>, truth: DVector<f64>) -> AttackResult {
    let relative_error = (&inferred - &truth).norm() / truth.norm().max(1e-12);
    AttackResult {
        k: obs.k,
        target: obs.target,
        kind: obs.kind,
        inferred,
        truth,
        relative_error,
    }
}

/// Attacks every round of a fully logged trajectory.
pub fn attack_report(
    traj: &Trajectory,
    target: usize,
    mode: ObservationKind,
) -> Result<Vec<AttackResult>> {
    let rounds = traj.rounds()?;
    (0..rounds.len())
        .map(|k| {
            let obs = AttackObservation::from_trajectory(traj, k, target, mode)?;
            let inferred = infer_gradient(&obs)?;
            Ok(score(
                &obs,
                inferred,
                rounds[k].gradients.row(target).transpose(),
            ))
        })
        .collect()
}

pub fn write_attack_csv<W: Write>(writer: W, results: &[AttackResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k", "target", "mode", "relative_error"])?;
    for r in results {
        w.write_record([
            r.k.to_string(),
            r.target.to_string(),
            r.kind.to_string(),
            format!("{:e}", r.relative_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Replays one logged round `draws` times with fresh quantization noise and
/// the logged gradients, attacking each replay. Draw `n` uses the streams of
/// `seed + n`, so two calls with the same seed are paired draw by draw.
pub fn redraw_attack(
    engine: &Engine<'_>,
    round: &RoundLog,
    target: usize,
    mode: ObservationKind,
    draws: usize,
    seed: u64,
) -> Result<Vec<AttackResult>> {
    let m = engine.topology().agents();
    let kind = if engine.quantizer().is_identity() {
        ObservationKind::Baseline
    } else {
        mode
    };
    let state = NetworkState {
        k: round.k,
        x: round.state.clone(),
    };
    let truth: DVector<f64> = round.gradients.row(target).transpose();
    (0..draws)
        .map(|n| {
            let mut streams = SeedStreams::new(seed.wrapping_add(n as u64)).quantizer_streams(m);
            let step = engine.step_with_gradients(&state, round.gradients.clone(), &mut streams)?;
            let (next_broadcasts, _) = engine.broadcast(&step.next, &mut streams)?;
            let (target_state, target_next) = match kind {
                ObservationKind::Eavesdropper => (
                    step.log.broadcasts.row(target).transpose(),
                    next_broadcasts.row(target).transpose(),
                ),
                _ => (state.agent(target), step.next.agent(target)),
            };
            let obs = AttackObservation {
                kind,
                k: round.k,
                target,
                weights: engine
                    .topology()
                    .weights()
                    .row(target)
                    .iter()
                    .copied()
                    .collect(),
                epsilon: step.log.epsilon,
                lambda: step.log.lambda,
                broadcasts: step.log.broadcasts,
                target_state,
                target_next,
            };
            let inferred = infer_gradient(&obs)?;
            Ok(score(&obs, inferred, truth.clone()))
        })
        .collect()
}
