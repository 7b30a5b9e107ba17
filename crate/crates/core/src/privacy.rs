//! Exact `(0, 1/r)` differential-privacy checks for the ternary quantizer.
//!
//! For adjacent inputs `|x_i - y_i| <= 1` the three output probabilities of a
//! coordinate can move by at most `1/r`. [`verify_dp_exact`] evaluates the
//! closed-form output law on a grid of input pairs instead of sampling, so a
//! nonpositive result is a certificate on that grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::element_distribution;
use crate::wire::Trit;

pub const MAX_GRID_STEP: f64 = 0.01;

pub fn per_step_delta(r: f64) -> Result<f64> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive and finite, got {r}"
        )));
    }
    Ok(1.0 / r)
}

/// Outcome of a grid sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSweep {
    pub r: f64,
    pub delta: f64,
    /// `max |P(q|x) - P(q|y)|` over the grid.
    pub supremum: f64,
    /// `supremum - delta`; nonpositive when the bound holds.
    pub max_violation: f64,
    pub argmax_x: f64,
    pub argmax_y: f64,
    pub argmax_event: Trit,
    pub pairs: u64,
}

/// Sweeps pairs `(x, y)` with `|x|, |y| <= r` and `|x - y| <= 1`.
///
/// `x` runs over `[-r, r]` in steps of `grid_step`; `y = x + j * grid_step`
/// for every integer `j` with `|y - x| <= 1`, plus the endpoints `x +- 1`.
/// Both same-sign and opposite-sign pairs are covered.
pub fn verify_dp_exact(r: f64, grid_step: f64) -> Result<DpSweep> {
    let delta = per_step_delta(r)?;
    if !(grid_step > 0.0 && grid_step <= MAX_GRID_STEP) {
        return Err(Error::InvalidArgument(format!(
            "grid step must lie in (0, {MAX_GRID_STEP}], got {grid_step}"
        )));
    }
    let points = (2.0 * r / grid_step).round() as i64;
    let offsets = (1.0 / grid_step).floor() as i64;

    let best = (0..=points)
        .into_par_iter()
        .map(|i| {
            let x = (-r + i as f64 * grid_step).clamp(-r, r);
            let px = element_distribution(x, r).expect("grid point within domain");
            let mut local = Candidate::default();
            let ys = (-offsets..=offsets)
                .map(|j| x + j as f64 * grid_step)
                .chain([x - 1.0, x + 1.0]);
            for y in ys {
                if y.abs() > r {
                    continue;
                }
                let py = element_distribution(y, r).expect("checked domain");
                for event in [Trit::Minus, Trit::Zero, Trit::Plus] {
                    let gap = (px.probability(event) - py.probability(event)).abs();
                    local.offer(gap, x, y, event);
                }
                local.pairs += 1;
            }
            local
        })
        .reduce(Candidate::default, Candidate::merge);

    Ok(DpSweep {
        r,
        delta,
        supremum: best.gap,
        max_violation: best.gap - delta,
        argmax_x: best.x,
        argmax_y: best.y,
        argmax_event: best.event,
        pairs: best.pairs,
    })
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gap: f64,
    x: f64,
    y: f64,
    event: Trit,
    pairs: u64,
}

impl Default for Candidate {
    fn default() -> Self {
        Self {
            gap: f64::NEG_INFINITY,
            x: 0.0,
            y: 0.0,
            event: Trit::Zero,
            pairs: 0,
        }
    }
}

impl Candidate {
    fn offer(&mut self, gap: f64, x: f64, y: f64, event: Trit) {
        if gap > self.gap {
            *self = Self {
                gap,
                x,
                y,
                event,
                pairs: self.pairs,
            };
        }
    }

    /// Keeps the larger gap; ties go to the smaller `x` so the reduction does
    /// not depend on how rayon splits the range.
    fn merge(a: Self, b: Self) -> Self {
        let pairs = a.pairs + b.pairs;
        let winner = if b.gap > a.gap || (b.gap == a.gap && b.x < a.x) {
            b
        } else {
            a
        };
        Self { pairs, ..winner }
    }
}

/// Privacy cost of `steps` iterations at threshold `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub r: f64,
    pub per_step_delta: f64,
    pub steps: u64,
    /// `steps / r`, summing the per-step delta.
    pub basic_composition_delta: f64,
    /// Advanced composition grows roughly like `sqrt(steps)`; this is
    /// `sqrt(steps) / r`, reported for orientation and not as a guarantee.
    pub sqrt_growth_reference: f64,
    pub note: String,
}

pub fn compose(steps: u64, r: f64) -> Result<PrivacyLedger> {
    let delta = per_step_delta(r)?;
    Ok(PrivacyLedger {
        r,
        per_step_delta: delta,
        steps,
        basic_composition_delta: steps as f64 * delta,
        sqrt_growth_reference: (steps as f64).sqrt() * delta,
        note: "cumulative loss under advanced composition grows roughly as sqrt(T); \
               only basic composition is certified here"
            .into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gap(x: f64, y: f64, r: f64, event: Trit) -> f64 {
        let px = element_distribution(x, r).unwrap();
        let py = element_distribution(y, r).unwrap();
        (px.probability(event) - py.probability(event)).abs()
    }

    #[test]
    fn delta_examples() {
        assert_eq!(per_step_delta(1.0).unwrap(), 1.0);
        assert_eq!(per_step_delta(10.0).unwrap(), 0.1);
        assert!(per_step_delta(20.0).unwrap() < per_step_delta(10.0).unwrap());
        assert!(per_step_delta(0.0).is_err());
        assert!(per_step_delta(-2.0).is_err());
    }

    #[test]
    fn pair_examples() {
        for event in [Trit::Minus, Trit::Zero, Trit::Plus] {
            assert_eq!(gap(0.37, 0.37, 2.0, event), 0.0);
        }
        // Same sign, tight: P(q = r | 1) = 1, P(q = r | 0) = 0.
        assert_eq!(gap(1.0, 0.0, 1.0, Trit::Plus), 1.0);
        // Opposite signs: P(q = -r | 0.4) = 0, P(q = -r | -0.6) = 0.3.
        assert!((gap(0.4, -0.6, 2.0, Trit::Minus) - 0.3).abs() < 1e-15);
        assert!(gap(0.4, -0.6, 2.0, Trit::Minus) <= 0.5);
    }

    #[test]
    fn sweep_holds_and_is_tight() {
        for r in [1.0, 2.0, 10.0] {
            let s = verify_dp_exact(r, 1e-3).unwrap();
            assert!(s.max_violation <= 1e-12, "r={r}: {s:?}");
            assert!(
                (s.supremum - 1.0 / r).abs() <= 1e-3 / r + 1e-12,
                "r={r}: {s:?}"
            );
            assert!((s.argmax_x - s.argmax_y).abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn sweep_rejects_coarse_grid() {
        assert!(verify_dp_exact(1.0, 0.5).is_err());
        assert!(verify_dp_exact(1.0, 0.0).is_err());
        assert!(verify_dp_exact(0.0, 0.001).is_err());
    }

    #[test]
    fn sweep_is_deterministic() {
        assert_eq!(
            verify_dp_exact(3.0, 0.01).unwrap(),
            verify_dp_exact(3.0, 0.01).unwrap()
        );
    }

    #[test]
    fn composition_examples() {
        assert_eq!(compose(0, 10.0).unwrap().basic_composition_delta, 0.0);
        assert!((compose(100, 10.0).unwrap().basic_composition_delta - 10.0).abs() < 1e-12);
        let l = compose(100, 10_000.0).unwrap();
        assert!((l.basic_composition_delta - 0.01).abs() < 1e-15);
        assert_eq!(l.per_step_delta, 1e-4);
        assert!((l.sqrt_growth_reference - 1e-3).abs() < 1e-15);
    }
}
