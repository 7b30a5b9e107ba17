//! Decaying step sequences `lambda^k = a1 / (a3 k + 1)^delta1` and
//! `epsilon^k = a2 / (a3 k + 1)^delta2`, and an exact validator for the
//! summability conditions they must satisfy.
//!
//! With this parametric form every summability condition reduces to an
//! exponent inequality:
//!
//! | condition                               | exponent form        |
//! |-----------------------------------------|----------------------|
//! | `sum eps^k lambda^k = inf`              | `d1 + d2 <= 1`       |
//! | `sum (eps^k)^2 < inf`                   | `d2 > 1/2`           |
//! | `sum eps^k (lambda^k)^2 < inf`          | `2 d1 + d2 > 1`      |
//! | function-value rate (convex objectives) | `d1 + 3/2 d2 >= 1`   |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::Topology;

/// Slack for deciding equality at a boundary, so that e.g. `2 * 0.3 + 0.4`
/// is treated as exactly 1.
const BOUNDARY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub delta1: f64,
    pub delta2: f64,
}

impl Schedule {
    pub fn new(a1: f64, a2: f64, a3: f64, delta1: f64, delta2: f64) -> Result<Self> {
        let s = Self {
            a1,
            a2,
            a3,
            delta1,
            delta2,
        };
        s.check()?;
        Ok(s)
    }

    /// `lambda^k = 1/(0.3k+1)^0.3`, `epsilon^k = 1/(0.3k+1)^0.6`.
    pub fn reference() -> Self {
        Self {
            a1: 1.0,
            a2: 1.0,
            a3: 0.3,
            delta1: 0.3,
            delta2: 0.6,
        }
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [
            ("a1", self.a1),
            ("a2", self.a2),
            ("a3", self.a3),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "schedule parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn base(&self, k: u64) -> f64 {
        self.a3 * k as f64 + 1.0
    }

    pub fn lambda_at(&self, k: u64) -> f64 {
        self.a1 / self.base(k).powf(self.delta1)
    }

    pub fn epsilon_at(&self, k: u64) -> f64 {
        self.a2 / self.base(k).powf(self.delta2)
    }

    /// Effective gradient step `epsilon^k * lambda^k`.
    pub fn step_at(&self, k: u64) -> f64 {
        self.epsilon_at(k) * self.lambda_at(k)
    }

    pub fn validate(&self, topology: &Topology) -> ConditionReport {
        let d1 = self.delta1;
        let d2 = self.delta2;
        let mut violations = Vec::new();
        let mut nonconvex_ok = true;
        for (name, holds) in [
            (Inequality::StepProductDiverges, le(d1 + d2, 1.0)),
            (Inequality::MixingSquareSummable, gt(d2, 0.5)),
            (Inequality::GradientNoiseSummable, gt(2.0 * d1 + d2, 1.0)),
        ] {
            if !holds {
                nonconvex_ok = false;
                violations.push(name);
            }
        }
        let value_rate_holds = ge(d1 + 1.5 * d2, 1.0);
        if !value_rate_holds {
            violations.push(Inequality::FunctionValueRate);
        }
        let initial_epsilon = self.epsilon_at(0);
        let mixing_stable = topology.mixing_is_stable(initial_epsilon);
        if !mixing_stable {
            violations.push(Inequality::MixingStability);
        }
        ConditionReport {
            nonconvex_ok,
            convex_value_ok: nonconvex_ok && value_rate_holds,
            rate_gradient: (2.0 * d1).min(d2),
            rate_value: d1.min(d2 / 2.0),
            mixing_stable,
            initial_epsilon,
            max_degree: topology.max_degree(),
            violations,
        }
    }
}

fn le(a: f64, b: f64) -> bool {
    a <= b + BOUNDARY_SLACK
}

fn ge(a: f64, b: f64) -> bool {
    a + BOUNDARY_SLACK >= b
}

fn gt(a: f64, b: f64) -> bool {
    a > b + BOUNDARY_SLACK
}

/// The inequalities checked by [`Schedule::validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Inequality {
    StepProductDiverges,
    MixingSquareSummable,
    GradientNoiseSummable,
    FunctionValueRate,
    MixingStability,
}

impl Inequality {
    pub const ALL: [Inequality; 5] = [
        Inequality::StepProductDiverges,
        Inequality::MixingSquareSummable,
        Inequality::GradientNoiseSummable,
        Inequality::FunctionValueRate,
        Inequality::MixingStability,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Inequality::StepProductDiverges => "δ1 + δ2 ≤ 1",
            Inequality::MixingSquareSummable => "δ2 > 0.5",
            Inequality::GradientNoiseSummable => "2δ1 + δ2 > 1",
            Inequality::FunctionValueRate => "δ1 + 1.5δ2 ≥ 1",
            Inequality::MixingStability => "ε⁰ · max_i d_ii ≤ 1",
        }
    }
}

impl std::fmt::Display for Inequality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub nonconvex_ok: bool,
    pub convex_value_ok: bool,
    /// Decay exponent of the weighted gradient statistic, `min(2 d1, d2)`.
    pub rate_gradient: f64,
    /// Decay exponent of the function-value gap, `min(d1, d2 / 2)`.
    pub rate_value: f64,
    pub mixing_stable: bool,
    pub initial_epsilon: f64,
    pub max_degree: f64,
    pub violations: Vec<Inequality>,
}

impl ConditionReport {
    pub fn violates(&self, which: Inequality) -> bool {
        self.violations.contains(&which)
    }
}
