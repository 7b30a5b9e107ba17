//! Unbiased stochastic quantizers.
//!
//! The ternary quantizer maps each coordinate `x_i` with `|x_i| <= r` to
//! `r * sign(x_i) * b_i`, where `b_i ~ Bernoulli(|x_i| / r)` independently.
//! Its output distribution is available in closed form through
//! [`element_distribution`], which the privacy checks rely on.

use nalgebra::DVector;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wire::Trit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QuantizerKind {
    Identity,
    Ternary { r: f64 },
}

/// What to do with inputs outside `[-r, r]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClampPolicy {
    #[default]
    Error,
    /// Clip to `[-r, r]` before quantizing. Biased outside the range; runs
    /// that engage it are flagged in their metadata.
    Saturate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    #[serde(flatten)]
    pub kind: QuantizerKind,
    #[serde(default)]
    pub clamp_policy: ClampPolicy,
}

/// Ternary levels plus the scale they reconstruct to.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryOutput {
    pub levels: Vec<Trit>,
    pub r: f64,
}

impl TernaryOutput {
    pub fn reconstruct(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.levels.len(),
            self.levels.iter().map(|t| t.value() as f64 * self.r),
        )
    }
}

/// Result of one quantization call.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub values: DVector<f64>,
    /// Number of coordinates clipped under [`ClampPolicy::Saturate`].
    pub saturated: usize,
}

impl QuantizerSpec {
    pub fn identity() -> Self {
        Self {
            kind: QuantizerKind::Identity,
            clamp_policy: ClampPolicy::Error,
        }
    }

    pub fn ternary(r: f64) -> Result<Self> {
        let spec = Self {
            kind: QuantizerKind::Ternary { r },
            clamp_policy: ClampPolicy::Error,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_clamp_policy(mut self, policy: ClampPolicy) -> Self {
        self.clamp_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let QuantizerKind::Ternary { r } = self.kind {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "ternary threshold r must be positive and finite, got {r}"
                )));
            }
        }
        Ok(())
    }

    pub fn threshold(&self) -> Option<f64> {
        match self.kind {
            QuantizerKind::Identity => None,
            QuantizerKind::Ternary { r } => Some(r),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, QuantizerKind::Identity)
    }

    /// Quantizes `x`, drawing one uniform per coordinate in index order for
    /// the ternary kind. The identity kind consumes no randomness.
    pub fn quantize(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<Quantized> {
        match self.kind {
            QuantizerKind::Identity => Ok(Quantized {
                values: x.clone(),
                saturated: 0,
            }),
            QuantizerKind::Ternary { r } => {
                let (out, saturated) = self.ternary_levels(x, r, rng)?;
                Ok(Quantized {
                    values: out.reconstruct(),
                    saturated,
                })
            }
        }
    }

    /// Ternary levels of `x`; errors for the identity kind.
    pub fn quantize_ternary(
        &self,
        x: &DVector<f64>,
        rng: &mut dyn RngCore,
    ) -> Result<TernaryOutput> {
        match self.kind {
            QuantizerKind::Identity => Err(Error::InvalidArgument(
                "identity quantizer has no ternary representation".into(),
            )),
            QuantizerKind::Ternary { r } => Ok(self.ternary_levels(x, r, rng)?.0),
        }
    }

    fn ternary_levels(
        &self,
        x: &DVector<f64>,
        r: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(TernaryOutput, usize)> {
        let mut saturated = 0;
        if self.clamp_policy == ClampPolicy::Error {
            if let Some((index, &value)) = x
                .iter()
                .enumerate()
                .find(|(_, v)| v.is_nan() || v.abs() > r)
            {
                return Err(Error::ThresholdViolation {
                    index,
                    value,
                    threshold: r,
                });
            }
        }
        let levels = x
            .iter()
            .map(|&v| {
                if v.is_nan() {
                    return Err(Error::InvalidArgument("cannot quantize NaN".into()));
                }
                let clipped = if v.abs() > r {
                    saturated += 1;
                    v.clamp(-r, r)
                } else {
                    v
                };
                let u: f64 = rng.random();
                let fires = u < clipped.abs() / r;
                Ok(match (fires, clipped > 0.0) {
                    (false, _) => Trit::Zero,
                    (true, true) => Trit::Plus,
                    (true, false) => Trit::Minus,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((TernaryOutput { levels, r }, saturated))
    }
}

/// Exact output law of one ternary coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementDistribution {
    pub minus: f64,
    pub zero: f64,
    pub plus: f64,
}

impl ElementDistribution {
    pub fn probability(&self, level: Trit) -> f64 {
        match level {
            Trit::Minus => self.minus,
            Trit::Zero => self.zero,
            Trit::Plus => self.plus,
        }
    }

    pub fn mean(&self, r: f64) -> f64 {
        r * self.plus - r * self.minus
    }
}

fn check_domain(x: f64, r: f64) -> Result<()> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive and finite, got {r}"
        )));
    }
    if x.is_nan() || x.abs() > r {
        return Err(Error::Domain {
            value: x,
            threshold: r,
        });
    }
    Ok(())
}

/// `(P(q = -r), P(q = 0), P(q = r))` for input `x` with `|x| <= r`.
pub fn element_distribution(x: f64, r: f64) -> Result<ElementDistribution> {
    check_domain(x, r)?;
    let p = x.abs() / r;
    let rest = 1.0 - p;
    Ok(if x >= 0.0 {
        ElementDistribution {
            minus: 0.0,
            zero: rest,
            plus: p,
        }
    } else {
        ElementDistribution {
            minus: p,
            zero: rest,
            plus: 0.0,
        }
    })
}

/// Variance of one ternary coordinate, `r|x| - x^2`.
pub fn element_variance(x: f64, r: f64) -> Result<f64> {
    check_domain(x, r)?;
    Ok(r * x.abs() - x * x)
}

/// Input-dependent proportionality constant `r * d / ||x||` of the variance
/// bound `E||Q(x) - x||^2 <= beta ||x||^2`. Infinite at `x = 0`.
pub fn variance_proportionality(x: &DVector<f64>, r: f64) -> f64 {
    x.len() as f64 * r / x.norm()
}
