//! Smooth non-convex test objective
//!
//! ```text
//! f_i(x) = 1/2 x^T Q_i x - b_i^T x + c_i sum_j sin(x_j)
//! ```
//!
//! with `Q_i` symmetric positive semidefinite. Gradients are exact up to
//! additive Gaussian noise of standard deviation `noise_sigma` per coordinate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::GradientOracle;
use crate::error::{Error, Result};
use crate::rng::SeedStreams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonconvexConfig {
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    /// `Q_i = scale * B B^T / d` with standard normal `B`.
    #[serde(default = "default_curvature")]
    pub curvature_scale: f64,
    /// Standard deviation of the entries of `b_i`.
    #[serde(default = "default_linear")]
    pub linear_scale: f64,
    /// `c_i` is uniform on `[-perturbation, perturbation]`.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
}

fn default_dimension() -> usize {
    2
}
fn default_curvature() -> f64 {
    0.5
}
fn default_linear() -> f64 {
    0.5
}
fn default_perturbation() -> f64 {
    0.3
}
fn default_sigma() -> f64 {
    0.5
}

impl Default for NonconvexConfig {
    fn default() -> Self {
        Self {
            dimension: default_dimension(),
            curvature_scale: default_curvature(),
            linear_scale: default_linear(),
            perturbation: default_perturbation(),
            noise_sigma: default_sigma(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonconvexAgent {
    pub curvature: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub perturbation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonconvexProblem {
    pub agents: Vec<NonconvexAgent>,
    pub noise_sigma: f64,
    pub seed: Option<u64>,
}

impl NonconvexProblem {
    pub fn generate(agents: usize, config: &NonconvexConfig, seed: u64) -> Result<Self> {
        let d = config.dimension;
        if agents == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!(
                "non-convex problem sizes must be positive (m={agents}, d={d})"
            )));
        }
        for (name, v) in [
            ("curvature_scale", config.curvature_scale),
            ("linear_scale", config.linear_scale),
            ("perturbation", config.perturbation),
            ("noise_sigma", config.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        let mut rng = SeedStreams::new(seed).problem();
        let list = (0..agents)
            .map(|_| {
                let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let curvature = (&b * b.transpose()) * (config.curvature_scale / d as f64);
                let linear = DVector::from_fn(d, |_, _| {
                    config.linear_scale * rng.sample::<f64, _>(StandardNormal)
                });
                let perturbation = if config.perturbation > 0.0 {
                    rng.random_range(-config.perturbation..=config.perturbation)
                } else {
                    0.0
                };
                NonconvexAgent {
                    curvature,
                    linear,
                    perturbation,
                }
            })
            .collect();
        Ok(Self {
            agents: list,
            noise_sigma: config.noise_sigma,
            seed: Some(seed),
        })
    }

    /// `lambda_max(Q_i) + |c_i|`.
    pub fn lipschitz(&self, agent: usize) -> f64 {
        let a = &self.agents[agent];
        let top = SymmetricEigen::new(a.curvature.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(0.0, f64::max);
        top + a.perturbation.abs()
    }
}

impl GradientOracle for NonconvexProblem {
    fn agents(&self) -> usize {
        self.agents.len()
    }

    fn dimension(&self) -> usize {
        self.agents[0].linear.len()
    }

    fn local_value(&self, agent: usize, x: &DVector<f64>) -> f64 {
        let a = &self.agents[agent];
        0.5 * x.dot(&(&a.curvature * x)) - a.linear.dot(x)
            + a.perturbation * x.iter().map(|v| v.sin()).sum::<f64>()
    }

    fn exact_gradient(&self, agent: usize, x: &DVector<f64>) -> DVector<f64> {
        let a = &self.agents[agent];
        &a.curvature * x - &a.linear + x.map(|v| a.perturbation * v.cos())
    }

    /// Exact gradient plus the mean of `batch` independent Gaussian noise draws.
    fn stochastic_gradient(
        &self,
        agent: usize,
        x: &DVector<f64>,
        batch: usize,
        rng: &mut dyn RngCore,
    ) -> Result<DVector<f64>> {
        if batch == 0 {
            return Err(Error::BatchOutOfRange {
                batch,
                max: usize::MAX,
            });
        }
        let d = x.len();
        let mut noise = DVector::zeros(d);
        for _ in 0..batch {
            for c in 0..d {
                noise[c] += rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(self.exact_gradient(agent, x) + noise * (self.noise_sigma / batch as f64))
    }

    /// Per-coordinate noise standard deviation at batch size one.
    fn noise_bound(&self) -> Option<f64> {
        Some(self.noise_sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem() -> NonconvexProblem {
        NonconvexProblem::generate(5, &NonconvexConfig::default(), 3).unwrap()
    }

    #[test]
    fn curvature_is_psd() {
        for a in &problem().agents {
            let eig = SymmetricEigen::new(a.curvature.clone()).eigenvalues;
            assert!(eig.iter().all(|&v| v >= -1e-12));
            assert_eq!(a.curvature, a.curvature.transpose());
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = problem();
        let mut rng = SeedStreams::new(3).redraw(0);
        let h = 1e-6;
        for _ in 0..20 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            for i in 0..p.agents() {
                let g = p.exact_gradient(i, &x);
                let fd = DVector::from_fn(2, |c, _| {
                    let mut up = x.clone();
                    let mut down = x.clone();
                    up[c] += h;
                    down[c] -= h;
                    (p.local_value(i, &up) - p.local_value(i, &down)) / (2.0 * h)
                });
                assert!((&g - &fd).norm() <= 1e-5 * g.norm().max(1.0));
            }
        }
    }

    #[test]
    fn lipschitz_gradient() {
        let p = problem();
        let mut rng = SeedStreams::new(3).redraw(1);
        for _ in 0..100 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
            let y = DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
            for i in 0..p.agents() {
                let diff = (p.exact_gradient(i, &x) - p.exact_gradient(i, &y)).norm();
                assert!(diff <= p.lipschitz(i) * (&x - &y).norm() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn stochastic_gradient_unbiased() {
        let p = problem();
        let x = DVector::from_vec(vec![0.4, -0.7]);
        let mut rng = SeedStreams::new(3).gradient(0);
        let draws = 10_000;
        let mean = (0..draws)
            .map(|_| p.stochastic_gradient(1, &x, 1, &mut rng).unwrap())
            .fold(DVector::zeros(2), |a, g| a + g)
            / draws as f64;
        let tol = 4.0 * p.noise_sigma / (draws as f64).sqrt();
        assert!((mean - p.exact_gradient(1, &x)).amax() <= tol);
    }

    #[test]
    fn zero_batch_rejected() {
        let p = problem();
        let mut rng = SeedStreams::new(3).gradient(0);
        assert!(p
            .stochastic_gradient(0, &DVector::zeros(2), 0, &mut rng)
            .is_err());
    }
}
