//! Gradient oracles for the local objectives `f_i`.

use nalgebra::DVector;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::Result;

mod nonconvex;
mod sensor;

pub use nonconvex::{NonconvexConfig, NonconvexProblem};
pub use sensor::{
    closed_form_optimum, make_sensor_problem, MeasurementNoise, SensorAgent, SensorConfig,
    SensorEstimationProblem,
};

/// Per-agent objectives with exact and sampled gradients.
///
/// Implementations must be unbiased: averaging `stochastic_gradient` over the
/// sampling distribution gives `exact_gradient`.
pub trait GradientOracle: Send + Sync {
    fn agents(&self) -> usize;

    fn dimension(&self) -> usize;

    /// `f_i(x)`.
    fn local_value(&self, agent: usize, x: &DVector<f64>) -> f64;

    /// `grad f_i(x)`.
    fn exact_gradient(&self, agent: usize, x: &DVector<f64>) -> DVector<f64>;

    fn stochastic_gradient(
        &self,
        agent: usize,
        x: &DVector<f64>,
        batch: usize,
        rng: &mut dyn RngCore,
    ) -> Result<DVector<f64>>;

    /// Minimizer of `sum_i f_i`, when known in closed form.
    fn optimum(&self) -> Option<&DVector<f64>> {
        None
    }

    /// Upper bound on the per-call gradient noise standard deviation, if known.
    fn noise_bound(&self) -> Option<f64> {
        None
    }

    /// `f(x) = (1/m) sum_i f_i(x)`.
    fn value(&self, x: &DVector<f64>) -> f64 {
        (0..self.agents())
            .map(|i| self.local_value(i, x))
            .sum::<f64>()
            / self.agents() as f64
    }

    /// `grad f(x) = (1/m) sum_i grad f_i(x)`.
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dimension());
        for i in 0..self.agents() {
            g += self.exact_gradient(i, x);
        }
        g / self.agents() as f64
    }
}

/// A concrete problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Problem {
    Sensor(SensorEstimationProblem),
    Nonconvex(NonconvexProblem),
}

impl Problem {
    fn inner(&self) -> &dyn GradientOracle {
        match self {
            Problem::Sensor(p) => p,
            Problem::Nonconvex(p) => p,
        }
    }
}

impl GradientOracle for Problem {
    fn agents(&self) -> usize {
        self.inner().agents()
    }

    fn dimension(&self) -> usize {
        self.inner().dimension()
    }

    fn local_value(&self, agent: usize, x: &DVector<f64>) -> f64 {
        self.inner().local_value(agent, x)
    }

    fn exact_gradient(&self, agent: usize, x: &DVector<f64>) -> DVector<f64> {
        self.inner().exact_gradient(agent, x)
    }

    fn stochastic_gradient(
        &self,
        agent: usize,
        x: &DVector<f64>,
        batch: usize,
        rng: &mut dyn RngCore,
    ) -> Result<DVector<f64>> {
        self.inner().stochastic_gradient(agent, x, batch, rng)
    }

    fn optimum(&self) -> Option<&DVector<f64>> {
        self.inner().optimum()
    }

    fn noise_bound(&self) -> Option<f64> {
        self.inner().noise_bound()
    }
}
