//! Decentralized linear estimation: agent `i` holds `n_i` measurements
//! `z_ij = M_i theta + w_ij` and the regularized least-squares loss
//!
//! ```text
//! f_i(theta) = (1/n_i) sum_j ||z_ij - M_i theta||^2 + r_i ||theta||^2
//! ```

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::GradientOracle;
use crate::error::{Error, Result};
use crate::rng::SeedStreams;

const MAX_REROLLS: u32 = 64;
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasurementNoise {
    /// Each component i.i.d. uniform on `[0, 1]`.
    #[default]
    Uniform01,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    /// Rows of each measurement matrix.
    #[serde(default = "default_measurements")]
    pub measurements: usize,
    /// Parameter dimension.
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    /// Measurements per agent.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_regularization")]
    pub regularization: f64,
    /// Standard deviation of the entries of `M_i`.
    #[serde(default = "default_measurement_scale")]
    pub measurement_scale: f64,
    #[serde(default)]
    pub noise: MeasurementNoise,
    /// Fixed ground truth; drawn uniform on `[-1, 1]^d` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_true: Option<Vec<f64>>,
}

fn default_measurements() -> usize {
    3
}
fn default_dimension() -> usize {
    2
}
fn default_samples() -> usize {
    100
}
fn default_regularization() -> f64 {
    0.01
}
fn default_measurement_scale() -> f64 {
    0.3
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            measurements: default_measurements(),
            dimension: default_dimension(),
            samples: default_samples(),
            regularization: default_regularization(),
            measurement_scale: default_measurement_scale(),
            noise: MeasurementNoise::default(),
            theta_true: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorAgent {
    /// `M_i`, `s x d`.
    pub measurement: DMatrix<f64>,
    /// `z_i1 .. z_in`, each of length `s`.
    pub samples: Vec<DVector<f64>>,
    pub regularization: f64,
    sample_mean: DVector<f64>,
}

impl SensorAgent {
    pub fn new(
        measurement: DMatrix<f64>,
        samples: Vec<DVector<f64>>,
        regularization: f64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument(
                "agent needs at least one sample".into(),
            ));
        }
        if let Some(bad) = samples.iter().find(|z| z.len() != measurement.nrows()) {
            return Err(Error::InvalidArgument(format!(
                "sample of length {} does not match {} measurement rows",
                bad.len(),
                measurement.nrows()
            )));
        }
        if !(regularization >= 0.0 && regularization.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "regularization must be nonnegative, got {regularization}"
            )));
        }
        let sample_mean = mean_of(samples.iter());
        Ok(Self {
            measurement,
            samples,
            regularization,
            sample_mean,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let fitted = &self.measurement * x;
        let data: f64 = self
            .samples
            .iter()
            .map(|z| (z - &fitted).norm_squared())
            .sum::<f64>()
            / self.samples.len() as f64;
        data + self.regularization * x.norm_squared()
    }

    /// `2 M^T (M x - zbar) + 2 r x` for a given sample mean `zbar`.
    fn gradient_at_mean(&self, x: &DVector<f64>, mean: &DVector<f64>) -> DVector<f64> {
        let residual = &self.measurement * x - mean;
        self.measurement.tr_mul(&residual) * 2.0 + x * (2.0 * self.regularization)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.gradient_at_mean(x, &self.sample_mean)
    }

    /// Lipschitz constant of the gradient, `2 (lambda_max(M^T M) + r)`.
    pub fn lipschitz(&self) -> f64 {
        let gram = self.measurement.tr_mul(&self.measurement);
        let top = SymmetricEigen::new(gram)
            .eigenvalues
            .iter()
            .copied()
            .fold(0.0, f64::max);
        2.0 * (top + self.regularization)
    }
}

fn mean_of<'a>(mut vectors: impl Iterator<Item = &'a DVector<f64>>) -> DVector<f64> {
    let first = vectors.next().expect("nonempty").clone();
    let mut count = 1usize;
    let sum = vectors.fold(first, |acc, v| {
        count += 1;
        acc + v
    });
    sum / count as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorEstimationProblem {
    pub agents: Vec<SensorAgent>,
    pub theta_true: DVector<f64>,
    pub optimum: DVector<f64>,
    /// Seed the instance was generated from, if any.
    pub seed: Option<u64>,
    /// Draws rejected for a singular aggregate system.
    pub rerolls: u32,
}

impl SensorEstimationProblem {
    pub fn from_agents(agents: Vec<SensorAgent>, theta_true: DVector<f64>) -> Result<Self> {
        let optimum = closed_form_optimum(&agents)?;
        Ok(Self {
            agents,
            theta_true,
            optimum,
            seed: None,
            rerolls: 0,
        })
    }

    pub fn lipschitz(&self, agent: usize) -> f64 {
        self.agents[agent].lipschitz()
    }
}

/// Minimizer of `sum_i f_i`, from the normal equations
/// `sum_i (M_i^T M_i + r_i I) theta = sum_i M_i^T zbar_i`.
pub fn closed_form_optimum(agents: &[SensorAgent]) -> Result<DVector<f64>> {
    let first = agents
        .first()
        .ok_or_else(|| Error::InvalidArgument("no agents".into()))?;
    let d = first.measurement.ncols();
    let mut normal = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for a in agents {
        if a.measurement.ncols() != d {
            return Err(Error::InvalidArgument(
                "measurement matrices disagree on the parameter dimension".into(),
            ));
        }
        normal += a.measurement.tr_mul(&a.measurement) + DMatrix::identity(d, d) * a.regularization;
        rhs += a.measurement.tr_mul(&a.sample_mean);
    }
    let rank = numerical_rank(&normal);
    if rank < d {
        return Err(Error::Singular { rank, dimension: d });
    }
    let chol = normal.clone().cholesky().ok_or(Error::Singular {
        rank: d - 1,
        dimension: d,
    })?;
    let mut x = chol.solve(&rhs);
    // One refinement pass tightens the aggregate residual.
    let residual = &rhs - &normal * &x;
    x += chol.solve(&residual);
    Ok(x)
}

fn numerical_rank(symmetric: &DMatrix<f64>) -> usize {
    let eig = SymmetricEigen::new(symmetric.clone()).eigenvalues;
    let scale = eig.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    eig.iter().filter(|v| **v > RANK_TOLERANCE * scale).count()
}

/// Draws an instance from the problem stream of `seed`. Entries of `M_i` are
/// normal with standard deviation `measurement_scale`; draws whose aggregate
/// normal matrix is singular are rejected and redrawn.
pub fn make_sensor_problem(
    agents: usize,
    config: &SensorConfig,
    seed: u64,
) -> Result<SensorEstimationProblem> {
    let s = config.measurements;
    let d = config.dimension;
    let n = config.samples;
    if agents == 0 || s == 0 || d == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "sensor problem sizes must be positive (m={agents}, s={s}, d={d}, n={n})"
        )));
    }
    if !(config.measurement_scale > 0.0 && config.measurement_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "measurement_scale must be positive, got {}",
            config.measurement_scale
        )));
    }
    if let Some(t) = &config.theta_true {
        if t.len() != d {
            return Err(Error::InvalidArgument(format!(
                "theta_true has length {}, expected {d}",
                t.len()
            )));
        }
    }
    let mut rng = SeedStreams::new(seed).problem();
    for attempt in 0..=MAX_REROLLS {
        let theta_true = match &config.theta_true {
            Some(t) => DVector::from_column_slice(t),
            None => DVector::from_fn(d, |_, _| rng.random_range(-1.0..=1.0)),
        };
        let mut list = Vec::with_capacity(agents);
        for _ in 0..agents {
            let measurement = DMatrix::from_fn(s, d, |_, _| {
                config.measurement_scale * rng.sample::<f64, _>(StandardNormal)
            });
            let clean = &measurement * &theta_true;
            let samples = (0..n)
                .map(|_| match config.noise {
                    MeasurementNoise::Uniform01 => {
                        DVector::from_fn(s, |i, _| clean[i] + rng.random::<f64>())
                    }
                    MeasurementNoise::None => clean.clone(),
                })
                .collect();
            list.push(SensorAgent::new(
                measurement,
                samples,
                config.regularization,
            )?);
        }
        match SensorEstimationProblem::from_agents(list, theta_true) {
            Ok(mut p) => {
                p.seed = Some(seed);
                p.rerolls = attempt;
                return Ok(p);
            }
            Err(Error::Singular { rank, dimension }) => {
                log::warn!(
                    "seed {seed}: aggregate normal matrix has rank {rank} < {dimension}; redrawing"
                );
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidArgument(format!(
        "no nonsingular sensor instance after {MAX_REROLLS} redraws"
    )))
}

impl GradientOracle for SensorEstimationProblem {
    fn agents(&self) -> usize {
        self.agents.len()
    }

    fn dimension(&self) -> usize {
        self.theta_true.len()
    }

    fn local_value(&self, agent: usize, x: &DVector<f64>) -> f64 {
        self.agents[agent].value(x)
    }

    fn exact_gradient(&self, agent: usize, x: &DVector<f64>) -> DVector<f64> {
        self.agents[agent].gradient(x)
    }

    /// Gradient of the loss over `batch` measurements drawn uniformly without
    /// replacement. The batch is averaged in index order, so `batch = n_i`
    /// reproduces the exact gradient bit for bit.
    fn stochastic_gradient(
        &self,
        agent: usize,
        x: &DVector<f64>,
        batch: usize,
        rng: &mut dyn RngCore,
    ) -> Result<DVector<f64>> {
        let a = &self.agents[agent];
        let n = a.sample_count();
        if batch == 0 || batch > n {
            return Err(Error::BatchOutOfRange { batch, max: n });
        }
        let mut picked = index::sample(rng, n, batch).into_vec();
        picked.sort_unstable();
        let mean = mean_of(picked.iter().map(|&j| &a.samples[j]));
        Ok(a.gradient_at_mean(x, &mean))
    }

    fn optimum(&self) -> Option<&DVector<f64>> {
        Some(&self.optimum)
    }

    /// Largest single-sample deviation `||2 M^T (z_j - zbar)||`.
    fn noise_bound(&self) -> Option<f64> {
        let bound = self
            .agents
            .iter()
            .flat_map(|a| {
                a.samples
                    .iter()
                    .map(move |z| (a.measurement.tr_mul(&(z - &a.sample_mean)) * 2.0).norm())
            })
            .fold(0.0, f64::max);
        Some(bound)
    }
}
