//! Undirected interaction graph, coupling weights and the derived Laplacian
//! and mixing matrices.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues at or below this are treated as zero when testing connectivity.
pub const CONNECTIVITY_TOLERANCE: f64 = 1e-10;

/// Name of the built-in five-agent topology.
pub const PRESET_RING5_CHORD: &str = "ring5-chord";

/// Symmetric, zero-diagonal, connected coupling matrix `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DMatrix<f64>", into = "DMatrix<f64>")]
pub struct Topology {
    weights: DMatrix<f64>,
}

impl TryFrom<DMatrix<f64>> for Topology {
    type Error = Error;

    fn try_from(weights: DMatrix<f64>) -> Result<Self> {
        Topology::from_weights(weights)
    }
}

impl From<Topology> for DMatrix<f64> {
    fn from(t: Topology) -> Self {
        t.weights
    }
}

impl Topology {
    /// Validates an explicit weight matrix.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        let m = weights.nrows();
        if m == 0 || weights.ncols() != m {
            return Err(Error::InvalidTopology(format!(
                "weight matrix must be square and non-empty, got {}x{}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        for i in 0..m {
            if weights[(i, i)] != 0.0 {
                return Err(Error::InvalidTopology(format!(
                    "self-coupling w_{i}{i} = {} must be zero",
                    weights[(i, i)]
                )));
            }
            for j in 0..m {
                let w = weights[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::InvalidTopology(format!(
                        "weight w_{i}{j} = {w} must be finite and nonnegative"
                    )));
                }
                if w != weights[(j, i)] {
                    return Err(Error::InvalidTopology(format!(
                        "weights not symmetric at ({i}, {j}): {w} != {}",
                        weights[(j, i)]
                    )));
                }
            }
        }
        let adjacency = adjacency_of(&weights);
        let components = components(&adjacency);
        if components.len() > 1 {
            return Err(Error::Disconnected { components });
        }
        Ok(Self { weights })
    }

    /// Metropolis weights `w_ij = 1 / (1 + max(deg_i, deg_j))` on a boolean adjacency.
    pub fn metropolis(adjacency: &[Vec<bool>]) -> Result<Self> {
        let m = adjacency.len();
        if m == 0 {
            return Err(Error::InvalidTopology("no agents".into()));
        }
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidTopology(format!(
                    "adjacency row {i} has length {}, expected {m}",
                    row.len()
                )));
            }
            if row[i] {
                return Err(Error::InvalidTopology(format!("self-loop at agent {i}")));
            }
            for j in 0..m {
                if row[j] != adjacency[j][i] {
                    return Err(Error::InvalidTopology(format!(
                        "adjacency not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let components = components(adjacency);
        if components.len() > 1 {
            return Err(Error::Disconnected { components });
        }
        let degree: Vec<usize> = adjacency
            .iter()
            .map(|row| row.iter().filter(|&&a| a).count())
            .collect();
        let weights = DMatrix::from_fn(m, m, |i, j| {
            if adjacency[i][j] {
                1.0 / (1.0 + degree[i].max(degree[j]) as f64)
            } else {
                0.0
            }
        });
        Self::from_weights(weights)
    }

    /// Metropolis weights on an undirected edge list over agents `0..agents`.
    pub fn from_edges(agents: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![vec![false; agents]; agents];
        for &(a, b) in edges {
            if a >= agents || b >= agents {
                return Err(Error::InvalidTopology(format!(
                    "edge ({a}, {b}) references an agent outside 0..{agents}"
                )));
            }
            if a == b {
                return Err(Error::InvalidTopology(format!("self-loop at agent {a}")));
            }
            adjacency[a][b] = true;
            adjacency[b][a] = true;
        }
        Self::metropolis(&adjacency)
    }

    /// Built-in topologies by name.
    ///
    /// `ring5-chord` is a five-agent ring with one chord (0-1-2-3-4-0 plus 1-4).
    /// It stands in for a five-agent network whose exact edge set is not
    /// published; any connected graph can be supplied as an edge list instead.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            PRESET_RING5_CHORD => Self::from_edges(5, &ring5_chord_edges()),
            other => Err(Error::InvalidTopology(format!("unknown preset `{other}`"))),
        }
    }

    pub fn agents(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.agents()).filter(move |&j| self.weights[(i, j)] > 0.0)
    }

    /// Weighted degree `d_ii = sum_j w_ij`.
    pub fn degree(&self, i: usize) -> f64 {
        self.weights.row(i).iter().sum()
    }

    pub fn max_degree(&self) -> f64 {
        (0..self.agents())
            .map(|i| self.degree(i))
            .fold(0.0, f64::max)
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let m = self.agents();
        let mut out = Vec::new();
        for i in 0..m {
            for j in (i + 1)..m {
                if self.weights[(i, j)] > 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// `L = D - W`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let m = self.agents();
        let mut l = -self.weights.clone();
        for i in 0..m {
            l[(i, i)] = self.degree(i);
        }
        l
    }

    /// Eigenvalues of the Laplacian in ascending order.
    pub fn laplacian_spectrum(&self) -> Vec<f64> {
        let mut values: Vec<f64> = SymmetricEigen::new(self.laplacian())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        values.sort_by(f64::total_cmp);
        values
    }

    /// Second smallest Laplacian eigenvalue.
    pub fn algebraic_connectivity(&self) -> Result<f64> {
        if self.agents() == 1 {
            // A lone agent is trivially connected but has no second eigenvalue.
            return Err(Error::InvalidTopology(
                "algebraic connectivity needs at least two agents".into(),
            ));
        }
        let rho = self.laplacian_spectrum()[1];
        if rho <= CONNECTIVITY_TOLERANCE {
            return Err(Error::NotConnected {
                rho,
                tolerance: CONNECTIVITY_TOLERANCE,
            });
        }
        Ok(rho)
    }

    /// Whether `epsilon * max_i d_ii <= 1`.
    pub fn mixing_is_stable(&self, epsilon: f64) -> bool {
        epsilon >= 0.0 && epsilon * self.max_degree() <= 1.0
    }

    /// `A = I - epsilon * L`, entrywise nonnegative and doubly stochastic.
    pub fn mixing_matrix(&self, epsilon: f64) -> Result<DMatrix<f64>> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "mixing step must be finite and nonnegative, got {epsilon}"
            )));
        }
        if !self.mixing_is_stable(epsilon) {
            return Err(Error::UnstableMixing {
                epsilon,
                max_degree: self.max_degree(),
            });
        }
        let m = self.agents();
        Ok(DMatrix::identity(m, m) - self.laplacian() * epsilon)
    }
}

pub fn ring5_chord_edges() -> Vec<(usize, usize)> {
    vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 4)]
}

fn adjacency_of(weights: &DMatrix<f64>) -> Vec<Vec<bool>> {
    let m = weights.nrows();
    (0..m)
        .map(|i| (0..m).map(|j| weights[(i, j)] > 0.0).collect())
        .collect()
}

/// Connected components, each sorted, ordered by smallest member.
fn components(adjacency: &[Vec<bool>]) -> Vec<Vec<usize>> {
    let m = adjacency.len();
    let mut label = vec![usize::MAX; m];
    let mut out = Vec::new();
    for start in 0..m {
        if label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut members = vec![start];
        let mut stack = vec![start];
        label[start] = id;
        while let Some(i) = stack.pop() {
            for j in 0..m {
                if adjacency[i][j] && label[j] == usize::MAX {
                    label[j] = id;
                    members.push(j);
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn path3() -> Topology {
        Topology::from_edges(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn two_node_metropolis() {
        let t = Topology::from_edges(2, &[(0, 1)]).unwrap();
        assert_eq!(t.weight(0, 1), 0.5);
        assert_eq!(t.weight(1, 0), 0.5);
        let l = t.laplacian();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]));
        assert_relative_eq!(t.algebraic_connectivity().unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn path_metropolis_weights() {
        let t = path3();
        assert_relative_eq!(t.weight(0, 1), 1.0 / 3.0);
        assert_relative_eq!(t.weight(1, 2), 1.0 / 3.0);
        assert_eq!(t.weight(0, 2), 0.0);
        assert_eq!(t.neighbors(1).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn path_spectrum() {
        // L = (1/3) * [[1,-1,0],[-1,2,-1],[0,-1,1]] has eigenvalues {0, 1/3, 1}.
        let spectrum = path3().laplacian_spectrum();
        assert_relative_eq!(spectrum[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(spectrum[1], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(spectrum[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_graph_is_disconnected() {
        let err = Topology::from_edges(3, &[]).unwrap_err();
        match err {
            Error::Disconnected { components } => {
                assert_eq!(components, vec![vec![0], vec![1], vec![2]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_components_listed() {
        let err = Topology::from_edges(4, &[(0, 1), (2, 3)]).unwrap_err();
        assert!(err.to_string().contains("[0, 1], [2, 3]"), "{err}");
    }

    #[test]
    fn rejects_bad_weights() {
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.4, 0.0]);
        assert!(Topology::from_weights(asym).is_err());
        let diag = DMatrix::from_row_slice(2, 2, &[0.1, 0.5, 0.5, 0.0]);
        assert!(Topology::from_weights(diag).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, -0.5, 0.0]);
        assert!(Topology::from_weights(neg).is_err());
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let t = Topology::preset(PRESET_RING5_CHORD).unwrap();
        let l = t.laplacian();
        for i in 0..t.agents() {
            assert!(l.row(i).sum().abs() < 1e-15);
        }
    }

    #[test]
    fn mixing_matrix_cases() {
        let t = Topology::from_edges(2, &[(0, 1)]).unwrap();
        assert_eq!(t.mixing_matrix(0.0).unwrap(), DMatrix::identity(2, 2));
        let a = t.mixing_matrix(1.0).unwrap();
        assert_eq!(a, DMatrix::from_element(2, 2, 0.5));
        assert!(matches!(
            t.mixing_matrix(2.5),
            Err(Error::UnstableMixing { .. })
        ));
    }

    #[test]
    fn mixing_matrix_doubly_stochastic() {
        let t = Topology::preset(PRESET_RING5_CHORD).unwrap();
        let eps = 1.0 / t.max_degree();
        let a = t.mixing_matrix(eps).unwrap();
        for i in 0..t.agents() {
            assert!((a.row(i).sum() - 1.0).abs() < 1e-14);
            assert!((a.column(i).sum() - 1.0).abs() < 1e-14);
        }
        assert!(a.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn serde_revalidates() {
        let t = path3();
        let json = serde_json::to_string(&t).unwrap();
        let back: Topology = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        let bad = json.replacen("0.0", "0.25", 1);
        assert!(serde_json::from_str::<Topology>(&bad).is_err());
    }
}
