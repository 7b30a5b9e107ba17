//! Experiment configuration, read from TOML.
//!
//! ```toml
//! iterations = 5000
//! seeds = [1, 2, 3]
//! batch = 1                  # optional
//! log_mode = "metrics-only"  # or "full"
//! problem_seed = 7           # optional; otherwise each run seed draws its own instance
//!
//! [topology]
//! preset = "ring5-chord"     # or: agents = 5, edges = [[0, 1], [1, 2]]
//!
//! [schedule]
//! a1 = 1.0
//! a2 = 1.0
//! a3 = 0.3
//! delta1 = 0.3
//! delta2 = 0.6
//!
//! [quantizer]
//! kind = "ternary"           # or "identity"
//! r = 5.0
//! clamp_policy = "error"     # or "saturate"
//!
//! [problem]
//! kind = "sensor"            # or "nonconvex"
//! measurements = 3
//! dimension = 2
//! samples = 100
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::LogMode;
use crate::error::{Error, Result};
use crate::problems::{
    make_sensor_problem, NonconvexConfig, NonconvexProblem, Problem, SensorConfig,
};
use crate::quantizer::QuantizerSpec;
use crate::schedule::Schedule;
use crate::topology::Topology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub iterations: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub log_mode: LogMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_seed: Option<u64>,
    pub topology: TopologyConfig,
    pub schedule: Schedule,
    pub quantizer: QuantizerSpec,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_batch() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProblemConfig {
    Sensor(SensorConfig),
    Nonconvex(NonconvexConfig),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// Pulls the backquoted key out of serde messages such as
/// "missing field `seeds`".
fn field_from_message(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

impl RunConfig {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = field_from_message(&message).unwrap_or_else(|| "config".into());
            let location = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!(" (line {line})")
                })
                .unwrap_or_default();
            Error::config(field, format!("{message}{location}"))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    /// Structural checks that do not depend on the seed.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        self.schedule
            .check()
            .map_err(|e| Error::config("schedule", strip(e)))?;
        self.quantizer
            .validate()
            .map_err(|e| Error::config("quantizer.r", strip(e)))?;
        let topo = self.build_topology()?;
        match &self.problem {
            ProblemConfig::Sensor(c) => {
                if c.samples > 0 && self.batch > c.samples {
                    return Err(Error::config(
                        "batch",
                        format!("exceeds problem.samples = {}", c.samples),
                    ));
                }
                if let Some(t) = &c.theta_true {
                    if t.len() != c.dimension {
                        return Err(Error::config(
                            "problem.theta_true",
                            format!(
                                "length {} does not match dimension {}",
                                t.len(),
                                c.dimension
                            ),
                        ));
                    }
                }
                for (name, v) in [
                    ("problem.measurements", c.measurements),
                    ("problem.dimension", c.dimension),
                    ("problem.samples", c.samples),
                ] {
                    if v == 0 {
                        return Err(Error::config(name, "must be positive"));
                    }
                }
            }
            ProblemConfig::Nonconvex(c) => {
                if c.dimension == 0 {
                    return Err(Error::config("problem.dimension", "must be positive"));
                }
            }
        }
        if topo.agents() == 0 {
            return Err(Error::config("topology", "no agents"));
        }
        Ok(())
    }

    pub fn build_topology(&self) -> Result<Topology> {
        let t = &self.topology;
        let built = match (&t.preset, t.agents, &t.edges) {
            (Some(name), None, None) => Topology::preset(name),
            (None, Some(m), Some(edges)) => {
                let list: Vec<(usize, usize)> = edges.iter().map(|e| (e[0], e[1])).collect();
                Topology::from_edges(m, &list)
            }
            (Some(_), _, _) => {
                return Err(Error::config(
                    "topology",
                    "give either `preset` or `agents` with `edges`, not both",
                ))
            }
            (None, None, _) => return Err(Error::config("topology.agents", "missing")),
            (None, Some(_), None) => return Err(Error::config("topology.edges", "missing")),
        };
        built.map_err(|e| {
            let field = if t.preset.is_some() {
                "topology.preset"
            } else {
                "topology.edges"
            };
            Error::config(field, strip(e))
        })
    }

    /// Seed that draws the problem instance for run seed `seed`.
    pub fn instance_seed(&self, seed: u64) -> u64 {
        self.problem_seed.unwrap_or(seed)
    }

    pub fn build_problem(&self, agents: usize, seed: u64) -> Result<Problem> {
        let s = self.instance_seed(seed);
        Ok(match &self.problem {
            ProblemConfig::Sensor(c) => Problem::Sensor(make_sensor_problem(agents, c, s)?),
            ProblemConfig::Nonconvex(c) => {
                Problem::Nonconvex(NonconvexProblem::generate(agents, c, s)?)
            }
        })
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::InvalidArgument(m) | Error::InvalidTopology(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::QuantizerKind;

    const BASE: &str = r#"
iterations = 100
seeds = [1, 2]
log_mode = "full"

[topology]
preset = "ring5-chord"

[schedule]
a1 = 1.0
a2 = 1.0
a3 = 0.3
delta1 = 0.3
delta2 = 0.6

[quantizer]
kind = "ternary"
r = 5.0

[problem]
kind = "sensor"
samples = 50
"#;

    fn field_of(text: &str) -> String {
        match RunConfig::from_toml_str(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn parses_reference() {
        let c = RunConfig::from_toml_str(BASE).unwrap();
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.batch, 1);
        assert_eq!(c.log_mode, LogMode::Full);
        assert_eq!(c.schedule, Schedule::reference());
        assert_eq!(c.quantizer.kind, QuantizerKind::Ternary { r: 5.0 });
        assert_eq!(c.build_topology().unwrap().agents(), 5);
        match &c.problem {
            ProblemConfig::Sensor(s) => {
                assert_eq!(s.samples, 50);
                assert_eq!(s.measurements, 3);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn round_trip_is_idempotent() {
        let c = RunConfig::from_toml_str(BASE).unwrap();
        let text = c.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string(), text);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::from_toml_str(BASE).unwrap();
        let b = RunConfig::from_toml_str(&BASE.replace("r = 5.0", "r = 2.0")).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn edge_list_topology() {
        let text = BASE.replace(
            "preset = \"ring5-chord\"",
            "agents = 3\nedges = [[0, 1], [1, 2]]",
        );
        let c = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(c.build_topology().unwrap().agents(), 3);
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of(&BASE.replace("seeds = [1, 2]\n", "")), "seeds");
        assert_eq!(
            field_of(&BASE.replace("seeds = [1, 2]", "seeds = []")),
            "seeds"
        );
        assert_eq!(
            field_of(&BASE.replace("r = 5.0", "r = -1.0")),
            "quantizer.r"
        );
        assert_eq!(field_of(&BASE.replace("a3 = 0.3", "a3 = 0.0")), "schedule");
        assert_eq!(
            field_of(&BASE.replace("samples = 50", "samples = 50\nbogus = 1")),
            "bogus"
        );
        assert_eq!(
            field_of(&BASE.replace(
                "preset = \"ring5-chord\"",
                "agents = 4\nedges = [[0, 1], [2, 3]]"
            )),
            "topology.edges"
        );
        assert_eq!(
            field_of(&BASE.replace("ring5-chord", "nope")),
            "topology.preset"
        );
        assert_eq!(
            field_of(&BASE.replace("log_mode = \"full\"", "batch = 0")),
            "batch"
        );
        assert_eq!(
            field_of(&BASE.replace("log_mode = \"full\"", "batch = 51")),
            "batch"
        );
    }

    #[test]
    fn problem_instance_follows_seed() {
        let c = RunConfig::from_toml_str(BASE).unwrap();
        assert_ne!(
            c.build_problem(5, 1).unwrap(),
            c.build_problem(5, 2).unwrap()
        );
        let fixed = RunConfig::from_toml_str(&format!("problem_seed = 9\n{BASE}")).unwrap();
        assert_eq!(
            fixed.build_problem(5, 1).unwrap(),
            fixed.build_problem(5, 2).unwrap()
        );
    }
}
