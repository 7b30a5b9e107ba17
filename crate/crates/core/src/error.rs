use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("graph is disconnected; components: {}", format_components(.components))]
    Disconnected { components: Vec<Vec<usize>> },

    #[error("algebraic connectivity {rho:e} is not above tolerance {tolerance:e}; graph is disconnected")]
    NotConnected { rho: f64, tolerance: f64 },

    #[error("mixing step {epsilon} violates stability bound epsilon * max_i d_ii <= 1 (max degree {max_degree})")]
    UnstableMixing { epsilon: f64, max_degree: f64 },

    #[error("quantizer threshold violated at index {index}: |{value}| > r = {threshold}")]
    ThresholdViolation {
        index: usize,
        value: f64,
        threshold: f64,
    },

    #[error("value {value} outside quantizer domain [-{threshold}, {threshold}]")]
    Domain { value: f64, threshold: f64 },

    #[error("singular normal equations: rank {rank} of {dimension}")]
    Singular { rank: usize, dimension: usize },

    #[error("batch size {batch} out of range 1..={max}")]
    BatchOutOfRange { batch: usize, max: usize },

    #[error("state diverged at iteration {iteration}: max |x| = {max_abs:e}")]
    Diverged { iteration: u64, max_abs: f64 },

    #[error("attack step size {0:e} is too small for a well-conditioned inversion")]
    IllConditioned(f64),

    #[error("trajectory has no round logs; rerun with full logging")]
    MissingLogs,

    #[error("malformed codeword: {0}")]
    MalformedCodeword(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

fn format_components(components: &[Vec<usize>]) -> String {
    components
        .iter()
        .map(|c| format!("{c:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}
