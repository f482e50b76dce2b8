use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model error: {0}")]
    Model(String),

    /// Schema or invariant violation; `path` is a JSON-pointer-style location.
    #[error("invalid config at {path}: {message}")]
    Config { path: String, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("state explosion: {count} states exceeds the configured cap of {cap}")]
    StateExplosion { count: u128, cap: usize },

    /// No decision sequence from the initial state survives; `slot` is the
    /// earliest slot at which every forward branch is dead (tau + 1 means
    /// the appliances cannot all finish by the end of the horizon).
    #[error("SP infeasible under the scenario set: every branch dies by slot {slot}")]
    Infeasible { slot: usize },

    #[error("privacy bound {lambda_w} W unattainable{}", match smallest_feasible_w {
        Some(l) => format!(" (smallest feasible bound found by probe: {l:.4} W)"),
        None => String::from(" (no feasible bound found by probe)"),
    })]
    PrivacyUnattainable {
        lambda_w: f64,
        smallest_feasible_w: Option<f64>,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("off-table state at slot {slot}: {detail}")]
    OffTable { slot: usize, detail: String },

    #[error("oracle guard rail exceeded: {0}")]
    GuardRail(String),

    #[error("no candidate scenarios")]
    NoScenarios,
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the error class: config/input = 2,
    /// infeasible = 3, integrity = 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Model(_)
            | Error::Config { .. }
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::StateExplosion { .. }
            | Error::GuardRail(_)
            | Error::NoScenarios => 2,
            Error::Infeasible { .. } | Error::PrivacyUnattainable { .. } => 3,
            Error::Integrity(_) | Error::OffTable { .. } => 4,
        }
    }
}
