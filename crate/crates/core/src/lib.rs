//! Privacy-aware, cost-minimizing scheduling of schedulable appliances and a
//! home battery, robust to the placement of non-schedulable activity.

pub mod config;
pub mod error;
pub mod io;
pub mod model;
pub mod oracle;
pub mod runtime;
pub mod scenario;
pub mod table;

pub use error::{Error, Result};
