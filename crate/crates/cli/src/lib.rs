//! Operator-facing surface for the retargeting engine: the live streaming
//! service, its control protocol, paced replay and the `facerig` command
//! implementations.

pub mod commands;
pub mod demo;
pub mod error;
pub mod metrics;
pub mod protocol;
pub mod queue;
pub mod replay;
pub mod service;

pub use error::{CliError, CliResult};
pub use metrics::SessionMetrics;
pub use protocol::{Ack, ControlMessage, ServerMessage};
pub use service::{ServiceConfig, ServiceHandle};
