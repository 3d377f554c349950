//! Training, evaluation, probes, protocols and reporting.

pub mod config;
pub mod evaluate;
pub mod probes;
pub mod protocol;
pub mod report;
pub mod train;

pub use config::{ExperimentConfig, ProtocolConfig};
pub use protocol::{ProtocolKind, ProtocolRunner, ProtocolTable};
