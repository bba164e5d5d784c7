//! Configuration, persistence, metrics logging and the pipeline stages
//! driven by the command line.

pub mod checkpoint;
pub mod config;
pub mod lock;
pub mod metrics;
pub mod pipeline;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
pub use config::RunConfig;
pub use lock::DirLock;
pub use metrics::MetricsSink;
pub use pipeline::{AblationAxis, AblationRow, Session};
