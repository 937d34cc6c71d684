//! Front-end plumbing: frame containers, synthetic sources, metrics and
//! run configuration.

pub mod config;
pub mod container;
pub mod metrics;
pub mod source;

pub use config::RunConfig;
pub use container::{read_container, write_container, FrameContainer};
pub use metrics::{export_xt_slice, flicker, metrics, structure_mse, xt_slice, MetricsReport};
pub use source::{synthetic_source, SourceKind, SourceParams};
