//! IO, orchestration and reporting around `lifecycle-audit-core`.
//!
//! * [`orchestrator`] drives a capture subprocess and prompts the operator.
//! * [`segment`] splits raw captures by the logged operation windows.
//! * [`pipeline`] runs a corpus through destination, encryption, TLS and
//!   PII analysis and produces a [`pipeline::ReportBundle`].
//! * [`probe`] is the certificate-replacement interception harness.
//! * [`report`] writes and renders bundles.

pub mod config;
pub mod error;
pub mod geo;
pub mod orchestrator;
pub mod pii;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod segment;
pub mod timestamps;
pub mod trust;

pub use error::AuditError;
pub use lifecycle_audit_core as model;
