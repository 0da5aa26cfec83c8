//! Metrics, synthetic data, accounting and attention export.

pub mod synth;
pub mod metrics;
pub mod toy;
pub mod accounting;
pub mod attention;
pub mod gradsuite;
