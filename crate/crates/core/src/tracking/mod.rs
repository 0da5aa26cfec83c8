//! Online tracking: crops, the Kalman filter and the per-frame loop.

pub mod crop;
pub mod kalman;
pub mod tracker;
