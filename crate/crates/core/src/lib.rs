//! Upper-body pose estimation from four IMUs.

pub mod body_model;
pub mod calibration;
pub mod formats;
pub mod metrics;
pub mod net;
pub mod physics;
pub mod pipeline;
pub mod synthesis;
