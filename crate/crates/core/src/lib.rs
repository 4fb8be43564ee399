//! Teleoperation mapping between articulated hands through a shared
//! three-dimensional subspace of spread, size and curl.

pub mod baselines;
pub mod empirical;
pub mod error;
pub mod grasp;
pub mod hand_model;
pub mod jsonio;
pub mod ransac;
pub mod seeds;
pub mod session;
pub mod subspace;

pub use error::{Error, Result};
pub use hand_model::{HandModel, JointPose};
pub use subspace::{Axis, TeleopMapping, TeleopPoint};
