//! Compliant grasp planning: fit a probabilistic implicit surface to a
//! partial point cloud, then optimise a pre-grasp, per-finger spring targets
//! and gains so that the spring-driven grasping process settles into a
//! force-closure equilibrium.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod gpis;
pub mod hand;
pub mod io;
pub mod objective;
pub mod optimizer;
pub mod pointcloud;
pub mod sim;
pub mod spring;

pub use error::{Error, Result};
