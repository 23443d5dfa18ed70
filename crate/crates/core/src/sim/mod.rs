//! Verification engine: rigid-body simulation of the grasping process,
//! margin traces, force-closure feasibility and the planar coverage study.

pub mod closure;
pub mod coverage;
pub mod dynamics;

pub use closure::{force_closure_feasible, ClosureResult, ClosureStatus, Dim, TorqueModel};
pub use coverage::{coverage_experiment, default_scenarios, CoverageOptions, CoverageReport};
pub use dynamics::{
    force_normal_angles, margin_trace, simulate, write_trajectory_csv, ForceMode, NormalSource, RigidBodyState,
    SimOptions, SimStatus, SimTrajectory,
};
