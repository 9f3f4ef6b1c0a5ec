//! Kinematic core for hierarchical world-frame end-effector tracking on a
//! reduced humanoid.
//!
//! The crate is organised bottom-up:
//!
//! - [`pose`] and [`chain`]: rigid transforms, the kinematic tree, forward
//!   kinematics, Jacobians and manipulability.
//! - [`ik`]: damped Gauss–Newton inverse kinematics with waist regularization.
//! - [`dataset`]: command sampling, IK-based curation and the mixture sampler.
//! - [`kmp`]: the learned kinematic prior (residual MLP), its trainer and
//!   benchmark harness.
//! - [`rewards`]: reward and error formulas as pure functions.
//! - [`sim`]: the two-timescale commander/tracker simulator and evaluations.
//! - [`config`]: the run configuration file.

pub mod chain;
pub mod config;
pub mod dataset;
pub mod error;
pub mod ik;
pub mod kmp;
pub mod pose;
pub mod rewards;
pub mod sim;
pub mod stats;

pub use chain::{load_chain, manipulability, JointConfig, KinematicChain, ManipulabilityMode, Side};
pub use error::{Error, Result};
pub use pose::Pose;
