//! Simulator and control suite for a hybrid vision/interaction pruning cutter.
//!
//! The crate covers the trellis scene, a segmented-image camera, the
//! approach MDP and its actor-critic learner, the admittance contact
//! controller with its compliant-branch plant, the baseline position
//! controllers, and the trial harness that compares them.

pub mod admittance;
pub mod camera;
pub mod env;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod plant;
pub mod policy;
pub mod scene;
pub mod seed;
pub mod selftest;
pub mod supervisor;

pub use error::{Error, Result};
