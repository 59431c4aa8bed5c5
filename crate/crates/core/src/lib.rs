//! Deterministic simulation and benchmark suite for peg transfer under
//! cable-drive transmission error, with intermittent visual-servo
//! correction by an imitation-learned policy ensemble.
//!
//! The crate is organized bottom-up:
//!
//! * [`workspace`]: board geometry, blocks, pegs, task state.
//! * [`actuator`]: commanded-vs-true kinematics with backlash hysteresis,
//!   and the fitted observer used by the calibrated baseline.
//! * [`image`], [`render`]: raster types and the top-down board renderer.
//! * [`datapipe`]: demonstration recording, label extraction, datasets.
//! * [`nn`], [`policy`]: the convolutional regressor and the voting
//!   ensemble trained on demonstrations.
//! * [`supervisor`]: scripted expert that produces demonstrations.
//! * [`control`]: open-loop, calibrated and servo-corrected controllers.
//! * [`bench`]: trial runner, metrics and reports.
//!
//! Everything is seeded explicitly; equal seeds give bit-equal artifacts.

pub mod actuator;
pub mod bench;
pub mod config;
pub mod control;
pub mod datapipe;
pub mod error;
pub mod image;
pub mod nn;
pub mod policy;
pub mod render;
pub mod rng;
pub mod supervisor;
pub mod workspace;

pub use error::{Error, Result};
