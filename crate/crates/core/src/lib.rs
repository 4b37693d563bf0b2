//! Fixation-relative stereo disparity simulation and a small convolutional
//! network that recovers absolute viewing distance from it.
//!
//! The pipeline has two stages. [`geometry`] and [`scene`] turn a procedural
//! scene into a per-pixel disparity map relative to the fixated surface;
//! [`model`] learns to read fixation distance back out of that map.
//! [`dataset`] materializes the train/test protocol and [`eval`] scores the
//! result against analytic baselines.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod model;
pub mod par;
pub mod scene;

pub use error::{Error, Result};
pub use geometry::{DepthMap, DisparityMap, ViewingGeometry};
pub use par::Exec;
pub use scene::{Inventory, Removal, SceneSpec, SceneVariant};
