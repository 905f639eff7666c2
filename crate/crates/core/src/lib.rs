//! Event-camera motion processing: slicing event streams into count maps,
//! rigid-motion flow from depth and pose, motion-compensating warps,
//! loss-driven egomotion and object velocity estimation, ground-truth
//! synthesis from tracked point clouds, and evaluation metrics.

pub mod error;
pub mod estimation;
pub mod events;
pub mod geometry;
pub mod grid;
pub mod groundtruth;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod warping;

pub use error::{Error, Result};
