//! Predictive camera gain/exposure control, end to end on a desk: a seeded
//! scene/sensor simulator, a corner-feature matching pipeline, dual-camera
//! perturbation sampling with metric-argmax labeling, a small convolutional
//! controller network trained from scratch, and classical baseline
//! controllers to compare against.

pub mod config;
pub mod controllers;
pub mod error;
pub mod eval;
pub mod io;
pub mod features;
pub mod labeler;
pub mod model;
pub mod pipeline;
pub mod image;
pub mod rng;
pub mod sampler;
pub mod sim;

pub use error::{Error, Result};
pub use image::{FloatImage, GrayImage};
pub use sim::{CameraModel, CameraParams, Frame, RadianceScene};
