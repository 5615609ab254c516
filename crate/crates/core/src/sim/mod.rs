//! Desk-scale camera and scene simulator.

mod camera;
mod params;
mod render;
mod scene;

pub use camera::CameraModel;
pub use params::{
    gain_db_to_linear, gain_linear_to_db, CameraParams, EXPOSURE_S_MAX, EXPOSURE_S_MIN,
    GAIN_DB_MAX, GAIN_DB_MIN,
};
pub use render::{render_frame, render_intensities, Frame, Intensities};
pub use scene::{make_tunnel_scene, RadianceScene, TrajectoryPoint, TunnelSceneConfig};
