//! Geometry, terrain and sensing primitives for robot-centric heightmap
//! reconstruction.
//!
//! The crate covers everything up to (and excluding) the learned model:
//! procedural terrain, LiDAR and depth-camera simulation by ray casting,
//! spherical projection into range images with the preprocessing filter
//! stack, the robot-centric heightmap representation and a deterministic
//! world-frame fusion baseline.

pub mod error;
pub mod fusion;
pub mod geometry;
pub mod heightmap;
pub mod image;
pub mod range_image;
pub mod rng;
pub mod sensor;
pub mod terrain;

pub use error::{CoreError, Result};
pub use geometry::{HeightField, Pose, TerrainKind, Vec3};
pub use heightmap::{Heightmap, HeightmapSpec};
pub use image::MaskedImage;
pub use range_image::RangeImage;
pub use sensor::{DepthCameraModel, DepthImage, LidarModel, PointCloud};
