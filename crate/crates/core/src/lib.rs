//! Desk-scale visual localization by scene coordinate regression with
//! attention- and edge-guided feature selection.
//!
//! The pipeline: a scene-agnostic backbone turns grayscale mapping images
//! into dense feature grids; a frozen spatial attention network scores grid
//! cells; a Canny edge mask marks robust regions; the sampler intersects the
//! top-scoring cells with the edge regions (dilated by a radius) and fills a
//! shuffled training buffer; a small scene-specific head is trained under a
//! robust reprojection objective; queries are localized with a P3P RANSAC
//! solver refined by Gauss-Newton.

pub mod attention;
pub mod features;
pub mod geometry;
pub mod imaging;

pub use geometry::{CameraIntrinsics, PixelPoint, Pose, ScenePoint};
