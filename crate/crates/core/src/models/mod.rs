//! Layer graphs, executable networks, the built-in model zoo, and keypoint
//! heatmap encoding.

pub mod graph;
pub mod heatmap;
pub mod network;
pub mod zoo;

pub use graph::{Layer, LayerGraph, LayerSpec, Shape};
pub use heatmap::{decode_keypoints, decode_to_image, render_heatmaps, HEATMAP_SIGMA};
pub use network::{Mode, Network};
