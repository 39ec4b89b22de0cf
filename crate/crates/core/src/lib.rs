//! World-centric 3D tracking from precomputed dense 2D tracks, monocular
//! depth maps, and coarse dynamic masks.
//!
//! The pipeline estimates per-frame camera poses in three stages (clip-level
//! pose initialization, dynamic background refinement, dynamic object
//! tracking) and lifts every track into a global 3D trajectory.

pub mod audit;
pub mod dyntrack;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod pose_init;
pub mod refine;
pub mod solver;
pub mod synth;
pub mod tensorio;
pub mod trackset;

pub use geometry::{CameraModel, PoseSE3};
pub use tensorio::{PipelineConfig, SceneBundle};
pub use trackset::TrackSet2D;
