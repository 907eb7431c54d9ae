//! Two-stage 3D detection building blocks for point clouds: voxelization,
//! region feature aggregation, graph-based refinement of box proposals, the
//! training losses, and KITTI/nuScenes-style evaluation.

pub mod error;
pub mod geom;
pub mod gnn;
pub mod gradcheck;
pub mod interp;
pub mod metrics;
pub mod nnet;
pub mod pipeline;
pub mod rfa;
pub mod scene;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
