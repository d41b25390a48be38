//! Numerical core for camera-to-BEV 3D perception.
//!
//! The crate covers the non-learned mathematics of a dual-branch bird's-eye-view
//! perception stack: rigid-body geometry and pinhole cameras, occupancy-grid
//! voxelization of labeled point clouds, the depth-weighted lift-splat view
//! transform with temporal concatenation, a pyramid decoder with cross-branch
//! modality fusion, the detection and occupancy training losses with analytic
//! gradients, and the detection/occupancy evaluation metrics (NDS, mAP, TP
//! errors, mIoU). A deterministic synthetic-scene generator and text-based
//! persistence formats make every stage checkable at desk scale.
//!
//! Learned components (image backbones, depth networks, trained heads) are out
//! of scope: where the dataflow needs them, fixed seeded stand-ins keep the
//! shapes and contracts honest without claiming accuracy.
//!
//! Modules follow the dataflow:
//!
//! - [`geometry`]: rigid transforms, camera intrinsics, projection.
//! - [`voxelizer`]: binary and semantic occupancy grids from point clouds.
//! - [`view_transform`]: frustum construction, lift-splat, temporal concat.
//! - [`fusion_pyramid`]: bilinear upsampling and lambda-weighted branch fusion.
//! - [`losses`]: focal, L1, weighted cross-entropy, Lovasz-softmax, compositions.
//! - [`metrics`]: center-distance matching, AP, TP errors, NDS, voxel mIoU.
//! - [`scenegen`]: deterministic synthetic scenes and the oracle depth model.
//! - [`pipeline`]: end-to-end forward orchestration with seeded stand-in heads.
//! - [`io`]: the shared grid/scene text formats (see `docs/formats.md`).

pub mod classes;
pub mod error;
pub mod fusion_pyramid;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod scenegen;
pub mod view_transform;
pub mod voxelizer;

pub use error::{Error, Result};
