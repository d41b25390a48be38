//! Occupancy voxel grids from point clouds.
//!
//! Points are binned by `floor((p - min) / r)` per axis. A point is kept when
//! `min <= p <= max` on every axis; the closed upper bound means a point at
//! exactly `max` would floor to an index one past the end, so those are clamped
//! to the last voxel instead of being dropped. Everything else lands outside
//! the grid and is discarded.
//!
//! Two grid flavors exist: binary (cell is occupied or not) and semantic
//! (each occupied cell carries a class id plus a supervision mask). Class 0 is
//! reserved for "empty"; point labels are in `[1, num_classes - 1]`.

use std::collections::HashMap;

use nalgebra::Point3;
use ndarray::Array3;

use crate::error::{Error, Result};

/// Relative tolerance for the exact-divisibility check on grid extents.
const DIVISIBILITY_TOL: f64 = 1e-9;

/// Axis-aligned voxel grid bounds and resolution, in meters.
///
/// The extent of each axis must be an exact positive-integer multiple of that
/// axis's resolution; the derived cell counts are fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub r_x: f64,
    pub r_y: f64,
    pub r_z: f64,
    dims: (usize, usize, usize),
}

fn axis_dim(name: &str, min: f64, max: f64, r: f64) -> Result<usize> {
    if !(max > min) {
        return Err(Error::invalid(
            "VoxelGridSpec",
            format!("{name}: max ({max}) must exceed min ({min})"),
        ));
    }
    if !(r > 0.0) {
        return Err(Error::invalid(
            "VoxelGridSpec",
            format!("{name}: resolution must be positive, got {r}"),
        ));
    }
    let ratio = (max - min) / r;
    let dim = ratio.round();
    if dim < 1.0 || (ratio - dim).abs() > DIVISIBILITY_TOL * dim.max(1.0) {
        return Err(Error::invalid(
            "VoxelGridSpec",
            format!("{name}: extent {} is not an integer multiple of resolution {r}", max - min),
        ));
    }
    Ok(dim as usize)
}

impl VoxelGridSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        z_min: f64,
        z_max: f64,
        r_x: f64,
        r_y: f64,
        r_z: f64,
    ) -> Result<Self> {
        let dims = (
            axis_dim("x", x_min, x_max, r_x)?,
            axis_dim("y", y_min, y_max, r_y)?,
            axis_dim("z", z_min, z_max, r_z)?,
        );
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            z_min,
            z_max,
            r_x,
            r_y,
            r_z,
            dims,
        })
    }

    /// Cell counts `(X, Y, Z)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }
}

/// Single-axis binning rule shared by the 3D voxelizer and the BEV splat:
/// keep `v` when `min <= v <= max`, bin by `floor((v - min) / r)`, and clamp
/// the `v == max` case onto the last of `n` cells.
pub(crate) fn axis_index(v: f64, min: f64, max: f64, r: f64, n: usize) -> Option<usize> {
    if !(min..=max).contains(&v) {
        return None;
    }
    let i = ((v - min) / r).floor() as usize;
    Some(i.min(n - 1))
}

/// Map a point to its voxel index, or `None` when any coordinate falls outside
/// `[min, max]`. Points at exactly the upper bound clamp to the last voxel.
pub fn point_to_index(spec: &VoxelGridSpec, p: Point3<f64>) -> Option<(usize, usize, usize)> {
    let (nx, ny, nz) = spec.dims;
    Some((
        axis_index(p.x, spec.x_min, spec.x_max, spec.r_x, nx)?,
        axis_index(p.y, spec.y_min, spec.y_max, spec.r_y, ny)?,
        axis_index(p.z, spec.z_min, spec.z_max, spec.r_z, nz)?,
    ))
}

/// A grid of occupied/free cells. `values[[x, y, z]]` is 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryVoxelGrid {
    pub spec: VoxelGridSpec,
    pub values: Array3<u8>,
}

/// Mark each cell holding at least one in-bound point as occupied.
pub fn binary_occupancy(spec: &VoxelGridSpec, pts: &[Point3<f64>]) -> BinaryVoxelGrid {
    let mut values = Array3::zeros(spec.dims());
    for &p in pts {
        if let Some(idx) = point_to_index(spec, p) {
            values[[idx.0, idx.1, idx.2]] = 1;
        }
    }
    BinaryVoxelGrid { spec: *spec, values }
}

/// A point cloud with one semantic label per point.
///
/// Labels occupy `[1, num_classes - 1]`; 0 means "empty" and is never a point
/// label. The label range is validated when the cloud is voxelized, not here,
/// because the class count belongs to the grid being built.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    points: Vec<Point3<f64>>,
    labels: Vec<u16>,
}

impl LabeledPointCloud {
    pub fn new(points: Vec<Point3<f64>>, labels: Vec<u16>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::shape(
                "LabeledPointCloud",
                format!("{} points but {} labels", points.len(), labels.len()),
            ));
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }
}

/// A grid of per-cell class ids plus a supervision mask.
///
/// `class_ids` holds values in `[0, num_classes - 1]`; `labeled_mask` is 1
/// exactly where a cell received at least one point. Cells with mask 0 always
/// carry class 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVoxelGrid {
    pub spec: VoxelGridSpec,
    pub num_classes: u16,
    pub class_ids: Array3<u16>,
    pub labeled_mask: Array3<u8>,
}

/// Bin a labeled cloud and assign each occupied cell the majority class of its
/// points, breaking ties toward the lowest class id. Point-free cells stay
/// class 0 with mask 0.
pub fn semantic_occupancy(
    spec: &VoxelGridSpec,
    cloud: &LabeledPointCloud,
    num_classes: u16,
) -> Result<SemanticVoxelGrid> {
    if num_classes < 2 {
        return Err(Error::invalid(
            "semantic_occupancy",
            format!("need at least 2 classes (empty + one semantic), got {num_classes}"),
        ));
    }
    // Per-cell label histograms; only cells that actually receive points pay.
    let mut histograms: HashMap<(usize, usize, usize), Vec<u32>> = HashMap::new();
    for (&p, &label) in cloud.points().iter().zip(cloud.labels()) {
        if label == 0 || label >= num_classes {
            return Err(Error::invalid(
                "semantic_occupancy",
                format!("point label {label} outside [1, {}]", num_classes - 1),
            ));
        }
        if let Some(idx) = point_to_index(spec, p) {
            let hist = histograms
                .entry(idx)
                .or_insert_with(|| vec![0u32; num_classes as usize]);
            hist[label as usize] += 1;
        }
    }

    let mut class_ids = Array3::zeros(spec.dims());
    let mut labeled_mask = Array3::zeros(spec.dims());
    for (idx, hist) in histograms {
        // Scanning ascending ids with a strict `>` makes ties land on the
        // lowest class id.
        let mut best_class = 0u16;
        let mut best_count = 0u32;
        for (class, &count) in hist.iter().enumerate() {
            if count > best_count {
                best_count = count;
                best_class = class as u16;
            }
        }
        class_ids[[idx.0, idx.1, idx.2]] = best_class;
        labeled_mask[[idx.0, idx.1, idx.2]] = 1;
    }
    Ok(SemanticVoxelGrid {
        spec: *spec,
        num_classes,
        class_ids,
        labeled_mask,
    })
}
