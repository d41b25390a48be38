//! Deterministic synthetic scenes: a surround camera rig, a labeled point
//! cloud over a tiled ground plane, ground-truth boxes placed on semantically
//! consistent ground (vehicles on driveable surface, pedestrians on
//! sidewalk), ego poses at two timestamps, and exact depth distributions
//! derived from the cloud.
//!
//! Generation is a pure function of `(seed, config)`: every random draw comes
//! from one ChaCha8 stream consumed in a fixed order, so equal inputs yield
//! bit-identical scenes on any platform. The layout is constructed so that no
//! voxel of a grid aligned to the ground tiling ever contains points of two
//! different labels: ground points lie exactly on the z = 0 plane, object
//! points at least [`OBJECT_POINT_CLEARANCE`] above it, and objects of
//! different classes never share a ground cell.

use nalgebra::Point3;
use ndarray::Array4;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{detection, detection_to_semantic, semantic};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraRig, RigCamera, RigidTransform, compose, invert};
use crate::losses::{BOX_DIMS, BoxSet, boxcol};
use crate::view_transform::{DepthBinSpec, DepthDistribution};
use crate::voxelizer::LabeledPointCloud;

/// Minimum height of any object point above the ground plane. Together with
/// the one-class-per-ground-cell placement rule this keeps every aligned
/// voxel label-pure (see module docs).
pub const OBJECT_POINT_CLEARANCE: f64 = 0.5;

/// Everything `generate_scene` needs besides the seed. Loadable from TOML;
/// omitted fields take the defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Cameras in the surround ring.
    pub num_cameras: usize,
    /// Input image height in pixels.
    pub image_height: usize,
    /// Input image width in pixels.
    pub image_width: usize,
    /// Half-extent of the square world; everything lives in [-e, e]^2.
    pub ground_extent: f64,
    /// Side length of one ground tile; must divide `2 * ground_extent`.
    pub ground_cell: f64,
    /// Vehicles to place on driveable-surface tiles.
    pub num_vehicles: usize,
    /// Pedestrians to place on sidewalk tiles.
    pub num_pedestrians: usize,
    /// Ground-surface points in the cloud.
    pub ground_points: usize,
    /// Cloud points sampled on each object.
    pub points_per_object: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_cameras: 6,
            image_height: 32,
            image_width: 48,
            ground_extent: 20.0,
            ground_cell: 5.0,
            num_vehicles: 4,
            num_pedestrians: 4,
            ground_points: 600,
            points_per_object: 60,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_cameras == 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::invalid(
                "SceneConfig",
                "camera count and image size must be positive",
            ));
        }
        if !(self.ground_extent > 0.0) || !(self.ground_cell > 0.0) {
            return Err(Error::invalid(
                "SceneConfig",
                "ground extent and cell size must be positive",
            ));
        }
        let n = (2.0 * self.ground_extent / self.ground_cell).round();
        if n < 1.0 || (n * self.ground_cell - 2.0 * self.ground_extent).abs() > 1e-9 {
            return Err(Error::invalid(
                "SceneConfig",
                format!(
                    "ground cell {} must divide the world side {}",
                    self.ground_cell,
                    2.0 * self.ground_extent
                ),
            ));
        }
        if self.ground_cell < 5.0 && self.num_vehicles > 0 {
            return Err(Error::invalid(
                "SceneConfig",
                "vehicles need ground cells of at least 5 m to stay inside their tile",
            ));
        }
        Ok(())
    }

    fn cells_per_side(&self) -> usize {
        (2.0 * self.ground_extent / self.ground_cell).round() as usize
    }
}

/// A generated scene: the inputs every downstream stage consumes.
#[derive(Debug, Clone)]
pub struct Scene {
    pub rig: CameraRig,
    pub cloud: LabeledPointCloud,
    pub boxes: BoxSet,
    pub ego_curr: RigidTransform,
    pub ego_adj: RigidTransform,
    pub seed: u64,
}

/// Ground tile classes, chosen per cell: a road band through the middle,
/// sidewalk rings beside it, and mixed flat/static classes outside.
fn ground_class_map(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let n = cfg.cells_per_side();
    let road_half = cfg.ground_extent / 3.0;
    let side_limit = road_half + cfg.ground_cell;
    let mut map = Vec::with_capacity(n * n);
    for gy in 0..n {
        let cy = -cfg.ground_extent + (gy as f64 + 0.5) * cfg.ground_cell;
        for _gx in 0..n {
            let class = if cy.abs() <= road_half {
                semantic::DRIVEABLE_SURFACE
            } else if cy.abs() <= side_limit {
                semantic::SIDEWALK
            } else {
                *[
                    semantic::TERRAIN,
                    semantic::OTHER_FLAT,
                    semantic::MANMADE,
                    semantic::VEGETATION,
                ]
                .get(rng.gen_range(0..4))
                .unwrap()
            };
            map.push(class);
        }
    }
    map
}

fn cell_center(cfg: &SceneConfig, gx: usize, gy: usize) -> (f64, f64) {
    (
        -cfg.ground_extent + (gx as f64 + 0.5) * cfg.ground_cell,
        -cfg.ground_extent + (gy as f64 + 0.5) * cfg.ground_cell,
    )
}

/// Surround rig: cameras evenly spaced on a 1 m ring at 1.6 m height, each
/// looking outward. Camera frames use +z forward, +x right, +y down, so the
/// camera-to-world rotation sends those axes to (heading-right, down,
/// heading) respectively.
fn build_rig(cfg: &SceneConfig) -> Result<CameraRig> {
    let fx = 0.8 * cfg.image_width as f64;
    let intr = CameraIntrinsics::new(
        fx,
        fx,
        0.5 * cfg.image_width as f64,
        0.5 * cfg.image_height as f64,
    )?;
    let mut cameras = Vec::with_capacity(cfg.num_cameras);
    for i in 0..cfg.num_cameras {
        let phi = 2.0 * std::f64::consts::PI * i as f64 / cfg.num_cameras as f64;
        let (s, c) = phi.sin_cos();
        let rotation = nalgebra::Matrix3::new(
            s, 0.0, c, //
            -c, 0.0, s, //
            0.0, -1.0, 0.0,
        );
        let translation = nalgebra::Vector3::new(c, s, 1.6);
        let cam_to_lidar = RigidTransform::from_parts(rotation, translation)?;
        cameras.push(RigCamera {
            intrinsics: intr,
            cam_to_lidar,
        });
    }
    CameraRig::new(cameras, cfg.image_height, cfg.image_width)
}

struct PlacedObject {
    det_class: u8,
    x: f64,
    y: f64,
    sx: f64,
    sy: f64,
    sz: f64,
    yaw: f64,
    speed: f64,
    attr: f64,
}

/// Generate a scene from a seed and config. Identical inputs produce
/// bit-identical output.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = build_rig(cfg)?;
    let n = cfg.cells_per_side();
    let ground = ground_class_map(cfg, &mut rng);

    let cells_of = |class: u16| -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for gy in 0..n {
            for gx in 0..n {
                if ground[gy * n + gx] == class {
                    v.push((gx, gy));
                }
            }
        }
        v
    };
    let drive_cells = cells_of(semantic::DRIVEABLE_SURFACE);
    let walk_cells = cells_of(semantic::SIDEWALK);
    if cfg.num_vehicles > drive_cells.len() {
        return Err(Error::Infeasible(format!(
            "{} vehicles requested but only {} driveable cells exist",
            cfg.num_vehicles,
            drive_cells.len()
        )));
    }
    if cfg.num_pedestrians > walk_cells.len() {
        return Err(Error::Infeasible(format!(
            "{} pedestrians requested but only {} sidewalk cells exist",
            cfg.num_pedestrians,
            walk_cells.len()
        )));
    }

    let mut objects = Vec::new();
    let picks = sample(&mut rng, drive_cells.len(), cfg.num_vehicles);
    for idx in picks.iter() {
        let (gx, gy) = drive_cells[idx];
        let (x, y) = cell_center(cfg, gx, gy);
        // Heading along the road (+/- x) with a little wiggle; sizes kept
        // small enough that the rotated footprint stays inside its 5 m tile.
        let base: f64 = if rng.gen_bool(0.5) {
            0.0
        } else {
            std::f64::consts::PI
        };
        let yaw = base + rng.gen_range(-0.2..0.2);
        objects.push(PlacedObject {
            det_class: detection::CAR,
            x,
            y,
            sx: rng.gen_range(3.8..4.4),
            sy: rng.gen_range(1.7..2.1),
            sz: rng.gen_range(1.4..1.7),
            yaw,
            speed: rng.gen_range(0.0..10.0),
            attr: rng.gen_range(0..3) as f64,
        });
    }
    let picks = sample(&mut rng, walk_cells.len(), cfg.num_pedestrians);
    for idx in picks.iter() {
        let (gx, gy) = walk_cells[idx];
        let (cx, cy) = cell_center(cfg, gx, gy);
        objects.push(PlacedObject {
            det_class: detection::PEDESTRIAN,
            x: cx + rng.gen_range(-1.0..1.0),
            y: cy + rng.gen_range(-1.0..1.0),
            sx: rng.gen_range(0.5..0.7),
            sy: rng.gen_range(0.5..0.7),
            sz: rng.gen_range(1.6..1.8),
            yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            speed: rng.gen_range(0.0..1.5),
            attr: rng.gen_range(0..3) as f64,
        });
    }

    let mut rows = ndarray::Array2::zeros((objects.len(), BOX_DIMS));
    let mut det_classes = Vec::with_capacity(objects.len());
    for (i, o) in objects.iter().enumerate() {
        rows[[i, boxcol::X]] = o.x;
        rows[[i, boxcol::Y]] = o.y;
        rows[[i, boxcol::Z]] = o.sz / 2.0;
        rows[[i, boxcol::SX]] = o.sx;
        rows[[i, boxcol::SY]] = o.sy;
        rows[[i, boxcol::SZ]] = o.sz;
        rows[[i, boxcol::SIN_YAW]] = o.yaw.sin();
        rows[[i, boxcol::COS_YAW]] = o.yaw.cos();
        rows[[i, boxcol::VX]] = o.speed * o.yaw.cos();
        rows[[i, boxcol::VY]] = o.speed * o.yaw.sin();
        rows[[i, boxcol::ATTR]] = o.attr;
        det_classes.push(o.det_class);
    }
    let scores = vec![1.0; objects.len()];
    let boxes = BoxSet::new(rows, det_classes, scores)?;
    for m in 0..boxes.len() {
        let (x, y) = boxes.center_xy(m);
        if x.abs() > cfg.ground_extent || y.abs() > cfg.ground_extent {
            return Err(Error::Infeasible(format!(
                "box {m} center ({x}, {y}) escaped the world bound {}",
                cfg.ground_extent
            )));
        }
    }

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..cfg.ground_points {
        let x = rng.gen_range(-cfg.ground_extent..cfg.ground_extent);
        let y = rng.gen_range(-cfg.ground_extent..cfg.ground_extent);
        let gx = ((x + cfg.ground_extent) / cfg.ground_cell) as usize;
        let gy = ((y + cfg.ground_extent) / cfg.ground_cell) as usize;
        points.push(Point3::new(x, y, 0.0));
        labels.push(ground[gy.min(n - 1) * n + gx.min(n - 1)]);
    }
    for o in &objects {
        let label = detection_to_semantic(o.det_class);
        let (s, c) = o.yaw.sin_cos();
        for _ in 0..cfg.points_per_object {
            let lx = rng.gen_range(-o.sx / 2.0..o.sx / 2.0);
            let ly = rng.gen_range(-o.sy / 2.0..o.sy / 2.0);
            let z = rng.gen_range(OBJECT_POINT_CLEARANCE..o.sz);
            points.push(Point3::new(
                o.x + c * lx - s * ly,
                o.y + s * lx + c * ly,
                z,
            ));
            labels.push(label);
        }
    }
    let cloud = LabeledPointCloud::new(points, labels)?;

    // Ego at the current timestamp anchors the scene frame; at the adjacent
    // timestamp it sat slightly behind with a small heading offset.
    let ego_curr = RigidTransform::identity();
    let back = rng.gen_range(0.3..1.5);
    let drift = rng.gen_range(-0.1..0.1);
    let dyaw = rng.gen_range(-0.05..0.05);
    let ego_adj = compose(&RigidTransform::rotation_z(dyaw), &RigidTransform::translation(-back, drift, 0.0));

    Ok(Scene {
        rig,
        cloud,
        boxes,
        ego_curr,
        ego_adj,
        seed,
    })
}

/// Exact depth distribution for one camera: each feature pixel gets a one-hot
/// at the bin containing the nearest cloud point whose projection falls in
/// that pixel, and all zeros when no point does.
///
/// A pixel's column `w` covers image columns `[w*s, (w+1)*s)` with
/// `s = image_width / feat_w` (rows likewise), matching the frustum's
/// pixel-center convention. Points behind the camera or outside the depth
/// range are ignored; depth exactly at the far limit lands in the last bin.
pub fn oracle_depth(
    scene: &Scene,
    cam: usize,
    feat_h: usize,
    feat_w: usize,
    bins: &DepthBinSpec,
) -> Result<DepthDistribution> {
    if cam >= scene.rig.len() {
        return Err(Error::invalid(
            "oracle_depth",
            format!("camera {cam} out of range 0..{}", scene.rig.len()),
        ));
    }
    if feat_h == 0 || feat_w == 0 {
        return Err(Error::invalid(
            "oracle_depth",
            "feature size must be positive",
        ));
    }
    let camera = scene.rig.camera(cam);
    let lidar_to_cam = invert(&camera.cam_to_lidar);
    let img_h = scene.rig.image_height() as f64;
    let img_w = scene.rig.image_width() as f64;
    let bin_width = (bins.d_max - bins.d_min) / bins.bins as f64;

    // Nearest depth seen so far per feature pixel.
    let mut nearest = vec![f64::INFINITY; feat_h * feat_w];
    for p in scene.cloud.points() {
        let q = lidar_to_cam.apply(*p);
        if q.z <= 0.0 || q.z < bins.d_min || q.z > bins.d_max {
            continue;
        }
        let u = camera.intrinsics.fx * q.x / q.z + camera.intrinsics.cx;
        let v = camera.intrinsics.fy * q.y / q.z + camera.intrinsics.cy;
        if u < 0.0 || u >= img_w || v < 0.0 || v >= img_h {
            continue;
        }
        let col = (u * feat_w as f64 / img_w) as usize;
        let row = (v * feat_h as f64 / img_h) as usize;
        let slot = &mut nearest[row.min(feat_h - 1) * feat_w + col.min(feat_w - 1)];
        if q.z < *slot {
            *slot = q.z;
        }
    }

    let mut values = Array4::zeros((1, bins.bins, feat_h, feat_w));
    for row in 0..feat_h {
        for col in 0..feat_w {
            let z = nearest[row * feat_w + col];
            if z.is_finite() {
                let mut bin = ((z - bins.d_min) / bin_width) as usize;
                bin = bin.min(bins.bins - 1);
                values[[0, bin, row, col]] = 1.0;
            }
        }
    }
    DepthDistribution::new(values, *bins)
}
