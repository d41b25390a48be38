//! End-to-end forward pass: scene → exact depth → lift-splat → temporal
//! concat → channel reduction → dual-branch feature pyramid with cross-branch
//! fusion → detection heads and occupancy decode.
//!
//! No stage is learned. Every weight matrix is a bias-free linear map drawn
//! from a ChaCha8 stream keyed by `(weight_seed, tag)`, so a zero input maps
//! to a zero output, runs are bit-reproducible at any thread count, and the
//! whole pipeline exercises the real dataflow contracts — shapes, fusion
//! algebra, decode conventions — rather than accuracy. Head activations are
//! chosen zero-preserving for the same reason: an empty scene stays
//! detectably empty all the way through.

use ndarray::{Array2, Array3, Array4, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::NUM_SEMANTIC_CLASSES;
use crate::error::{Error, Result};
use crate::fusion_pyramid::{
    AdapterDirection, FusionAdapter, FusionConfig, PyramidFeatures, pyramid_decode, pyramid_fuse,
};
use crate::geometry::{compose, invert};
use crate::losses::{BOX_DIMS, BoxSet, HEATMAP_CLAMP, Heatmap, NUM_DETECTION_CLASSES, boxcol};
use crate::scenegen::{Scene, oracle_depth};
use crate::view_transform::{
    BevFeature, DepthBinSpec, DepthDistribution, ImageFeature, lift_splat, temporal_concat,
};
use crate::voxelizer::{SemanticVoxelGrid, VoxelGridSpec};

/// Which occupancy vocabulary the second branch predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Binary occupancy: classes {empty, occupied}.
    Bo,
    /// Semantic occupancy: the full 17-class vocabulary.
    Se,
}

impl Variant {
    pub fn num_classes(self) -> u16 {
        match self {
            Variant::Bo => 2,
            Variant::Se => NUM_SEMANTIC_CLASSES,
        }
    }
}

/// Voxel grid geometry as it appears in config files.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub r_x: f64,
    pub r_y: f64,
    pub r_z: f64,
}

impl GridConfig {
    pub fn to_spec(self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(
            self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max, self.r_x,
            self.r_y, self.r_z,
        )
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x_min: -51.2,
            x_max: 51.2,
            y_min: -51.2,
            y_max: 51.2,
            z_min: -5.0,
            z_max: 3.0,
            r_x: 0.8,
            r_y: 0.8,
            r_z: 8.0,
        }
    }
}

/// Depth discretization as it appears in config files.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub bins: usize,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            d_max: 60.0,
            bins: 59,
        }
    }
}

impl DepthConfig {
    pub fn to_spec(self) -> Result<DepthBinSpec> {
        DepthBinSpec::new(self.d_min, self.d_max, self.bins)
    }
}

/// Full pipeline configuration. Loadable from TOML; omitted fields take the
/// defaults, which mirror the method's published operating point (16×44
/// feature maps, 59 depth bins, a 128×128 BEV grid, 128 BEV channels).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub variant: Variant,
    /// Fusion retention weight; 1 keeps branches independent.
    pub lambda: f64,
    /// Seed for every stand-in weight matrix.
    pub weight_seed: u64,
    /// Image feature channels entering the view transform.
    pub image_channels: usize,
    /// BEV channels after fusing the temporal pair.
    pub bev_channels: usize,
    /// Image feature rows (the depth distribution shares this size).
    pub feature_height: usize,
    /// Image feature columns.
    pub feature_width: usize,
    /// Peaks below or at this confidence are dropped in decode.
    pub score_min: f64,
    /// Detections kept per scene.
    pub max_detections: usize,
    /// Skip the occupancy branch and its fusion entirely.
    pub disable_oc: bool,
    pub grid: GridConfig,
    pub depth: DepthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Se,
            lambda: 0.9,
            weight_seed: 0,
            image_channels: 8,
            bev_channels: 128,
            feature_height: 16,
            feature_width: 44,
            score_min: 0.3,
            max_detections: 100,
            disable_oc: false,
            grid: GridConfig::default(),
            depth: DepthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(VoxelGridSpec, DepthBinSpec)> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(
                "PipelineConfig",
                format!("lambda {} outside [0, 1]", self.lambda),
            ));
        }
        if self.image_channels == 0 || self.bev_channels == 0 {
            return Err(Error::invalid(
                "PipelineConfig",
                "channel counts must be positive",
            ));
        }
        if self.feature_height == 0 || self.feature_width == 0 {
            return Err(Error::invalid(
                "PipelineConfig",
                "feature map size must be positive",
            ));
        }
        if !(self.score_min > HEATMAP_CLAMP && self.score_min < 1.0) {
            return Err(Error::invalid(
                "PipelineConfig",
                format!(
                    "score_min {} must lie in ({HEATMAP_CLAMP}, 1) so clamp-floor cells never decode",
                    self.score_min
                ),
            ));
        }
        let grid = self.grid.to_spec()?;
        let bins = self.depth.to_spec()?;
        let (nx, ny, nz) = grid.dims();
        if nz != 1 {
            return Err(Error::invalid(
                "PipelineConfig",
                format!("pipeline grids collapse height into channels; need nz = 1, got {nz}"),
            ));
        }
        if nx % 8 != 0 || ny % 8 != 0 {
            return Err(Error::invalid(
                "PipelineConfig",
                format!("BEV dims {nx}x{ny} must be divisible by 8 for the three pyramid halvings"),
            ));
        }
        Ok((grid, bins))
    }
}

// ---------------------------------------------------------------------------
// Seeded stand-in weights.

/// Stable 64-bit FNV-1a over the tag, folded with the seed, so each named
/// weight matrix gets an independent reproducible stream.
fn tag_seed(seed: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bias-free linear weights, uniform in ±1/√fan_in, filled row-major.
fn seeded_matrix(seed: u64, tag: &str, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(tag_seed(seed, tag));
    let scale = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

/// Apply a per-cell linear map: `(o, c) x (c, X, Y) -> (o, X, Y)`.
fn linear_map(w: &Array2<f64>, f: &Array3<f64>) -> Array3<f64> {
    let (c, x, y) = f.dim();
    debug_assert_eq!(w.ncols(), c);
    let flat = f.as_standard_layout();
    let flat = flat
        .view()
        .into_shape_with_order((c, x * y))
        .expect("standard layout reshape");
    let out = w.dot(&flat);
    out.into_shape_with_order((w.nrows(), x, y))
        .expect("product reshape")
}

/// Halve both spatial axes by averaging 2×2 blocks.
fn avg_pool2(f: &Array3<f64>) -> Array3<f64> {
    let (c, x, y) = f.dim();
    debug_assert!(x % 2 == 0 && y % 2 == 0);
    Array3::from_shape_fn((c, x / 2, y / 2), |(ch, i, j)| {
        0.25 * (f[[ch, 2 * i, 2 * j]]
            + f[[ch, 2 * i, 2 * j + 1]]
            + f[[ch, 2 * i + 1, 2 * j]]
            + f[[ch, 2 * i + 1, 2 * j + 1]])
    })
}

/// Zero-preserving squashing onto [0, 1): z²/(1+z²). Keeps empty inputs
/// empty, unlike a sigmoid whose zero point is ½.
fn squash(z: f64) -> f64 {
    z * z / (1.0 + z * z)
}

// ---------------------------------------------------------------------------
// Forward pass.

/// Everything a forward run produces, plus the stage-shape trace.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub heatmap: Heatmap,
    /// Regression planes, `(11, X, Y)`.
    pub regression: Array3<f64>,
    pub boxes: BoxSet,
    pub occupancy: SemanticVoxelGrid,
    /// BEV feature straight out of the view transform.
    pub bev_lifted: BevFeature,
    /// BEV feature after temporal concat and channel reduction.
    pub bev_reduced: BevFeature,
    /// Decoded detection-branch map entering the heads.
    pub od_map: BevFeature,
    /// Decoded occupancy-branch map; absent when the branch is disabled.
    pub oc_map: Option<BevFeature>,
    pub trace: Vec<StageShape>,
}

/// One line of the stage trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    pub dims: Vec<usize>,
}

/// Render the trace in its documented one-line-per-stage form.
pub fn render_trace(trace: &[StageShape]) -> String {
    let mut out = String::new();
    for t in trace {
        out.push_str("stage ");
        out.push_str(&t.stage);
        for d in &t.dims {
            out.push_str(&format!(" {d}"));
        }
        out.push('\n');
    }
    out
}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Stage {
        stage,
        msg: e.to_string(),
    }
}

/// Run the full forward pass on one scene.
pub fn run_forward(scene: &Scene, cfg: &PipelineConfig) -> Result<ForwardOutputs> {
    let (grid, bins) = cfg.validate()?;
    let n = scene.rig.len();
    let (fh, fw) = (cfg.feature_height, cfg.feature_width);
    let mut trace = Vec::new();
    let mut record = |stage: &str, dims: &[usize]| {
        trace.push(StageShape {
            stage: stage.to_string(),
            dims: dims.to_vec(),
        });
    };

    // Exact per-camera depth from the cloud.
    let mut depth_values = Array4::zeros((n, bins.bins, fh, fw));
    for cam in 0..n {
        let d = oracle_depth(scene, cam, fh, fw, &bins).map_err(stage_err("oracle_depth"))?;
        depth_values
            .slice_mut(s![cam..cam + 1, .., .., ..])
            .assign(&d.values);
    }
    let depth =
        DepthDistribution::new(depth_values, bins).map_err(stage_err("oracle_depth"))?;
    record("oracle_depth", &[n, bins.bins, fh, fw]);

    // Stand-in image features: seeded noise where a backbone would run.
    let mut rng = ChaCha8Rng::seed_from_u64(tag_seed(cfg.weight_seed, "image_features"));
    let feat_values =
        Array4::from_shape_fn((n, cfg.image_channels, fh, fw), |_| rng.gen_range(-1.0..1.0));
    let features = ImageFeature::new(feat_values).map_err(stage_err("image_features"))?;
    record("image_features", &[n, cfg.image_channels, fh, fw]);

    let bev_lifted =
        lift_splat(&features, &depth, &scene.rig, &grid).map_err(stage_err("lift_splat"))?;
    let (nx, ny, _) = grid.dims();
    record("lift_splat", &[cfg.image_channels, nx, ny]);

    // The adjacent frame reuses the current BEV map; the warp geometry is
    // what this stage exercises.
    let ego_motion = compose(&invert(&scene.ego_adj), &scene.ego_curr);
    let bev_concat = temporal_concat(&bev_lifted, &bev_lifted, &ego_motion)
        .map_err(stage_err("temporal_concat"))?;
    record("temporal_concat", &[2 * cfg.image_channels, nx, ny]);

    let w_reduce = seeded_matrix(
        cfg.weight_seed,
        "bev_reduce",
        cfg.bev_channels,
        2 * cfg.image_channels,
    );
    let reduced = linear_map(&w_reduce, &bev_concat.values);
    let bev_reduced =
        BevFeature::new(reduced, grid.clone()).map_err(stage_err("bev_reduce"))?;
    record("bev_reduce", &[cfg.bev_channels, nx, ny]);

    // Three pooled scales (1/2, 1/4, 1/8), each remapped per branch.
    let half = avg_pool2(&bev_reduced.values);
    let quarter = avg_pool2(&half);
    let eighth = avg_pool2(&quarter);
    let scales = [half, quarter, eighth];
    let branch_pyramid = |branch: &str| -> Result<PyramidFeatures> {
        let levels = scales
            .iter()
            .enumerate()
            .map(|(lvl, f)| {
                let w = seeded_matrix(
                    cfg.weight_seed,
                    &format!("pyr_{branch}_{lvl}"),
                    cfg.bev_channels,
                    cfg.bev_channels,
                );
                linear_map(&w, f)
            })
            .collect();
        PyramidFeatures::new(levels)
    };
    let pyr_det = branch_pyramid("det").map_err(stage_err("pyramid"))?;
    for (lvl, f) in pyr_det.levels().iter().enumerate() {
        let (c, x, y) = f.dim();
        record(&format!("pyramid_level_{lvl}"), &[c, x, y]);
    }

    let (od_full, oc_full) = if cfg.disable_oc {
        (pyramid_decode(&pyr_det), None)
    } else {
        let pyr_occ = branch_pyramid("occ").map_err(stage_err("pyramid"))?;
        let fusion = FusionConfig::new(cfg.lambda).map_err(stage_err("pyramid_fuse"))?;
        let adapters: Vec<(FusionAdapter, FusionAdapter)> = (0..3)
            .map(|lvl| {
                let a = FusionAdapter::new(
                    seeded_matrix(
                        cfg.weight_seed,
                        &format!("adapter_occ_to_det_{lvl}"),
                        cfg.bev_channels,
                        cfg.bev_channels,
                    ),
                    AdapterDirection::OccToDet,
                )?;
                let b = FusionAdapter::new(
                    seeded_matrix(
                        cfg.weight_seed,
                        &format!("adapter_det_to_occ_{lvl}"),
                        cfg.bev_channels,
                        cfg.bev_channels,
                    ),
                    AdapterDirection::DetToOcc,
                )?;
                Ok((a, b))
            })
            .collect::<Result<_>>()
            .map_err(stage_err("pyramid_fuse"))?;
        let (od, oc) =
            pyramid_fuse(&pyr_det, &pyr_occ, &adapters, &fusion).map_err(stage_err("pyramid_fuse"))?;
        (od, Some(oc))
    };
    record("decode_od", &[cfg.bev_channels, nx, ny]);
    let od_map = BevFeature::new(od_full, grid.clone()).map_err(stage_err("decode_od"))?;
    let oc_map = match oc_full {
        Some(oc) => {
            record("decode_oc", &[cfg.bev_channels, nx, ny]);
            Some(BevFeature::new(oc, grid.clone()).map_err(stage_err("decode_oc"))?)
        }
        None => None,
    };

    // Heads: per-cell linear maps with zero-preserving activations.
    let w_heat = seeded_matrix(
        cfg.weight_seed,
        "head_heatmap",
        NUM_DETECTION_CLASSES,
        cfg.bev_channels,
    );
    let heat_logits = linear_map(&w_heat, &od_map.values);
    let heatmap = Heatmap::new(heat_logits.mapv(squash)).map_err(stage_err("heads"))?;
    record("heatmap", &[NUM_DETECTION_CLASSES, nx, ny]);

    let w_reg = seeded_matrix(cfg.weight_seed, "head_reg", BOX_DIMS, cfg.bev_channels);
    let regression = linear_map(&w_reg, &od_map.values);
    record("regression", &[BOX_DIMS, nx, ny]);

    let num_occ_classes = cfg.variant.num_classes();
    let occupancy = match &oc_map {
        Some(oc) => {
            let w_occ = seeded_matrix(
                cfg.weight_seed,
                "head_occ",
                num_occ_classes as usize,
                cfg.bev_channels,
            );
            let logits = linear_map(&w_occ, &oc.values);
            decode_occupancy(&logits, &grid, num_occ_classes)
        }
        // Branch disabled: the prediction is everywhere-empty.
        None => SemanticVoxelGrid {
            spec: grid.clone(),
            num_classes: num_occ_classes,
            class_ids: Array3::zeros((nx, ny, 1)),
            labeled_mask: Array3::ones((nx, ny, 1)),
        },
    };
    record("occupancy", &[nx, ny, 1]);

    let boxes = decode_heatmap(
        &heatmap,
        &regression,
        &grid,
        cfg.max_detections,
        cfg.score_min,
    )
    .map_err(stage_err("decode_boxes"))?;
    record("boxes", &[boxes.len(), BOX_DIMS + 2]);

    Ok(ForwardOutputs {
        heatmap,
        regression,
        boxes,
        occupancy,
        bev_lifted,
        bev_reduced,
        od_map,
        oc_map,
        trace,
    })
}

/// Per-cell argmax over class logits, ties to the lowest class id.
fn decode_occupancy(
    logits: &Array3<f64>,
    grid: &VoxelGridSpec,
    num_classes: u16,
) -> SemanticVoxelGrid {
    let (o, x, y) = logits.dim();
    debug_assert_eq!(o, num_classes as usize);
    let mut class_ids = Array3::zeros((x, y, 1));
    for i in 0..x {
        for j in 0..y {
            let mut best = 0usize;
            for c in 1..o {
                if logits[[c, i, j]] > logits[[best, i, j]] {
                    best = c;
                }
            }
            class_ids[[i, j, 0]] = best as u16;
        }
    }
    SemanticVoxelGrid {
        spec: grid.clone(),
        num_classes,
        class_ids,
        labeled_mask: Array3::ones((x, y, 1)),
    }
}

/// Extract boxes from a heatmap and its regression planes.
///
/// A cell is a peak when it strictly exceeds its 3×3 neighbors in the same
/// channel, with exact ties won by the earlier cell in row-major order. Peaks
/// scoring above `score_min` are ranked by score (ties by class, then row,
/// then column) and the top `k` become boxes: centers from the cell origin
/// plus the regressed fractional offset times the cell pitch, sizes from
/// exponentiated scale planes, heading read from the (sin, cos) planes and
/// normalized.
pub fn decode_heatmap(
    h: &Heatmap,
    reg: &Array3<f64>,
    grid: &VoxelGridSpec,
    k: usize,
    score_min: f64,
) -> Result<BoxSet> {
    let (classes, x, y) = h.values().dim();
    if reg.dim() != (BOX_DIMS, x, y) {
        return Err(Error::shape(
            "decode_heatmap",
            format!(
                "regression dims {:?} do not match heatmap cells ({BOX_DIMS}, {x}, {y})",
                reg.dim()
            ),
        ));
    }
    let (nx, ny, _) = grid.dims();
    if (x, y) != (nx, ny) {
        return Err(Error::shape(
            "decode_heatmap",
            format!("heatmap cells {x}x{y} do not match grid {nx}x{ny}"),
        ));
    }

    let v = h.values();
    let mut peaks: Vec<(f64, usize, usize, usize)> = Vec::new();
    for c in 0..classes {
        for i in 0..x {
            for j in 0..y {
                let val = v[[c, i, j]];
                if val <= score_min {
                    continue;
                }
                let mut is_peak = true;
                'scan: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= x as i64 || nj >= y as i64 {
                            continue;
                        }
                        let nv = v[[c, ni as usize, nj as usize]];
                        // Earlier row-major cell wins exact ties.
                        if nv > val || (nv == val && (ni as usize, nj as usize) < (i, j)) {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if is_peak {
                    peaks.push((val, c, i, j));
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| (a.1, a.2, a.3).cmp(&(b.1, b.2, b.3)))
    });
    peaks.truncate(k);

    let mut rows = Array2::zeros((peaks.len(), BOX_DIMS));
    let mut det_classes = Vec::with_capacity(peaks.len());
    let mut scores = Vec::with_capacity(peaks.len());
    for (m, &(score, c, i, j)) in peaks.iter().enumerate() {
        rows[[m, boxcol::X]] = grid.x_min + (i as f64 + reg[[boxcol::X, i, j]]) * grid.r_x;
        rows[[m, boxcol::Y]] = grid.y_min + (j as f64 + reg[[boxcol::Y, i, j]]) * grid.r_y;
        rows[[m, boxcol::Z]] = reg[[boxcol::Z, i, j]];
        rows[[m, boxcol::SX]] = reg[[boxcol::SX, i, j]].exp();
        rows[[m, boxcol::SY]] = reg[[boxcol::SY, i, j]].exp();
        rows[[m, boxcol::SZ]] = reg[[boxcol::SZ, i, j]].exp();
        let (sin, cos) = (reg[[boxcol::SIN_YAW, i, j]], reg[[boxcol::COS_YAW, i, j]]);
        let norm = (sin * sin + cos * cos).sqrt();
        let (sin, cos) = if norm > 1e-6 {
            (sin / norm, cos / norm)
        } else {
            (0.0, 1.0)
        };
        rows[[m, boxcol::SIN_YAW]] = sin;
        rows[[m, boxcol::COS_YAW]] = cos;
        rows[[m, boxcol::VX]] = reg[[boxcol::VX, i, j]];
        rows[[m, boxcol::VY]] = reg[[boxcol::VY, i, j]];
        rows[[m, boxcol::ATTR]] = reg[[boxcol::ATTR, i, j]].round();
        det_classes.push(c as u8);
        scores.push(score);
    }
    BoxSet::new(rows, det_classes, scores)
}
