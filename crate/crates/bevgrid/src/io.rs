//! The two on-disk formats: `bevgrid-scene v1` for complete scenes and
//! `bevgrid-grid v1` for everything array-shaped (voxel grids, features,
//! heatmaps, adapter weights).
//!
//! Both are strict line-oriented text. Floating-point values are written with
//! Rust's shortest round-trip formatting and parsed back bit-exactly, so
//! save/load is lossless, not merely close. Parsers reject unknown versions
//! and report the line number and field of the first offending token.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;
use ndarray::{Array2, Array3, ArrayView};

use crate::error::{Error, Result};
use crate::fusion_pyramid::{AdapterDirection, FusionAdapter};
use crate::geometry::{CameraIntrinsics, CameraRig, RigCamera, RigidTransform};
use crate::losses::{BOX_DIMS, BoxSet};
use crate::scenegen::Scene;
use crate::view_transform::BevFeature;
use crate::voxelizer::{BinaryVoxelGrid, LabeledPointCloud, SemanticVoxelGrid, VoxelGridSpec};

const SCENE_MAGIC: &str = "bevgrid-scene v1";
const GRID_MAGIC: &str = "bevgrid-grid v1";

// ---------------------------------------------------------------------------
// Line-oriented reading with position tracking.

struct Reader<'a> {
    lines: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines(),
            line_no: 0,
        }
    }

    /// Next line, failing with the name of the thing that should have been
    /// there.
    fn line(&mut self, field: &str) -> Result<&'a str> {
        self.line_no += 1;
        self.lines
            .next()
            .ok_or_else(|| Error::parse(self.line_no, field, "file ends before this field"))
    }

    /// Next line split on spaces, checked to start with `keyword`.
    fn keyed(&mut self, keyword: &str) -> Result<Vec<&'a str>> {
        let line = self.line(keyword)?;
        let mut parts = line.split(' ');
        match parts.next() {
            Some(k) if k == keyword => Ok(parts.collect()),
            _ => Err(Error::parse(
                self.line_no,
                keyword,
                format!("expected a `{keyword}` line, got `{line}`"),
            )),
        }
    }

    fn parse_one<T: std::str::FromStr>(&self, token: &str, field: &str) -> Result<T> {
        token
            .parse()
            .map_err(|_| Error::parse(self.line_no, field, format!("bad value `{token}`")))
    }

    fn parse_all<T: std::str::FromStr>(&self, tokens: &[&str], field: &str) -> Result<Vec<T>> {
        tokens
            .iter()
            .map(|t| self.parse_one(t, field))
            .collect()
    }

    /// Exactly `n` values after `keyword`.
    fn fixed<T: std::str::FromStr, const N: usize>(&mut self, keyword: &str) -> Result<[T; N]> {
        let parts = self.keyed(keyword)?;
        if parts.len() != N {
            return Err(Error::parse(
                self.line_no,
                keyword,
                format!("expected {N} values, got {}", parts.len()),
            ));
        }
        let values: Vec<T> = self.parse_all(&parts, keyword)?;
        Ok(values
            .try_into()
            .unwrap_or_else(|_| unreachable!("length checked above")))
    }

    fn expect_magic(&mut self, magic: &str) -> Result<()> {
        let line = self.line("version header")?;
        if line != magic {
            return Err(Error::Version {
                expected: magic.to_string(),
                found: line.to_string(),
            });
        }
        Ok(())
    }

    fn expect_end(&mut self) -> Result<()> {
        let line = self.line("end")?;
        if line != "end" {
            return Err(Error::parse(
                self.line_no,
                "end",
                format!("expected trailing `end`, got `{line}`"),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn push_floats(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

// ---------------------------------------------------------------------------
// Scene format.

/// Write a scene as a `bevgrid-scene v1` document.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{SCENE_MAGIC}");
    let _ = writeln!(out, "seed {}", scene.seed);
    let _ = writeln!(
        out,
        "image {} {}",
        scene.rig.image_height(),
        scene.rig.image_width()
    );
    let _ = writeln!(out, "cameras {}", scene.rig.len());
    for (i, cam) in scene.rig.cameras().iter().enumerate() {
        let _ = writeln!(out, "camera {i}");
        out.push_str("intrinsics ");
        push_floats(
            &mut out,
            [
                cam.intrinsics.fx,
                cam.intrinsics.fy,
                cam.intrinsics.cx,
                cam.intrinsics.cy,
            ],
        );
        out.push_str("cam_to_lidar ");
        push_floats(&mut out, cam.cam_to_lidar.to_row_major());
    }
    out.push_str("ego_curr ");
    push_floats(&mut out, scene.ego_curr.to_row_major());
    out.push_str("ego_adj ");
    push_floats(&mut out, scene.ego_adj.to_row_major());
    let _ = writeln!(out, "points {}", scene.cloud.points().len());
    for (p, &label) in scene.cloud.points().iter().zip(scene.cloud.labels()) {
        let _ = writeln!(out, "{} {} {} {label}", p.x, p.y, p.z);
    }
    let _ = writeln!(out, "boxes {}", scene.boxes.len());
    for m in 0..scene.boxes.len() {
        let row = scene.boxes.rows().row(m);
        for v in row.iter() {
            let _ = write!(out, "{v} ");
        }
        let _ = writeln!(
            out,
            "{} {}",
            scene.boxes.classes()[m],
            scene.boxes.scores()[m]
        );
    }
    out.push_str("end\n");
    write_file(path, &out)
}

/// Read a `bevgrid-scene v1` document. All geometric invariants are
/// re-validated, so a hand-edited rotation that is no longer orthonormal is
/// rejected here rather than corrupting downstream math.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = read_file(path)?;
    let mut r = Reader::new(&text);
    r.expect_magic(SCENE_MAGIC)?;
    let [seed]: [u64; 1] = r.fixed("seed")?;
    let [image_height, image_width]: [usize; 2] = r.fixed("image")?;
    let [num_cameras]: [usize; 1] = r.fixed("cameras")?;
    let mut cameras = Vec::with_capacity(num_cameras);
    for i in 0..num_cameras {
        let [index]: [usize; 1] = r.fixed("camera")?;
        if index != i {
            return Err(Error::parse(
                r.line_no,
                "camera",
                format!("expected camera {i}, found {index}"),
            ));
        }
        let [fx, fy, cx, cy]: [f64; 4] = r.fixed("intrinsics")?;
        let intrinsics = CameraIntrinsics::new(fx, fy, cx, cy)?;
        let m: [f64; 16] = r.fixed("cam_to_lidar")?;
        let cam_to_lidar = RigidTransform::from_row_major(&m)?;
        cameras.push(RigCamera {
            intrinsics,
            cam_to_lidar,
        });
    }
    let rig = CameraRig::new(cameras, image_height, image_width)?;
    let m: [f64; 16] = r.fixed("ego_curr")?;
    let ego_curr = RigidTransform::from_row_major(&m)?;
    let m: [f64; 16] = r.fixed("ego_adj")?;
    let ego_adj = RigidTransform::from_row_major(&m)?;
    let [num_points]: [usize; 1] = r.fixed("points")?;
    let mut points = Vec::with_capacity(num_points);
    let mut labels = Vec::with_capacity(num_points);
    for _ in 0..num_points {
        let line = r.line("point row")?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 4 {
            return Err(Error::parse(
                r.line_no,
                "point row",
                format!("expected 4 columns, got {}", parts.len()),
            ));
        }
        let xyz: Vec<f64> = r.parse_all(&parts[..3], "point coordinate")?;
        points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
        labels.push(r.parse_one(parts[3], "point label")?);
    }
    let cloud = LabeledPointCloud::new(points, labels)?;
    let [num_boxes]: [usize; 1] = r.fixed("boxes")?;
    let mut rows = Array2::zeros((num_boxes, BOX_DIMS));
    let mut classes = Vec::with_capacity(num_boxes);
    let mut scores = Vec::with_capacity(num_boxes);
    for m in 0..num_boxes {
        let line = r.line("box row")?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != BOX_DIMS + 2 {
            return Err(Error::parse(
                r.line_no,
                "box row",
                format!("expected {} columns, got {}", BOX_DIMS + 2, parts.len()),
            ));
        }
        let values: Vec<f64> = r.parse_all(&parts[..BOX_DIMS], "box geometry")?;
        for (d, v) in values.into_iter().enumerate() {
            rows[[m, d]] = v;
        }
        classes.push(r.parse_one(parts[BOX_DIMS], "box class")?);
        scores.push(r.parse_one(parts[BOX_DIMS + 1], "box score")?);
    }
    let boxes = BoxSet::new(rows, classes, scores)?;
    r.expect_end()?;
    Ok(Scene {
        rig,
        cloud,
        boxes,
        ego_curr,
        ego_adj,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Grid format.

/// Element type of a stored array.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::U8(_) => "u8",
            ArrayData::U16(_) => "u16",
            ArrayData::F64(_) => "f64",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::U16(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }
}

/// One named row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

/// A parsed `bevgrid-grid v1` document: optional voxel-grid geometry, free
/// metadata, and one or more named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridFile {
    /// `[x_min, x_max, y_min, y_max, z_min, z_max]` when the arrays are tied
    /// to a voxel grid.
    pub extent: Option<[f64; 6]>,
    /// `[r_x, r_y, r_z]`; present exactly when `extent` is.
    pub resolution: Option<[f64; 3]>,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl GridFile {
    pub fn with_spec(spec: &VoxelGridSpec) -> Self {
        Self {
            extent: Some([
                spec.x_min, spec.x_max, spec.y_min, spec.y_max, spec.z_min, spec.z_max,
            ]),
            resolution: Some([spec.r_x, spec.r_y, spec.r_z]),
            ..Self::default()
        }
    }

    pub fn spec(&self) -> Result<VoxelGridSpec> {
        match (self.extent, self.resolution) {
            (Some(e), Some(r)) => {
                VoxelGridSpec::new(e[0], e[1], e[2], e[3], e[4], e[5], r[0], r[1], r[2])
            }
            _ => Err(Error::invalid(
                "GridFile",
                "file carries no extent/resolution header",
            )),
        }
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::invalid("GridFile", format!("no array named `{name}`")))
    }
}

/// Rows of the payload: one text line per innermost-axis run, in row-major
/// order, so a `(c, x, y)` array writes `c*x` lines of `y` values. An array
/// with any zero dimension has no payload lines at all.
fn line_count(dims: &[usize]) -> usize {
    if dims.contains(&0) {
        return 0;
    }
    if dims.is_empty() {
        return 1;
    }
    dims[..dims.len() - 1].iter().product()
}

/// Write a `bevgrid-grid v1` document.
pub fn save_grid_file(g: &GridFile, path: &Path) -> Result<()> {
    if g.extent.is_some() != g.resolution.is_some() {
        return Err(Error::invalid(
            "GridFile",
            "extent and resolution must be given together",
        ));
    }
    if g.arrays.is_empty() {
        return Err(Error::Empty {
            context: "GridFile: no arrays to save".into(),
        });
    }
    let mut out = String::new();
    let _ = writeln!(out, "{GRID_MAGIC}");
    if let (Some(e), Some(r)) = (g.extent, g.resolution) {
        out.push_str("extent ");
        push_floats(&mut out, e);
        out.push_str("resolution ");
        push_floats(&mut out, r);
    }
    for (k, v) in &g.meta {
        if k.contains(' ') || k.is_empty() {
            return Err(Error::invalid(
                "GridFile",
                format!("meta key `{k}` must be a single word"),
            ));
        }
        let _ = writeln!(out, "meta {k} {v}");
    }
    for a in &g.arrays {
        let expected: usize = a.dims.iter().product();
        if a.data.len() != expected {
            return Err(Error::shape(
                "GridFile",
                format!(
                    "array `{}` holds {} values but dims {:?} need {expected}",
                    a.name,
                    a.data.len(),
                    a.dims
                ),
            ));
        }
        if a.name.contains(' ') || a.name.is_empty() {
            return Err(Error::invalid(
                "GridFile",
                format!("array name `{}` must be a single word", a.name),
            ));
        }
        let _ = write!(out, "array {} {} {}", a.name, a.data.dtype(), a.dims.len());
        for d in &a.dims {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        if expected == 0 {
            continue;
        }
        let row = a.dims.last().copied().unwrap_or(1);
        for start in (0..a.data.len()).step_by(row) {
            match &a.data {
                ArrayData::U8(v) => {
                    push_ints(&mut out, &v[start..start + row]);
                }
                ArrayData::U16(v) => {
                    push_ints(&mut out, &v[start..start + row]);
                }
                ArrayData::F64(v) => {
                    push_floats(&mut out, v[start..start + row].iter().copied());
                }
            }
        }
    }
    out.push_str("end\n");
    write_file(path, &out)
}

fn push_ints<T: std::fmt::Display>(out: &mut String, values: &[T]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

/// Read a `bevgrid-grid v1` document.
pub fn load_grid_file(path: &Path) -> Result<GridFile> {
    let text = read_file(path)?;
    let mut r = Reader::new(&text);
    r.expect_magic(GRID_MAGIC)?;
    let mut g = GridFile::default();
    loop {
        let line = r.line("section")?;
        let mut parts = line.split(' ');
        let keyword = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        match keyword {
            "end" => break,
            "extent" => {
                let v: Vec<f64> = r.parse_all(&rest, "extent")?;
                let arr: [f64; 6] = v.try_into().map_err(|v: Vec<f64>| {
                    Error::parse(r.line_no, "extent", format!("expected 6 values, got {}", v.len()))
                })?;
                g.extent = Some(arr);
            }
            "resolution" => {
                let v: Vec<f64> = r.parse_all(&rest, "resolution")?;
                let arr: [f64; 3] = v.try_into().map_err(|v: Vec<f64>| {
                    Error::parse(
                        r.line_no,
                        "resolution",
                        format!("expected 3 values, got {}", v.len()),
                    )
                })?;
                g.resolution = Some(arr);
            }
            "meta" => {
                if rest.is_empty() {
                    return Err(Error::parse(r.line_no, "meta", "missing key"));
                }
                g.meta
                    .insert(rest[0].to_string(), rest[1..].join(" "));
            }
            "array" => {
                if rest.len() < 2 {
                    return Err(Error::parse(
                        r.line_no,
                        "array",
                        "expected `array NAME DTYPE NDIM dims...`",
                    ));
                }
                let name = rest[0].to_string();
                let dtype = rest[1];
                let ndim: usize = r.parse_one(rest.get(2).copied().unwrap_or(""), "array ndim")?;
                if rest.len() != 3 + ndim {
                    return Err(Error::parse(
                        r.line_no,
                        "array dims",
                        format!("expected {ndim} dims, got {}", rest.len().saturating_sub(3)),
                    ));
                }
                let dims: Vec<usize> = r.parse_all(&rest[3..], "array dims")?;
                let total: usize = dims.iter().product();
                let rows = line_count(&dims);
                let row = dims.last().copied().unwrap_or(1).max(1);
                let mut tokens: Vec<&str> = Vec::with_capacity(total);
                for _ in 0..rows {
                    let line = r.line("array payload")?;
                    let before = tokens.len();
                    tokens.extend(line.split(' '));
                    if tokens.len() - before != row {
                        return Err(Error::parse(
                            r.line_no,
                            "array payload",
                            format!("expected {row} values on this line, got {}", tokens.len() - before),
                        ));
                    }
                }
                let data = match dtype {
                    "u8" => ArrayData::U8(r.parse_all(&tokens, "array payload")?),
                    "u16" => ArrayData::U16(r.parse_all(&tokens, "array payload")?),
                    "f64" => ArrayData::F64(r.parse_all(&tokens, "array payload")?),
                    other => {
                        return Err(Error::parse(
                            r.line_no,
                            "array dtype",
                            format!("unknown dtype `{other}`"),
                        ));
                    }
                };
                g.arrays.push(NamedArray { name, dims, data });
            }
            other => {
                return Err(Error::parse(
                    r.line_no,
                    "section",
                    format!("unknown keyword `{other}`"),
                ));
            }
        }
    }
    if g.arrays.is_empty() {
        return Err(Error::invalid(
            "GridFile",
            format!("{}: no arrays in file", path.display()),
        ));
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Typed wrappers over the grid format.

fn dims3(a: &NamedArray) -> Result<(usize, usize, usize)> {
    match a.dims[..] {
        [x, y, z] => Ok((x, y, z)),
        _ => Err(Error::shape(
            "GridFile",
            format!("array `{}` must be 3-d, has dims {:?}", a.name, a.dims),
        )),
    }
}

fn as_array3_f64(a: &NamedArray) -> Result<Array3<f64>> {
    let d = dims3(a)?;
    match &a.data {
        ArrayData::F64(v) => Array3::from_shape_vec(d, v.clone())
            .map_err(|e| Error::shape("GridFile", e.to_string())),
        _ => Err(Error::invalid(
            "GridFile",
            format!("array `{}` must be f64, is {}", a.name, a.data.dtype()),
        )),
    }
}

fn flat<T: Copy>(values: ArrayView<T, ndarray::Ix3>) -> Vec<T> {
    values.iter().copied().collect()
}

pub fn save_semantic_grid(grid: &SemanticVoxelGrid, path: &Path) -> Result<()> {
    let mut g = GridFile::with_spec(&grid.spec);
    g.meta
        .insert("num_classes".into(), grid.num_classes.to_string());
    let dims: Vec<usize> = grid.class_ids.shape().to_vec();
    g.arrays.push(NamedArray {
        name: "class_ids".into(),
        dims: dims.clone(),
        data: ArrayData::U16(flat(grid.class_ids.view())),
    });
    g.arrays.push(NamedArray {
        name: "labeled_mask".into(),
        dims,
        data: ArrayData::U8(flat(grid.labeled_mask.view())),
    });
    save_grid_file(&g, path)
}

pub fn load_semantic_grid(path: &Path) -> Result<SemanticVoxelGrid> {
    let g = load_grid_file(path)?;
    let spec = g.spec()?;
    let num_classes: u16 = g
        .meta
        .get("num_classes")
        .ok_or_else(|| Error::invalid("GridFile", "missing meta num_classes"))?
        .parse()
        .map_err(|_| Error::invalid("GridFile", "bad meta num_classes"))?;
    let ids = g.array("class_ids")?;
    let mask = g.array("labeled_mask")?;
    let d = dims3(ids)?;
    if d != spec.dims() {
        return Err(Error::shape(
            "GridFile",
            format!("class_ids dims {d:?} disagree with grid spec {:?}", spec.dims()),
        ));
    }
    let (ArrayData::U16(ids_v), ArrayData::U8(mask_v)) = (&ids.data, &mask.data) else {
        return Err(Error::invalid(
            "GridFile",
            "class_ids must be u16 and labeled_mask u8",
        ));
    };
    if dims3(mask)? != d {
        return Err(Error::shape(
            "GridFile",
            "labeled_mask dims disagree with class_ids",
        ));
    }
    let class_ids = Array3::from_shape_vec(d, ids_v.clone())
        .map_err(|e| Error::shape("GridFile", e.to_string()))?;
    let labeled_mask = Array3::from_shape_vec(d, mask_v.clone())
        .map_err(|e| Error::shape("GridFile", e.to_string()))?;
    if let Some(&bad) = ids_v.iter().find(|&&c| c >= num_classes) {
        return Err(Error::invalid(
            "GridFile",
            format!("class id {bad} out of range 0..{num_classes}"),
        ));
    }
    Ok(SemanticVoxelGrid {
        spec,
        num_classes,
        class_ids,
        labeled_mask,
    })
}

pub fn save_binary_grid(grid: &BinaryVoxelGrid, path: &Path) -> Result<()> {
    let mut g = GridFile::with_spec(&grid.spec);
    g.arrays.push(NamedArray {
        name: "occupancy".into(),
        dims: grid.values.shape().to_vec(),
        data: ArrayData::U8(flat(grid.values.view())),
    });
    save_grid_file(&g, path)
}

pub fn load_binary_grid(path: &Path) -> Result<BinaryVoxelGrid> {
    let g = load_grid_file(path)?;
    let spec = g.spec()?;
    let a = g.array("occupancy")?;
    let d = dims3(a)?;
    if d != spec.dims() {
        return Err(Error::shape(
            "GridFile",
            format!("occupancy dims {d:?} disagree with grid spec {:?}", spec.dims()),
        ));
    }
    let ArrayData::U8(v) = &a.data else {
        return Err(Error::invalid("GridFile", "occupancy must be u8"));
    };
    if let Some(&bad) = v.iter().find(|&&b| b > 1) {
        return Err(Error::invalid(
            "GridFile",
            format!("occupancy value {bad} is not 0/1"),
        ));
    }
    let values =
        Array3::from_shape_vec(d, v.clone()).map_err(|e| Error::shape("GridFile", e.to_string()))?;
    Ok(BinaryVoxelGrid { spec, values })
}

pub fn save_bev_feature(f: &BevFeature, path: &Path) -> Result<()> {
    let mut g = GridFile::with_spec(&f.grid);
    g.arrays.push(NamedArray {
        name: "bev".into(),
        dims: f.values.shape().to_vec(),
        data: ArrayData::F64(flat(f.values.view())),
    });
    save_grid_file(&g, path)
}

pub fn load_bev_feature(path: &Path) -> Result<BevFeature> {
    let g = load_grid_file(path)?;
    let spec = g.spec()?;
    let values = as_array3_f64(g.array("bev")?)?;
    BevFeature::new(values, spec)
}

/// Save any named 3-d float array (heatmaps, gradients, raw features).
pub fn save_array3(name: &str, values: &Array3<f64>, path: &Path) -> Result<()> {
    let g = GridFile {
        arrays: vec![NamedArray {
            name: name.into(),
            dims: values.shape().to_vec(),
            data: ArrayData::F64(flat(values.view())),
        }],
        ..GridFile::default()
    };
    save_grid_file(&g, path)
}

/// Load the single 3-d float array of a grid file, returning its name too.
pub fn load_array3(path: &Path) -> Result<(String, Array3<f64>)> {
    let g = load_grid_file(path)?;
    if g.arrays.len() != 1 {
        return Err(Error::invalid(
            "GridFile",
            format!("expected exactly one array, found {}", g.arrays.len()),
        ));
    }
    let a = &g.arrays[0];
    Ok((a.name.clone(), as_array3_f64(a)?))
}

/// Save a cross-branch adapter pair (`occ_to_det`, `det_to_occ`) weights.
pub fn save_adapters(
    occ_to_det: &FusionAdapter,
    det_to_occ: &FusionAdapter,
    path: &Path,
) -> Result<()> {
    let mut g = GridFile::default();
    for (name, a) in [("occ_to_det", occ_to_det), ("det_to_occ", det_to_occ)] {
        g.arrays.push(NamedArray {
            name: name.into(),
            dims: a.weight.shape().to_vec(),
            data: ArrayData::F64(a.weight.iter().copied().collect()),
        });
    }
    save_grid_file(&g, path)
}

/// Load an adapter pair saved by [`save_adapters`].
pub fn load_adapters(path: &Path) -> Result<(FusionAdapter, FusionAdapter)> {
    let g = load_grid_file(path)?;
    let mut pair = Vec::new();
    for (name, dir) in [
        ("occ_to_det", AdapterDirection::OccToDet),
        ("det_to_occ", AdapterDirection::DetToOcc),
    ] {
        let a = g.array(name)?;
        let ArrayData::F64(v) = &a.data else {
            return Err(Error::invalid("GridFile", "adapter weights must be f64"));
        };
        let [rows, cols] = a.dims[..] else {
            return Err(Error::shape(
                "GridFile",
                format!("adapter `{name}` must be 2-d, has dims {:?}", a.dims),
            ));
        };
        let w = Array2::from_shape_vec((rows, cols), v.clone())
            .map_err(|e| Error::shape("GridFile", e.to_string()))?;
        pair.push(FusionAdapter::new(w, dir)?);
    }
    let det_to_occ = pair.pop().unwrap();
    let occ_to_det = pair.pop().unwrap();
    Ok((occ_to_det, det_to_occ))
}

/// Save detections as a 13-column array `boxes`: the 11 geometry columns
/// followed by class id and score. An empty set writes a `(0, 13)` array.
pub fn save_box_set(boxes: &BoxSet, path: &Path) -> Result<()> {
    let m = boxes.len();
    let mut data = Vec::with_capacity(m * (BOX_DIMS + 2));
    for i in 0..m {
        data.extend(boxes.rows().row(i).iter().copied());
        data.push(boxes.classes()[i] as f64);
        data.push(boxes.scores()[i]);
    }
    let g = GridFile {
        arrays: vec![NamedArray {
            name: "boxes".into(),
            dims: vec![m, BOX_DIMS + 2],
            data: ArrayData::F64(data),
        }],
        ..GridFile::default()
    };
    save_grid_file(&g, path)
}

/// Load a box set saved by [`save_box_set`].
pub fn load_box_set(path: &Path) -> Result<BoxSet> {
    let g = load_grid_file(path)?;
    let a = g.array("boxes")?;
    let [m, cols] = a.dims[..] else {
        return Err(Error::shape(
            "GridFile",
            format!("boxes must be 2-d, has dims {:?}", a.dims),
        ));
    };
    if cols != BOX_DIMS + 2 {
        return Err(Error::shape(
            "GridFile",
            format!("boxes need {} columns, got {cols}", BOX_DIMS + 2),
        ));
    }
    let ArrayData::F64(v) = &a.data else {
        return Err(Error::invalid("GridFile", "boxes must be f64"));
    };
    let mut rows = Array2::zeros((m, BOX_DIMS));
    let mut classes = Vec::with_capacity(m);
    let mut scores = Vec::with_capacity(m);
    for i in 0..m {
        let row = &v[i * cols..(i + 1) * cols];
        for d in 0..BOX_DIMS {
            rows[[i, d]] = row[d];
        }
        let class = row[BOX_DIMS];
        if class.fract() != 0.0 || !(0.0..=255.0).contains(&class) {
            return Err(Error::invalid(
                "GridFile",
                format!("box {i} class column holds {class}, not a small integer"),
            ));
        }
        classes.push(class as u8);
        scores.push(row[BOX_DIMS + 1]);
    }
    BoxSet::new(rows, classes, scores)
}

/// Load detection boxes from either format: a box array saved by
/// [`save_box_set`], or the `boxes` section of a full scene file. The first
/// line of the file decides.
pub fn load_boxes_any(path: &Path) -> Result<BoxSet> {
    let text = read_file(path)?;
    match text.lines().next() {
        Some(SCENE_MAGIC) => Ok(load_scene(path)?.boxes),
        Some(GRID_MAGIC) => load_box_set(path),
        other => Err(Error::Version {
            expected: format!("{SCENE_MAGIC} or {GRID_MAGIC}"),
            found: other.unwrap_or("empty file").to_string(),
        }),
    }
}

/// Load an occupancy grid as a semantic grid from either kind of grid file:
/// a semantic grid loads directly, a binary grid becomes a two-class grid
/// (0 = empty, 1 = occupied) supervised everywhere.
pub fn load_occupancy_any(path: &Path) -> Result<SemanticVoxelGrid> {
    let g = load_grid_file(path)?;
    if g.arrays.iter().any(|a| a.name == "class_ids") {
        return load_semantic_grid(path);
    }
    let b = load_binary_grid(path)?;
    let class_ids = b.values.mapv(u16::from);
    let labeled_mask = Array3::from_elem(b.values.dim(), 1);
    Ok(SemanticVoxelGrid {
        spec: b.spec,
        num_classes: 2,
        class_ids,
        labeled_mask,
    })
}
