//! Rigid transforms, camera intrinsics, and point projection.
//!
//! Everything here is double precision: voxel-index decisions downstream hinge
//! on sub-micrometer coordinate agreement, so the geometry layer never drops to
//! f32. Rotation validity is checked once at construction; the hot-path
//! operations assume valid inputs.
//!
//! Conventions: transforms are 4x4 homogeneous matrices acting on column
//! vectors, translation in meters. A `cam_to_lidar` transform maps camera-frame
//! points into the lidar frame. Camera frames are +z forward, +x right, +y down.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};

use crate::error::{Error, Result};

/// Orthonormality tolerance for the rotation block at construction.
const ROTATION_TOL: f64 = 1e-9;

/// A rigid (SE(3)) transform stored as a 4x4 homogeneous matrix.
///
/// Invariants, enforced by [`RigidTransform::from_matrix`]: bottom row is
/// `(0, 0, 0, 1)`, the upper-left 3x3 block is orthonormal with determinant +1
/// (tolerance 1e-9).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    matrix: Matrix4<f64>,
}

impl RigidTransform {
    /// Validate and wrap a 4x4 matrix.
    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        let bottom = [matrix[(3, 0)], matrix[(3, 1)], matrix[(3, 2)], matrix[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(
                "RigidTransform",
                format!("bottom row must be (0,0,0,1), got {bottom:?}"),
            ));
        }
        let r = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let gram = r.transpose() * r;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if ortho_err > ROTATION_TOL {
            return Err(Error::invalid(
                "RigidTransform",
                format!("rotation block not orthonormal (max deviation {ortho_err:.3e})"),
            ));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::invalid(
                "RigidTransform",
                format!("rotation determinant {det} != +1"),
            ));
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    /// Pure translation.
    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        let mut m = Matrix4::identity();
        m[(0, 3)] = x;
        m[(1, 3)] = y;
        m[(2, 3)] = z;
        Self { matrix: m }
    }

    /// Rotation about +z by `angle` radians (right-handed).
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let mut m = Matrix4::identity();
        m[(0, 0)] = c;
        m[(0, 1)] = -s;
        m[(1, 0)] = s;
        m[(1, 1)] = c;
        Self { matrix: m }
    }

    /// Build from a rotation block and a translation vector.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::from_matrix(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Apply to a single point: `R p + t`.
    pub fn apply(&self, p: Point3<f64>) -> Point3<f64> {
        let r = self.matrix.fixed_view::<3, 3>(0, 0);
        let t = self.matrix.fixed_view::<3, 1>(0, 3);
        Point3::from(r * p.coords + t)
    }

    /// Row-major flattening of the 4x4 matrix, as persisted by the scene format.
    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    /// Inverse of [`RigidTransform::to_row_major`].
    pub fn from_row_major(vals: &[f64; 16]) -> Result<Self> {
        let mut m = Matrix4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                m[(r, c)] = vals[r * 4 + c];
            }
        }
        Self::from_matrix(m)
    }
}

/// Composition: the result applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    // Product of valid SE(3) matrices stays within construction tolerance.
    RigidTransform {
        matrix: a.matrix * b.matrix,
    }
}

/// Closed-form SE(3) inverse: `(R, t) -> (R^T, -R^T t)`.
pub fn invert(t: &RigidTransform) -> RigidTransform {
    let r = t.rotation();
    let tr = t.translation_vector();
    let rt = r.transpose();
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(rt * tr)));
    RigidTransform { matrix: m }
}

/// Apply `t` to every point, preserving order and length.
pub fn transform_points(t: &RigidTransform, pts: &[Point3<f64>]) -> Vec<Point3<f64>> {
    pts.iter().map(|p| t.apply(*p)).collect()
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(
                "CameraIntrinsics",
                format!("focal lengths must be positive, got fx={fx}, fy={fy}"),
            ));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid(
                "CameraIntrinsics",
                "principal point must be finite".to_string(),
            ));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Project a camera-frame point (z > 0) to pixel coordinates.
    pub fn project(&self, p: Point3<f64>) -> Result<(f64, f64)> {
        if p.z <= 0.0 {
            return Err(Error::invalid(
                "projection",
                format!("point depth must be positive, got z={}", p.z),
            ));
        }
        Ok((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }
}

/// Back-project pixel `(u, v)` at depth `d` meters into the camera frame.
///
/// Returns `(d*(u-cx)/fx, d*(v-cy)/fy, d)`; rejects non-positive depth.
pub fn unproject(k: &CameraIntrinsics, u: f64, v: f64, d: f64) -> Result<Point3<f64>> {
    if d <= 0.0 {
        return Err(Error::invalid(
            "unproject",
            format!("depth must be positive, got {d}"),
        ));
    }
    Ok(Point3::new(
        d * (u - k.cx) / k.fx,
        d * (v - k.cy) / k.fy,
        d,
    ))
}

/// One camera of a rig: intrinsics plus its pose in the lidar frame.
#[derive(Debug, Clone, Copy)]
pub struct RigCamera {
    pub intrinsics: CameraIntrinsics,
    pub cam_to_lidar: RigidTransform,
}

/// An ordered multi-camera rig sharing one image size.
#[derive(Debug, Clone)]
pub struct CameraRig {
    cameras: Vec<RigCamera>,
    image_height: usize,
    image_width: usize,
}

impl CameraRig {
    pub fn new(cameras: Vec<RigCamera>, image_height: usize, image_width: usize) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("CameraRig", "need at least one camera"));
        }
        if image_height == 0 || image_width == 0 {
            return Err(Error::invalid(
                "CameraRig",
                format!("image size must be positive, got {image_height}x{image_width}"),
            ));
        }
        Ok(Self {
            cameras,
            image_height,
            image_width,
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, i: usize) -> &RigCamera {
        &self.cameras[i]
    }

    pub fn cameras(&self) -> &[RigCamera] {
        &self.cameras
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }
}
