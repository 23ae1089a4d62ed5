//! Core 3D/2D types shared by every other module: vectors, rotations,
//! camera intrinsics, perspective projection and plane algebra.
//!
//! Camera frame convention: +Z forward, +Y down, +X right. Ground plane
//! normals are canonicalized to point "up", i.e. `n · (0,1,0) <= 0`.

use nalgebra::{Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat2x3 = Matrix2x3<f64>;

/// Points closer than this to the camera plane are considered at zero depth.
pub const DEPTH_EPSILON: f64 = 1e-6;
/// Unit-norm tolerance for quaternions and plane normals.
pub const UNIT_TOLERANCE: f64 = 1e-9;
/// Two smallest singular values closer than this make a plane fit ambiguous.
pub const PLANE_DEGENERACY_TOLERANCE: f64 = 1e-9;

/// Y-axis of the camera frame, pointing vertically down.
pub const E2: Vec3 = Vec3::new(0.0, 1.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {z} (keypoint {index})")]
    NonPositiveDepth { z: f64, index: usize },
    #[error("degenerate point configuration: two smallest singular values within {gap}")]
    DegenerateConfiguration { gap: f64 },
    #[error("plane fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid camera intrinsics: fx = {fx}, fy = {fy}")]
    InvalidIntrinsics { fx: f64, fy: f64 },
}

/// Pinhole camera intrinsics (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Unit-depth ray direction through a pixel, z = 1.
    pub fn ray_direction(&self, pixel: Vec2) -> Vec3 {
        Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }
}

/// Rotation stored as a unit quaternion. The optimization parameterization is
/// a 3-vector axis-angle increment composed on the left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Exponential map: axis-angle vector to rotation.
    pub fn from_axis_angle(axis_angle: Vec3) -> Self {
        Rotation(UnitQuaternion::from_scaled_axis(axis_angle))
    }

    /// Build from three orthonormal column vectors (right, down, forward).
    pub fn from_columns(x: Vec3, y: Vec3, z: Vec3) -> Self {
        let m = Mat3::from_columns(&[x, y, z]);
        Rotation(UnitQuaternion::from_matrix(&m))
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        Rotation(UnitQuaternion::from_matrix(m))
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn inverse_rotate(&self, v: Vec3) -> Vec3 {
        self.0.inverse_transform_vector(&v)
    }

    pub fn matrix(&self) -> Mat3 {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Left-composed local increment: `exp([delta]x) * R`, renormalized.
    pub fn increment(&self, delta: Vec3) -> Self {
        let q = UnitQuaternion::from_scaled_axis(delta).into_inner() * self.0.into_inner();
        Rotation(UnitQuaternion::new_normalize(q))
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(UnitQuaternion::new_normalize(
            self.0.into_inner() * other.0.into_inner(),
        ))
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.inverse())
    }

    /// Angle of the relative rotation to `other`, radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.0.angle_to(&other.0)
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn from_quaternion_wxyz(q: [f64; 4]) -> Self {
        Rotation(UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
            q[0], q[1], q[2], q[3],
        )))
    }

    pub fn norm_deviation(&self) -> f64 {
        (self.0.into_inner().norm() - 1.0).abs()
    }
}

/// Local ground plane patch `n · X = d` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanePatch {
    pub normal: Vec3,
    pub offset: f64,
}

impl PlanePatch {
    /// Normalizes the normal (rescaling the offset along with it).
    pub fn new(normal: Vec3, offset: f64) -> Self {
        let norm = normal.norm();
        PlanePatch {
            normal: normal / norm,
            offset: offset / norm,
        }
    }

    /// Normalizes and canonicalizes the sign so the normal points up
    /// (`n · e2 <= 0`); ground planes are stored in this form.
    pub fn ground(normal: Vec3, offset: f64) -> Self {
        let p = Self::new(normal, offset);
        if needs_sign_flip(p.normal) {
            PlanePatch {
                normal: -p.normal,
                offset: -p.offset,
            }
        } else {
            p
        }
    }

    pub fn signed_distance(&self, point: Vec3) -> f64 {
        signed_distance(self, point)
    }
}

/// Deterministic up-pointing sign rule: flip when `n.y > 0`, with z then x
/// breaking exact ties.
fn needs_sign_flip(n: Vec3) -> bool {
    if n.y != 0.0 {
        return n.y > 0.0;
    }
    if n.z != 0.0 {
        return n.z > 0.0;
    }
    n.x > 0.0
}

/// Canonicalize an already-unit normal to point up.
pub fn canonicalize_up(n: Vec3) -> Vec3 {
    if needs_sign_flip(n) {
        -n
    } else {
        n
    }
}

/// Perspective projection of a camera-frame point.
pub fn project(point: Vec3, intr: &CameraIntrinsics) -> Result<Vec2, GeometryError> {
    if point.z <= DEPTH_EPSILON {
        return Err(GeometryError::NonPositiveDepth {
            z: point.z,
            index: 0,
        });
    }
    Ok(Vec2::new(
        intr.fx * point.x / point.z + intr.cx,
        intr.fy * point.y / point.z + intr.cy,
    ))
}

/// Elementwise projection of an ordered keypoint collection.
pub fn project_wireframe(
    points: &[Vec3],
    intr: &CameraIntrinsics,
) -> Result<Vec<Vec2>, GeometryError> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            project(*p, intr).map_err(|_| GeometryError::NonPositiveDepth { z: p.z, index })
        })
        .collect()
}

/// Inverse of `project` along the ray at a known depth.
pub fn unproject(pixel: Vec2, depth: f64, intr: &CameraIntrinsics) -> Vec3 {
    Vec3::new(
        (pixel.x - intr.cx) / intr.fx * depth,
        (pixel.y - intr.cy) / intr.fy * depth,
        depth,
    )
}

/// Jacobian of `project` with respect to the 3D point.
pub fn projection_jacobian(point: Vec3, intr: &CameraIntrinsics) -> Mat2x3 {
    let z = point.z;
    Mat2x3::new(
        intr.fx / z,
        0.0,
        -intr.fx * point.x / (z * z),
        0.0,
        intr.fy / z,
        -intr.fy * point.y / (z * z),
    )
}

/// Signed distance `n · X − d`; zero iff the point lies on the plane.
pub fn signed_distance(plane: &PlanePatch, point: Vec3) -> f64 {
    plane.normal.dot(&point) - plane.offset
}

/// Least-squares plane through a point set. The normal is the singular
/// vector of least singular value of the centered coordinates, sign-fixed
/// to point up; `d = n · centroid`.
pub fn fit_plane_least_squares(points: &[Vec3]) -> Result<PlanePatch, GeometryError> {
    if points.len() < 3 {
        return Err(GeometryError::TooFewPoints(points.len()));
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;

    // 3x3 scatter matrix of the centered points.
    let mut scatter = Mat3::zeros();
    for p in points {
        let q = p - centroid;
        scatter += q * q.transpose();
    }
    let eig = scatter.symmetric_eigen();
    // Ascending order of eigenvalues; eigenvalues are squared singular values.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let sv_min = eig.eigenvalues[order[0]].max(0.0).sqrt();
    let sv_mid = eig.eigenvalues[order[1]].max(0.0).sqrt();
    if sv_mid - sv_min < PLANE_DEGENERACY_TOLERANCE {
        return Err(GeometryError::DegenerateConfiguration {
            gap: sv_mid - sv_min,
        });
    }
    let normal = canonicalize_up(eig.eigenvectors.column(order[0]).normalize());
    Ok(PlanePatch {
        normal,
        offset: normal.dot(&centroid),
    })
}

/// Deterministic orthonormal basis of the tangent plane at a unit vector.
pub fn tangent_basis(n: Vec3) -> (Vec3, Vec3) {
    // Seed with the coordinate axis least aligned with n.
    let abs = n.abs();
    let seed = if abs.x <= abs.y && abs.x <= abs.z {
        Vec3::x()
    } else if abs.y <= abs.z {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let b1 = n.cross(&seed).normalize();
    let b2 = n.cross(&b1);
    (b1, b2)
}
