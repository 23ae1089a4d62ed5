//! Linear-subspace vehicle shape prior: mean wireframe, deformation basis,
//! shape instantiation, keypoint semantics and wireframe dimensions.
//!
//! A vehicle instance is `R (mean_i + sum_j lambda_j basis_ij) + t` per
//! keypoint. The canonical object frame is +Z forward, +Y down, +X right,
//! with the wireframe centroid at the origin and the base keypoints (wheels,
//! bumper corners, rockers) coplanar at ground-contact level.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    canonicalize_up, fit_plane_least_squares, GeometryError, PlanePatch, Rotation, Vec3,
};

/// Keypoint count of the wireframe model.
pub const KEYPOINT_COUNT: usize = 36;
/// Default deformation-basis size.
pub const DEFAULT_BASIS_SIZE: usize = 5;
/// Default bound on shape coefficients, in basis standard deviations.
pub const DEFAULT_LAMBDA_BOUND: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("shape prior must have {KEYPOINT_COUNT} keypoints, got {0}")]
    WrongKeypointCount(usize),
    #[error("prior invariant violated: {0}")]
    InvalidPrior(String),
    #[error("shape coefficient {index} = {value} exceeds bound {bound}")]
    CoefficientOutOfBounds { index: usize, value: f64, bound: f64 },
    #[error("coefficient count {got} does not match basis size {expected}")]
    WrongCoefficientCount { got: usize, expected: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Category shape prior: mean wireframe plus orthonormal deformation basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapePrior {
    /// Semantic keypoint names, length K.
    pub names: Vec<String>,
    /// Mean wireframe, canonical object frame, centroid at origin.
    pub mean: Vec<Vec3>,
    /// Deformation directions indexed `[coefficient][keypoint]`; each
    /// coefficient's K displacement vectors form a unit 3K-vector, and the
    /// columns are mutually orthonormal.
    pub basis: Vec<Vec<Vec3>>,
    /// Indices of keypoints along the vehicle base.
    pub base_indices: Vec<usize>,
    /// The four wheel-center keypoint indices (FL, FR, RL, RR).
    pub wheel_indices: [usize; 4],
    /// Bound on each shape coefficient's magnitude.
    pub lambda_bound: f64,
}

impl ShapePrior {
    pub fn keypoint_count(&self) -> usize {
        self.mean.len()
    }

    pub fn basis_size(&self) -> usize {
        self.basis.len()
    }

    /// Validates all prior invariants.
    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.mean.len() != KEYPOINT_COUNT {
            return Err(ShapeError::WrongKeypointCount(self.mean.len()));
        }
        if self.names.len() != self.mean.len() {
            return Err(ShapeError::InvalidPrior(format!(
                "{} names for {} keypoints",
                self.names.len(),
                self.mean.len()
            )));
        }
        let centroid = self.mean.iter().fold(Vec3::zeros(), |a, p| a + p) / self.mean.len() as f64;
        if centroid.norm() > 1e-9 {
            return Err(ShapeError::InvalidPrior(format!(
                "mean wireframe centroid off origin by {}",
                centroid.norm()
            )));
        }
        for (j, col) in self.basis.iter().enumerate() {
            if col.len() != self.mean.len() {
                return Err(ShapeError::InvalidPrior(format!(
                    "basis column {j} has {} keypoints",
                    col.len()
                )));
            }
            for (k, other) in self.basis.iter().enumerate() {
                let dot: f64 = col.iter().zip(other).map(|(a, b)| a.dot(b)).sum();
                let expected = if j == k { 1.0 } else { 0.0 };
                if (dot - expected).abs() > 1e-8 {
                    return Err(ShapeError::InvalidPrior(format!(
                        "basis columns {j},{k} inner product {dot}"
                    )));
                }
            }
        }
        let mut wheels = self.wheel_indices;
        wheels.sort_unstable();
        if wheels.windows(2).any(|w| w[0] == w[1]) {
            return Err(ShapeError::InvalidPrior("duplicate wheel index".into()));
        }
        for w in self.wheel_indices {
            if !self.base_indices.contains(&w) {
                return Err(ShapeError::InvalidPrior(format!(
                    "wheel index {w} not in base set"
                )));
            }
        }
        if self
            .base_indices
            .iter()
            .chain(self.wheel_indices.iter())
            .any(|&i| i >= self.mean.len())
        {
            return Err(ShapeError::InvalidPrior("index out of range".into()));
        }
        if self.lambda_bound <= 0.0 {
            return Err(ShapeError::InvalidPrior("lambda_bound must be > 0".into()));
        }
        Ok(())
    }

    /// Zero coefficients for this prior's basis size.
    pub fn zero_shape(&self) -> ShapeCoefficients {
        ShapeCoefficients {
            lambda: vec![0.0; self.basis_size()],
        }
    }

    /// Wheel-center centroid of the deformed object-frame wireframe.
    pub fn wheel_centroid_object(&self, shape: &ShapeCoefficients) -> Vec3 {
        let pts = deformed_object_points(self, shape);
        self.wheel_indices
            .iter()
            .fold(Vec3::zeros(), |a, &w| a + pts[w])
            / 4.0
    }
}

/// Deformation coefficients of one vehicle instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCoefficients {
    pub lambda: Vec<f64>,
}

impl ShapeCoefficients {
    pub fn new(lambda: Vec<f64>, prior: &ShapePrior) -> Result<Self, ShapeError> {
        if lambda.len() != prior.basis_size() {
            return Err(ShapeError::WrongCoefficientCount {
                got: lambda.len(),
                expected: prior.basis_size(),
            });
        }
        for (index, &value) in lambda.iter().enumerate() {
            if value.abs() > prior.lambda_bound {
                return Err(ShapeError::CoefficientOutOfBounds {
                    index,
                    value,
                    bound: prior.lambda_bound,
                });
            }
        }
        Ok(ShapeCoefficients { lambda })
    }
}

/// Full per-vehicle state: pose, shape, and the local ground patch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleState {
    pub rotation: Rotation,
    pub translation: Vec3,
    pub shape: ShapeCoefficients,
    pub plane: PlanePatch,
}

/// Object-frame deformed wireframe `mean + basis * lambda` (no pose applied).
pub fn deformed_object_points(prior: &ShapePrior, shape: &ShapeCoefficients) -> Vec<Vec3> {
    let mut pts = prior.mean.clone();
    for (j, &lam) in shape.lambda.iter().enumerate() {
        if lam == 0.0 {
            continue;
        }
        for (p, d) in pts.iter_mut().zip(&prior.basis[j]) {
            *p += d * lam;
        }
    }
    pts
}

/// Camera-frame wireframe of a vehicle state.
pub fn instantiate(prior: &ShapePrior, state: &VehicleState) -> Vec<Vec3> {
    deformed_object_points(prior, &state.shape)
        .into_iter()
        .map(|p| state.rotation.rotate(p) + state.translation)
        .collect()
}

/// Normal of the least-squares plane through the four wheel centers,
/// sign-fixed to point up.
pub fn car_base_normal(keypoints3d: &[Vec3], prior: &ShapePrior) -> Result<Vec3, ShapeError> {
    let wheels: Vec<Vec3> = prior.wheel_indices.iter().map(|&w| keypoints3d[w]).collect();
    let plane = fit_plane_least_squares(&wheels)?;
    Ok(canonicalize_up(plane.normal))
}

/// Translation to the bottom of the vehicle: centroid of the four
/// instantiated wheel-center keypoints.
pub fn base_translation(
    _state: &VehicleState,
    prior: &ShapePrior,
    keypoints3d: &[Vec3],
) -> Vec3 {
    prior
        .wheel_indices
        .iter()
        .fold(Vec3::zeros(), |a, &w| a + keypoints3d[w])
        / 4.0
}

/// Axis-aligned extents (length, width, height) of a canonical-frame
/// wireframe: length along Z, width along X, height along Y.
pub fn dimensions(keypoints3d: &[Vec3]) -> (f64, f64, f64) {
    let mut min = keypoints3d[0];
    let mut max = keypoints3d[0];
    for p in keypoints3d {
        min = min.inf(p);
        max = max.sup(p);
    }
    (max.z - min.z, max.x - min.x, max.y - min.y)
}

/// Extent extremizer indices per axis, for dimension derivatives:
/// `((argmax_z, argmin_z), (argmax_x, argmin_x), (argmax_y, argmin_y))`.
pub fn dimension_extremizers(points: &[Vec3]) -> [(usize, usize); 3] {
    let pick = |axis: usize| -> (usize, usize) {
        let mut lo = 0;
        let mut hi = 0;
        for (i, p) in points.iter().enumerate() {
            if p[axis] > points[hi][axis] {
                hi = i;
            }
            if p[axis] < points[lo][axis] {
                lo = i;
            }
        }
        (hi, lo)
    };
    [pick(2), pick(0), pick(1)]
}

/// Fixed wireframe edge topology for geometry dumps, as keypoint index pairs.
pub const WIREFRAME_EDGES: &[(usize, usize)] = &[
    // base ring: front bumper - rockers - rear bumper
    (4, 5),
    (5, 9),
    (9, 7),
    (7, 6),
    (6, 8),
    (8, 4),
    // wheels to nearest base corners
    (0, 4),
    (0, 8),
    (1, 5),
    (1, 9),
    (2, 6),
    (2, 8),
    (3, 7),
    (3, 9),
    // front face
    (4, 10),
    (5, 11),
    (10, 14),
    (11, 14),
    (10, 16),
    (11, 16),
    // hood and windshield
    (16, 17),
    (17, 18),
    (17, 19),
    (18, 20),
    (19, 21),
    // roof ring
    (20, 21),
    (20, 22),
    (21, 23),
    (22, 23),
    (22, 24),
    (23, 25),
    (24, 25),
    (24, 26),
    (25, 27),
    (26, 27),
    (26, 35),
    (27, 35),
    // rear glass, trunk, tail
    (26, 28),
    (27, 29),
    (28, 30),
    (29, 30),
    (30, 15),
    (12, 15),
    (13, 15),
    (12, 6),
    (13, 7),
    // sides
    (31, 18),
    (32, 19),
    (33, 8),
    (34, 9),
    (33, 18),
    (34, 19),
];

/// Procedurally generated box-like car prior with 36 named keypoints and a
/// 5-direction deformation basis (length, width, height, cabin, hood).
pub fn synthetic_prior() -> ShapePrior {
    // Build frame: y = 0 at ground contact, up is -Y, +Z toward the nose.
    // All base keypoints sit exactly at y = 0 so the base plane is the
    // ground-contact plane.
    let raw: [(&str, [f64; 3]); KEYPOINT_COUNT] = [
        ("wheel_fl_center", [-0.80, 0.00, 1.40]),
        ("wheel_fr_center", [0.80, 0.00, 1.40]),
        ("wheel_rl_center", [-0.80, 0.00, -1.40]),
        ("wheel_rr_center", [0.80, 0.00, -1.40]),
        ("bumper_front_l", [-0.85, 0.00, 2.25]),
        ("bumper_front_r", [0.85, 0.00, 2.25]),
        ("bumper_rear_l", [-0.85, 0.00, -2.25]),
        ("bumper_rear_r", [0.85, 0.00, -2.25]),
        ("rocker_l", [-0.90, 0.00, 0.00]),
        ("rocker_r", [0.90, 0.00, 0.00]),
        ("headlight_l", [-0.70, -0.70, 2.20]),
        ("headlight_r", [0.70, -0.70, 2.20]),
        ("taillight_l", [-0.75, -0.70, -2.20]),
        ("taillight_r", [0.75, -0.70, -2.20]),
        ("grille_center", [0.00, -0.55, 2.25]),
        ("rear_plate_center", [0.00, -0.55, -2.25]),
        ("hood_front_center", [0.00, -0.90, 2.00]),
        ("hood_rear_center", [0.00, -1.00, 0.75]),
        ("windshield_bottom_l", [-0.78, -1.00, 0.75]),
        ("windshield_bottom_r", [0.78, -1.00, 0.75]),
        ("windshield_top_l", [-0.65, -1.45, 0.50]),
        ("windshield_top_r", [0.65, -1.45, 0.50]),
        ("rooftop_fl", [-0.65, -1.47, 0.40]),
        ("rooftop_fr", [0.65, -1.47, 0.40]),
        ("rooftop_rl", [-0.65, -1.47, -0.75]),
        ("rooftop_rr", [0.65, -1.47, -0.75]),
        ("rearwindow_top_l", [-0.65, -1.45, -0.80]),
        ("rearwindow_top_r", [0.65, -1.45, -0.80]),
        ("rearwindow_bottom_l", [-0.75, -1.05, -1.35]),
        ("rearwindow_bottom_r", [0.75, -1.05, -1.35]),
        ("trunk_rear_center", [0.00, -0.95, -2.05]),
        ("mirror_l", [-1.00, -1.00, 0.90]),
        ("mirror_r", [1.00, -1.00, 0.90]),
        ("doorhandle_l", [-0.90, -0.95, 0.15]),
        ("doorhandle_r", [0.90, -0.95, 0.15]),
        ("antenna_base", [0.00, -1.48, -0.30]),
    ];

    let names: Vec<String> = raw.iter().map(|(n, _)| n.to_string()).collect();
    let mut mean: Vec<Vec3> = raw.iter().map(|(_, p)| Vec3::new(p[0], p[1], p[2])).collect();
    let centroid = mean.iter().fold(Vec3::zeros(), |a, p| a + p) / mean.len() as f64;
    for p in &mut mean {
        *p -= centroid;
    }

    // Raw deformation directions, defined on the pre-shift build coordinates
    // (all are translation-invariant except the scalings, which are taken
    // about the centroid and therefore commute with the shift).
    let build = |f: &dyn Fn(usize, Vec3) -> Vec3| -> Vec<Vec3> {
        mean.iter().enumerate().map(|(i, &p)| f(i, p)).collect()
    };
    let length = build(&|_, p| Vec3::new(0.0, 0.0, p.z));
    let width = build(&|_, p| Vec3::new(p.x, 0.0, 0.0));
    // Height scales about the ground-contact level so base keypoints stay put.
    let height = build(&|_, p| Vec3::new(0.0, p.y + centroid.y, 0.0));
    // Cabin: raise/lower the greenhouse (roof, glass tops, antenna).
    let cabin_set = [20usize, 21, 22, 23, 24, 25, 26, 27, 35];
    let cabin = build(&|i, _| {
        if cabin_set.contains(&i) {
            Vec3::new(0.0, -1.0, 0.0)
        } else {
            Vec3::zeros()
        }
    });
    // Hood: raise/lower the hood line (grille, headlights, hood, windshield base).
    let hood_set = [10usize, 11, 14, 16, 17, 18, 19];
    let hood = build(&|i, _| {
        if hood_set.contains(&i) {
            Vec3::new(0.0, -1.0, 0.0)
        } else {
            Vec3::zeros()
        }
    });

    let basis = orthonormalize(vec![length, width, height, cabin, hood]);

    let prior = ShapePrior {
        names,
        mean,
        basis,
        base_indices: vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
        wheel_indices: [0, 1, 2, 3],
        lambda_bound: DEFAULT_LAMBDA_BOUND,
    };
    prior.validate().expect("synthetic prior invariants");
    prior
}

/// Gram-Schmidt under the 3K inner product.
fn orthonormalize(columns: Vec<Vec<Vec3>>) -> Vec<Vec<Vec3>> {
    let mut out: Vec<Vec<Vec3>> = Vec::with_capacity(columns.len());
    for mut col in columns {
        for prev in &out {
            let dot: f64 = col.iter().zip(prev).map(|(a, b)| a.dot(b)).sum();
            for (c, p) in col.iter_mut().zip(prev) {
                *c -= p * dot;
            }
        }
        let norm: f64 = col.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        assert!(norm > 1e-9, "linearly dependent basis direction");
        for c in &mut col {
            *c /= norm;
        }
        out.push(col);
    }
    out
}

/// Serializes a prior to the shape-prior file format (JSON, schema tagged).
pub fn save_prior(prior: &ShapePrior) -> String {
    let file = PriorFile {
        schema: PRIOR_SCHEMA.to_string(),
        k: prior.keypoint_count(),
        b: prior.basis_size(),
        prior: prior.clone(),
    };
    serde_json::to_string_pretty(&file).expect("prior serialization")
}

/// Parses and validates a shape-prior file.
pub fn load_prior(text: &str) -> Result<ShapePrior, ShapeError> {
    let file: PriorFile = serde_json::from_str(text)
        .map_err(|e| ShapeError::InvalidPrior(format!("parse error: {e}")))?;
    if file.schema != PRIOR_SCHEMA {
        return Err(ShapeError::InvalidPrior(format!(
            "unsupported schema {}",
            file.schema
        )));
    }
    if file.k != file.prior.keypoint_count() || file.b != file.prior.basis_size() {
        return Err(ShapeError::InvalidPrior("header/body size mismatch".into()));
    }
    file.prior.validate()?;
    Ok(file.prior)
}

pub const PRIOR_SCHEMA: &str = "monoloc/shape_prior/1";

#[derive(Serialize, Deserialize)]
struct PriorFile {
    schema: String,
    k: usize,
    b: usize,
    #[serde(flatten)]
    prior: ShapePrior,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::E2;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(prior: &ShapePrior, rotation: Rotation, translation: Vec3) -> VehicleState {
        VehicleState {
            rotation,
            translation,
            shape: prior.zero_shape(),
            plane: PlanePatch::ground(Vec3::new(0.0, -1.0, 0.0), -1.65),
        }
    }

    #[test]
    fn synthetic_prior_is_valid() {
        let prior = synthetic_prior();
        assert_eq!(prior.keypoint_count(), KEYPOINT_COUNT);
        assert_eq!(prior.basis_size(), DEFAULT_BASIS_SIZE);
        prior.validate().unwrap();
    }

    #[test]
    fn instantiate_identity_returns_mean() {
        let prior = synthetic_prior();
        let s = state(&prior, Rotation::identity(), Vec3::zeros());
        let pts = instantiate(&prior, &s);
        for (a, b) in pts.iter().zip(&prior.mean) {
            assert_relative_eq!((a - b).norm(), 0.0);
        }
    }

    #[test]
    fn instantiate_pure_translation() {
        let prior = synthetic_prior();
        let t = Vec3::new(0.0, 0.0, 10.0);
        let s = state(&prior, Rotation::identity(), t);
        let pts = instantiate(&prior, &s);
        for (a, b) in pts.iter().zip(&prior.mean) {
            assert_relative_eq!((a - (b + t)).norm(), 0.0);
        }
    }

    #[test]
    fn instantiate_first_basis_column_matches_dense_product() {
        let prior = synthetic_prior();
        let mut s = state(&prior, Rotation::identity(), Vec3::zeros());
        s.shape.lambda[0] = 1.0;
        let pts = instantiate(&prior, &s);
        // Independent oracle: dense 3K x B matrix-vector product.
        let k = prior.keypoint_count();
        let b = prior.basis_size();
        let mut dense = vec![0.0; 3 * k * b];
        for (j, col) in prior.basis.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                dense[(3 * i) * b + j] = v.x;
                dense[(3 * i + 1) * b + j] = v.y;
                dense[(3 * i + 2) * b + j] = v.z;
            }
        }
        let lambda = {
            let mut l = vec![0.0; b];
            l[0] = 1.0;
            l
        };
        for i in 0..k {
            let mut disp = [0.0; 3];
            for (axis, d) in disp.iter_mut().enumerate() {
                for (j, &lam) in lambda.iter().enumerate() {
                    *d += dense[(3 * i + axis) * b + j] * lam;
                }
            }
            let expect = prior.mean[i] + Vec3::new(disp[0], disp[1], disp[2]);
            assert_relative_eq!((pts[i] - expect).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn instantiate_is_affine_in_lambda() {
        let prior = synthetic_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let l1: Vec<f64> = (0..prior.basis_size()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let l2: Vec<f64> = (0..prior.basis_size()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let alpha: f64 = rng.gen_range(0.0..1.0);
            let rot = Rotation::from_axis_angle(Vec3::new(
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-0.4..0.4),
            ));
            let t = Vec3::new(0.0, 0.0, 15.0);
            let mut sa = state(&prior, rot, t);
            let mut sb = state(&prior, rot, t);
            let mut sm = state(&prior, rot, t);
            sa.shape.lambda = l1.clone();
            sb.shape.lambda = l2.clone();
            sm.shape.lambda = l1
                .iter()
                .zip(&l2)
                .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                .collect();
            let pa = instantiate(&prior, &sa);
            let pb = instantiate(&prior, &sb);
            let pm = instantiate(&prior, &sm);
            for i in 0..prior.keypoint_count() {
                let mix = pa[i] * alpha + pb[i] * (1.0 - alpha);
                assert_relative_eq!((pm[i] - mix).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn instantiate_is_rigid_equivariant() {
        let prior = synthetic_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let rot = Rotation::from_axis_angle(Vec3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-0.3..0.3),
            ));
            let extra = Rotation::from_axis_angle(Vec3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ));
            let t = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0), 20.0);
            let t0 = Vec3::new(1.0, -2.0, 3.0);
            let mut s = state(&prior, rot, t);
            s.shape.lambda = (0..prior.basis_size()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let base = instantiate(&prior, &s);
            let composed = VehicleState {
                rotation: extra.compose(&s.rotation),
                translation: extra.rotate(t) + t0,
                shape: s.shape.clone(),
                plane: s.plane,
            };
            let transformed = instantiate(&prior, &composed);
            for i in 0..prior.keypoint_count() {
                let expect = extra.rotate(base[i]) + t0;
                assert_relative_eq!((transformed[i] - expect).norm(), 0.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn base_normal_of_upright_mean_car() {
        let prior = synthetic_prior();
        let s = state(&prior, Rotation::identity(), Vec3::new(0.0, 0.0, 12.0));
        let n = car_base_normal(&instantiate(&prior, &s), &prior).unwrap();
        assert_relative_eq!((n - Vec3::new(0.0, -1.0, 0.0)).norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn base_normal_rotates_with_the_car() {
        let prior = synthetic_prior();
        let rot = Rotation::from_axis_angle(Vec3::new(10f64.to_radians(), 0.0, 0.0));
        let s = state(&prior, rot, Vec3::new(0.0, 0.0, 12.0));
        let n = car_base_normal(&instantiate(&prior, &s), &prior).unwrap();
        let expect = rot.rotate(Vec3::new(0.0, -1.0, 0.0));
        assert_relative_eq!((n - expect).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn base_normal_equivariant_under_random_rotations() {
        let prior = synthetic_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..1000 {
            // pitch/roll below 25 degrees, arbitrary yaw
            let pitch: f64 = rng.gen_range(-25f64.to_radians()..25f64.to_radians());
            let roll: f64 = rng.gen_range(-25f64.to_radians()..25f64.to_radians());
            let yaw: f64 = rng.gen_range(-3.1..3.1);
            let rot = Rotation::from_axis_angle(Vec3::new(0.0, yaw, 0.0))
                .compose(&Rotation::from_axis_angle(Vec3::new(pitch, 0.0, 0.0)))
                .compose(&Rotation::from_axis_angle(Vec3::new(0.0, 0.0, roll)));
            let s = state(&prior, rot, Vec3::new(0.0, 0.0, 15.0));
            let n = car_base_normal(&instantiate(&prior, &s), &prior).unwrap();
            let expect = rot.rotate(Vec3::new(0.0, -1.0, 0.0));
            assert!((n - expect).norm() < 1e-6);
        }
    }

    #[test]
    fn base_normal_stable_under_wheel_perturbation() {
        let prior = synthetic_prior();
        let s = state(&prior, Rotation::identity(), Vec3::new(0.0, 0.0, 12.0));
        let mut pts = instantiate(&prior, &s);
        let clean = car_base_normal(&pts, &prior).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &w in &prior.wheel_indices {
            pts[w] += Vec3::new(
                rng.gen_range(-0.005..0.005),
                rng.gen_range(-0.005..0.005),
                rng.gen_range(-0.005..0.005),
            );
        }
        let noisy = car_base_normal(&pts, &prior).unwrap();
        let angle = noisy.dot(&clean).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 1.0, "normal moved {angle}°");
        // SVD oracle on the same 4 points
        let wheels: Vec<Vec3> = prior.wheel_indices.iter().map(|&w| pts[w]).collect();
        let oracle = fit_plane_least_squares(&wheels).unwrap().normal;
        assert!((noisy - canonicalize_up(oracle)).norm() < 1e-12);
    }

    #[test]
    fn base_translation_of_mean_car() {
        let prior = synthetic_prior();
        let t = Vec3::new(0.0, 0.0, 10.0);
        let s = state(&prior, Rotation::identity(), t);
        let pts = instantiate(&prior, &s);
        let base = base_translation(&s, &prior, &pts);
        // Oracle: average the stored mean wireframe's wheel keypoints.
        let h_w = prior
            .wheel_indices
            .iter()
            .map(|&w| prior.mean[w].y)
            .sum::<f64>()
            / 4.0;
        assert_relative_eq!(base.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(base.y, h_w, epsilon = 1e-12);
        assert_relative_eq!(base.z, 10.0, epsilon = 1e-12);
        assert!(h_w > 0.0, "wheel level should sit below the centroid");
    }

    #[test]
    fn base_translation_translation_equivariance() {
        let prior = synthetic_prior();
        let s1 = state(&prior, Rotation::identity(), Vec3::new(1.0, 2.0, 10.0));
        let delta = Vec3::new(-0.5, 0.25, 3.0);
        let s2 = state(&prior, Rotation::identity(), s1.translation + delta);
        let b1 = base_translation(&s1, &prior, &instantiate(&prior, &s1));
        let b2 = base_translation(&s2, &prior, &instantiate(&prior, &s2));
        assert_relative_eq!((b2 - (b1 + delta)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn base_translation_rotation_covariance() {
        let prior = synthetic_prior();
        let t = Vec3::new(0.5, -0.2, 14.0);
        let rot = Rotation::from_axis_angle(Vec3::new(0.2, 1.1, -0.1));
        let sr = state(&prior, rot, t);
        let si = state(&prior, Rotation::identity(), t);
        let br = base_translation(&sr, &prior, &instantiate(&prior, &sr));
        let bi = base_translation(&si, &prior, &instantiate(&prior, &si));
        let expect = rot.rotate(bi - t) + t;
        assert_relative_eq!((br - expect).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn dimensions_of_mean_wireframe() {
        let prior = synthetic_prior();
        let (l, w, h) = dimensions(&prior.mean);
        // Oracle: min/max scan of the stored mean keypoints.
        let max_z = prior.mean.iter().map(|p| p.z).fold(f64::MIN, f64::max);
        let min_z = prior.mean.iter().map(|p| p.z).fold(f64::MAX, f64::min);
        assert_relative_eq!(l, max_z - min_z, epsilon = 1e-12);
        assert_relative_eq!(l, 4.5, epsilon = 1e-12);
        assert_relative_eq!(w, 2.0, epsilon = 1e-12);
        assert_relative_eq!(h, 1.48, epsilon = 1e-12);
    }

    #[test]
    fn dimensions_scale_with_homothety() {
        let prior = synthetic_prior();
        let (l, w, h) = dimensions(&prior.mean);
        let scaled: Vec<Vec3> = prior.mean.iter().map(|p| p * 1.1).collect();
        let (l2, w2, h2) = dimensions(&scaled);
        assert_relative_eq!(l2, 1.1 * l, epsilon = 1e-12);
        assert_relative_eq!(w2, 1.1 * w, epsilon = 1e-12);
        assert_relative_eq!(h2, 1.1 * h, epsilon = 1e-12);
    }

    #[test]
    fn dimensions_continuous_in_lambda() {
        let prior = synthetic_prior();
        let eps = 1e-8;
        let mut shape = prior.zero_shape();
        let d0 = dimensions(&deformed_object_points(&prior, &shape));
        shape.lambda[0] = eps;
        let d1 = dimensions(&deformed_object_points(&prior, &shape));
        assert!((d1.0 - d0.0).abs() < 1e-6);
        assert!((d1.1 - d0.1).abs() < 1e-6);
        assert!((d1.2 - d0.2).abs() < 1e-6);
    }

    #[test]
    fn base_keypoints_stay_coplanar_under_basis() {
        // The synthetic basis never lifts base keypoints off the contact plane.
        let prior = synthetic_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let shape = ShapeCoefficients {
                lambda: (0..prior.basis_size()).map(|_| rng.gen_range(-2.5..2.5)).collect(),
            };
            let pts = deformed_object_points(&prior, &shape);
            let y0 = pts[prior.wheel_indices[0]].y;
            for &b in &prior.base_indices {
                assert!((pts[b].y - y0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_coefficients_enforce_bound() {
        let prior = synthetic_prior();
        assert!(ShapeCoefficients::new(vec![0.0; 5], &prior).is_ok());
        assert!(matches!(
            ShapeCoefficients::new(vec![0.0, 3.5, 0.0, 0.0, 0.0], &prior),
            Err(ShapeError::CoefficientOutOfBounds { index: 1, .. })
        ));
        assert!(ShapeCoefficients::new(vec![0.0; 4], &prior).is_err());
    }

    #[test]
    fn prior_file_round_trip_is_exact() {
        let prior = synthetic_prior();
        let text = save_prior(&prior);
        let back = load_prior(&text).unwrap();
        assert_eq!(back.names, prior.names);
        assert_eq!(back.base_indices, prior.base_indices);
        assert_eq!(back.wheel_indices, prior.wheel_indices);
        for (a, b) in back.mean.iter().zip(&prior.mean) {
            assert_eq!(a, b, "mean keypoints must round-trip bit-exactly");
        }
        for (ca, cb) in back.basis.iter().zip(&prior.basis) {
            for (a, b) in ca.iter().zip(cb) {
                assert_eq!(a, b);
            }
        }
        // And the re-serialized text is byte-identical.
        assert_eq!(save_prior(&back), text);
    }

    #[test]
    fn load_prior_rejects_bad_schema() {
        let prior = synthetic_prior();
        let text = save_prior(&prior).replace(PRIOR_SCHEMA, "monoloc/shape_prior/0");
        assert!(load_prior(&text).is_err());
    }

    #[test]
    fn wireframe_edges_reference_valid_keypoints() {
        for &(a, b) in WIREFRAME_EDGES {
            assert!(a < KEYPOINT_COUNT && b < KEYPOINT_COUNT && a != b);
        }
    }

    #[test]
    fn mean_car_base_normal_points_up() {
        let prior = synthetic_prior();
        let n = car_base_normal(&prior.mean, &prior).unwrap();
        assert!(n.dot(&E2) <= 0.0);
    }
}
