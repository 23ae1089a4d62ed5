//! Metric-scale ground recovery: two/three-view egomotion from point
//! correspondences, triangulation of road points, RANSAC dominant-plane
//! extraction, and camera-height scale fixing.
//!
//! Conventions: `RelativePose.rotation` maps frame-a vectors into frame b;
//! `RelativePose.translation` is the unit baseline direction from camera a
//! to camera b expressed in frame a. The frame-transform translation of
//! `X_b = R X_a + t` is `t = -R * translation` (times the baseline length).

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    fit_plane_least_squares, project, CameraIntrinsics, GeometryError, Mat3, PlanePatch, Rotation,
    Vec2, Vec3,
};
use crate::residuals::BBox;
use crate::solver::{
    solve, BlockId, BlockRole, BlockValue, CostTerm, Phase, Problem, SolveError, SolverConfig,
    TermEval,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultiviewError {
    #[error("need at least {required} matches, got {got}")]
    TooFewMatches { got: usize, required: usize },
    #[error("insufficient parallax: median pixel displacement {median_px} px")]
    InsufficientParallax { median_px: f64 },
    #[error("degenerate motion: all inlier triangulation angles below {max_angle_deg} deg")]
    DegenerateMotion { max_angle_deg: f64 },
    #[error("plane fit needs at least 3 points, got {0}")]
    InsufficientPoints(usize),
    #[error("median plane height {median} is not positive; no ground below the camera")]
    NonPositiveMedian { median: f64 },
    #[error("resection failed: {0}")]
    ResectionFailure(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("resection refinement failed: {0}")]
    Solver(String),
}

impl From<SolveError> for MultiviewError {
    fn from(e: SolveError) -> Self {
        MultiviewError::Solver(e.to_string())
    }
}

/// Semantic tag of a correspondence, standing in for per-pixel segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Road,
    NonRoad,
}

/// One pixel match between two frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMatch {
    pub a: Vec2,
    pub b: Vec2,
    pub label: PointLabel,
}

/// Pixel correspondences between a source frame pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub frame_a: u64,
    pub frame_b: u64,
    pub matches: Vec<PointMatch>,
}

pub const CORRESPONDENCE_SCHEMA: &str = "monoloc/correspondences/1";

#[derive(Serialize, Deserialize)]
struct CorrespondenceFile {
    schema: String,
    #[serde(flatten)]
    set: CorrespondenceSet,
}

pub fn save_correspondences(set: &CorrespondenceSet) -> String {
    serde_json::to_string_pretty(&CorrespondenceFile {
        schema: CORRESPONDENCE_SCHEMA.to_string(),
        set: set.clone(),
    })
    .expect("correspondence serialization")
}

pub fn load_correspondences(text: &str) -> Result<CorrespondenceSet, MultiviewError> {
    let file: CorrespondenceFile = serde_json::from_str(text)
        .map_err(|e| MultiviewError::ResectionFailure(format!("parse error: {e}")))?;
    if file.schema != CORRESPONDENCE_SCHEMA {
        return Err(MultiviewError::ResectionFailure(format!(
            "unsupported schema {}",
            file.schema
        )));
    }
    Ok(file.set)
}

/// Camera intrinsics plus the known mounting height above the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub intr: CameraIntrinsics,
    /// Camera height above the ground, meters.
    pub height: f64,
}

/// Relative camera motion, direction only (pre-scale).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Rotation,
    /// Unit baseline direction from camera a to camera b, frame a.
    pub translation: Vec3,
}

impl RelativePose {
    /// Frame-transform translation of `X_b = R X_a + t` at unit baseline.
    pub fn frame_translation(&self) -> Vec3 {
        -(self.rotation.rotate(self.translation))
    }
}

/// A resected camera pose in the reconstruction frame (scaled units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

/// Egomotion estimate plus the supporting inlier matches.
#[derive(Debug, Clone)]
pub struct EgomotionEstimate {
    pub pose: RelativePose,
    pub inliers: Vec<usize>,
}

/// Tuning knobs of the multi-view chain; all RANSAC loops are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiviewConfig {
    pub ransac_iterations: usize,
    /// Sampson-distance inlier threshold for egomotion, pixels.
    pub sampson_threshold_px: f64,
    pub plane_ransac_iterations: usize,
    /// Point-plane inlier threshold for the dominant plane, meters.
    pub plane_threshold_m: f64,
    /// Reprojection inlier threshold for resection, pixels.
    pub resection_threshold_px: f64,
    /// Triangulations below this ray angle are discarded, degrees.
    pub min_triangulation_angle_deg: f64,
    pub seed: u64,
}

impl Default for MultiviewConfig {
    fn default() -> Self {
        MultiviewConfig {
            ransac_iterations: 500,
            sampson_threshold_px: 1.0,
            plane_ransac_iterations: 500,
            plane_threshold_m: 0.02,
            resection_threshold_px: 4.0,
            min_triangulation_angle_deg: 0.05,
            seed: 0,
        }
    }
}

fn normalized_ray(p: Vec2, intr: &CameraIntrinsics) -> Vec3 {
    Vec3::new((p.x - intr.cx) / intr.fx, (p.y - intr.cy) / intr.fy, 1.0)
}

fn k_inverse(intr: &CameraIntrinsics) -> Mat3 {
    Mat3::new(
        1.0 / intr.fx,
        0.0,
        -intr.cx / intr.fx,
        0.0,
        1.0 / intr.fy,
        -intr.cy / intr.fy,
        0.0,
        0.0,
        1.0,
    )
}

/// Eight-point essential matrix from normalized rays (Hartley-conditioned).
fn essential_eight_point(rays_a: &[Vec3], rays_b: &[Vec3]) -> Option<Mat3> {
    let n = rays_a.len();
    if n < 8 {
        return None;
    }
    let condition = |rays: &[Vec3]| -> (Mat3, Vec<Vec2>) {
        let pts: Vec<Vec2> = rays.iter().map(|r| Vec2::new(r.x, r.y)).collect();
        let mean = pts.iter().fold(Vec2::zeros(), |a, p| a + p) / n as f64;
        let rms = (pts.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / n as f64).sqrt();
        let s = if rms > 1e-12 { 2f64.sqrt() / rms } else { 1.0 };
        let t = Mat3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0);
        let transformed = pts
            .iter()
            .map(|p| Vec2::new(s * (p.x - mean.x), s * (p.y - mean.y)))
            .collect();
        (t, transformed)
    };
    let (ta, pa) = condition(rays_a);
    let (tb, pb) = condition(rays_b);

    let mut a = DMatrix::zeros(n, 9);
    for (row, (qa, qb)) in pa.iter().zip(&pb).enumerate() {
        let xa = Vec3::new(qa.x, qa.y, 1.0);
        let xb = Vec3::new(qb.x, qb.y, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                a[(row, 3 * i + j)] = xb[i] * xa[j];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let e_vec = v_t.row(v_t.nrows() - 1);
    let e_cond = Mat3::new(
        e_vec[0], e_vec[1], e_vec[2], e_vec[3], e_vec[4], e_vec[5], e_vec[6], e_vec[7], e_vec[8],
    );
    let e_raw = tb.transpose() * e_cond * ta;

    // Enforce the essential structure: singular values (1, 1, 0).
    let svd3 = e_raw.svd(true, true);
    let u = svd3.u?;
    let v_t = svd3.v_t?;
    Some(u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0)) * v_t)
}

/// Squared Sampson distance of a pixel match under fundamental matrix `f`.
fn sampson_sq(f: &Mat3, pa: Vec2, pb: Vec2) -> f64 {
    let xa = Vec3::new(pa.x, pa.y, 1.0);
    let xb = Vec3::new(pb.x, pb.y, 1.0);
    let fxa = f * xa;
    let ftxb = f.transpose() * xb;
    let num = xb.dot(&fxa);
    let den = fxa.x * fxa.x + fxa.y * fxa.y + ftxb.x * ftxb.x + ftxb.y * ftxb.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}

/// Triangulates one match under `P_a = [I|0]`, `P_b = [R|t]` from normalized
/// rays. Returns the point in frame a, or None for numerically void cases.
fn triangulate_ray_pair(ra: Vec3, rb: Vec3, rot: &Rotation, t: Vec3) -> Option<Vec3> {
    let r = rot.matrix();
    let mut a = Matrix4::zeros();
    // x_a ~ [I|0] X  ->  rows: xa.x * P3 - P1, xa.y * P3 - P2
    a.fixed_view_mut::<1, 4>(0, 0)
        .copy_from_slice(&[-1.0, 0.0, ra.x, 0.0]);
    a.fixed_view_mut::<1, 4>(1, 0)
        .copy_from_slice(&[0.0, -1.0, ra.y, 0.0]);
    // x_b ~ [R|t] X
    for col in 0..3 {
        a[(2, col)] = rb.x * r[(2, col)] - r[(0, col)];
        a[(3, col)] = rb.y * r[(2, col)] - r[(1, col)];
    }
    a[(2, 3)] = rb.x * t.z - t.x;
    a[(3, 3)] = rb.y * t.z - t.y;

    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let h: Vector4<f64> = v_t.row(3).transpose();
    if h.w.abs() < 1e-12 {
        return midpoint_triangulation(ra, rb, rot, t);
    }
    Some(Vec3::new(h.x / h.w, h.y / h.w, h.z / h.w))
}

/// Closest point between the two viewing rays; fallback for DLT breakdowns.
fn midpoint_triangulation(ra: Vec3, rb: Vec3, rot: &Rotation, t: Vec3) -> Option<Vec3> {
    let da = ra.normalize();
    let db = rot.inverse_rotate(rb).normalize();
    let cb = -(rot.inverse_rotate(t)); // camera b center in frame a
    let cross = da.cross(&db);
    let denom = cross.norm_squared();
    if denom < 1e-18 {
        return None;
    }
    let sa = (cb.cross(&db)).dot(&cross) / denom;
    let sb = (cb.cross(&da)).dot(&cross) / denom;
    Some((da * sa + (cb + db * sb)) * 0.5)
}

fn triangulation_angle(point: Vec3, cam_b_center: Vec3) -> f64 {
    let da = point.normalize();
    let db = (point - cam_b_center).normalize();
    da.dot(&db).clamp(-1.0, 1.0).acos()
}

/// Estimates relative camera motion with a RANSAC-wrapped normalized
/// eight-point solver and cheirality-based decomposition.
pub fn estimate_egomotion(
    corr: &CorrespondenceSet,
    intr: &CameraIntrinsics,
    config: &MultiviewConfig,
) -> Result<EgomotionEstimate, MultiviewError> {
    let n = corr.matches.len();
    if n < 8 {
        return Err(MultiviewError::TooFewMatches { got: n, required: 8 });
    }
    let mut displacements: Vec<f64> = corr.matches.iter().map(|m| (m.b - m.a).norm()).collect();
    displacements.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_px = displacements[(n - 1) / 2];
    if median_px <= 1.0 {
        return Err(MultiviewError::InsufficientParallax { median_px });
    }

    let rays_a: Vec<Vec3> = corr.matches.iter().map(|m| normalized_ray(m.a, intr)).collect();
    let rays_b: Vec<Vec3> = corr.matches.iter().map(|m| normalized_ray(m.b, intr)).collect();
    let k_inv = k_inverse(intr);
    let thresh_sq = config.sampson_threshold_px * config.sampson_threshold_px;

    let score = |e: &Mat3| -> (usize, Vec<usize>) {
        let f = k_inv.transpose() * e * k_inv;
        let mut inliers = Vec::new();
        for (i, m) in corr.matches.iter().enumerate() {
            if sampson_sq(&f, m.a, m.b) < thresh_sq {
                inliers.push(i);
            }
        }
        (inliers.len(), inliers)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(usize, Vec<usize>)> = None;
    for _ in 0..config.ransac_iterations {
        let sample = rand::seq::index::sample(&mut rng, n, 8.min(n)).into_vec();
        let sa: Vec<Vec3> = sample.iter().map(|&i| rays_a[i]).collect();
        let sb: Vec<Vec3> = sample.iter().map(|&i| rays_b[i]).collect();
        let Some(e) = essential_eight_point(&sa, &sb) else {
            continue;
        };
        let (count, inliers) = score(&e);
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, inliers));
        }
    }
    let (_, inliers) = best.ok_or(MultiviewError::TooFewMatches { got: n, required: 8 })?;
    if inliers.len() < 8 {
        return Err(MultiviewError::TooFewMatches {
            got: inliers.len(),
            required: 8,
        });
    }

    // Refit on the consensus set and rescore; a second round drops
    // accidental inliers admitted by the minimal-sample model.
    let mut inliers = inliers;
    let mut e = Mat3::zeros();
    for _ in 0..2 {
        let ia: Vec<Vec3> = inliers.iter().map(|&i| rays_a[i]).collect();
        let ib: Vec<Vec3> = inliers.iter().map(|&i| rays_b[i]).collect();
        e = essential_eight_point(&ia, &ib).ok_or(MultiviewError::TooFewMatches {
            got: inliers.len(),
            required: 8,
        })?;
        let (_, refreshed) = score(&e);
        if refreshed.len() < 8 {
            break;
        }
        inliers = refreshed;
    }
    let inliers = inliers;

    // Decompose into the four (R, t) candidates and pick by cheirality.
    let svd3 = e.svd(true, true);
    let mut u = svd3.u.ok_or(MultiviewError::DegenerateMotion {
        max_angle_deg: 0.0,
    })?;
    let mut v_t = svd3.v_t.ok_or(MultiviewError::DegenerateMotion {
        max_angle_deg: 0.0,
    })?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let u3: Vec3 = u.column(2).into();

    let mut best_candidate: Option<(usize, Rotation, Vec3, f64)> = None;
    for rot_m in [r1, r2] {
        let rot = Rotation::from_matrix(&rot_m);
        for sign in [1.0, -1.0] {
            let t = u3 * sign;
            let cam_b = -(rot.inverse_rotate(t));
            let mut in_front = 0;
            let mut max_angle: f64 = 0.0;
            for &i in &inliers {
                let Some(p) = triangulate_ray_pair(rays_a[i], rays_b[i], &rot, t) else {
                    continue;
                };
                let depth_b = (rot.rotate(p) + t).z;
                if p.z > 0.0 && depth_b > 0.0 {
                    in_front += 1;
                    max_angle = max_angle.max(triangulation_angle(p, cam_b));
                }
            }
            if best_candidate
                .as_ref()
                .map_or(true, |(c, _, _, _)| in_front > *c)
            {
                best_candidate = Some((in_front, rot, t, max_angle));
            }
        }
    }
    let (in_front, rotation, t, max_angle) =
        best_candidate.ok_or(MultiviewError::DegenerateMotion { max_angle_deg: 0.0 })?;
    if in_front < inliers.len() / 2 {
        return Err(MultiviewError::DegenerateMotion {
            max_angle_deg: max_angle.to_degrees(),
        });
    }
    if max_angle.to_degrees() < 0.1 {
        return Err(MultiviewError::DegenerateMotion {
            max_angle_deg: max_angle.to_degrees(),
        });
    }

    // Baseline direction in frame a from the frame-transform translation.
    let translation = -(rotation.inverse_rotate(t)).normalize();
    let pose = RelativePose {
        rotation,
        translation,
    };
    let pose = refine_epipolar(&pose, corr, &inliers, intr).unwrap_or(pose);
    Ok(EgomotionEstimate { pose, inliers })
}

/// Gold-standard-style polish: minimizes Sampson distance over the inliers
/// with respect to the rotation and the unit baseline direction.
fn refine_epipolar(
    pose: &RelativePose,
    corr: &CorrespondenceSet,
    inliers: &[usize],
    intr: &CameraIntrinsics,
) -> Option<RelativePose> {
    let mut problem = Problem::new();
    let rot_block = problem.add_block(BlockValue::RotationQuat(pose.rotation), BlockRole::Rotation);
    let dir_block = problem.add_block(BlockValue::UnitNormal(pose.translation), BlockRole::Generic);
    let matches: Vec<(Vec2, Vec2)> = inliers
        .iter()
        .map(|&i| (corr.matches[i].a, corr.matches[i].b))
        .collect();
    problem
        .add_term(Box::new(EpipolarTerm {
            blocks: [rot_block, dir_block],
            matches,
            k_inv: k_inverse(intr),
            huber_px: 1.0,
        }))
        .ok()?;
    let config = SolverConfig {
        schedule: vec![Phase::new(
            "epipolar",
            &[BlockRole::Rotation, BlockRole::Generic],
        )],
        max_iterations: 30,
        ..Default::default()
    };
    solve(&mut problem, &config).ok()?;
    Some(RelativePose {
        rotation: problem.block_value(rot_block).as_rotation(),
        translation: problem.block_value(dir_block).as_unit_normal(),
    })
}

/// Signed Sampson distances of pixel matches under a relative pose, with
/// finite-difference Jacobians (Sampson scale-invariance makes the ambient
/// direction derivative well defined).
struct EpipolarTerm {
    blocks: [BlockId; 2],
    matches: Vec<(Vec2, Vec2)>,
    k_inv: Mat3,
    huber_px: f64,
}

impl EpipolarTerm {
    fn residuals_at(&self, rot: &Rotation, dir: Vec3) -> DVector<f64> {
        let t = -(rot.rotate(dir));
        let skew_t = Mat3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
        let e = skew_t * rot.matrix();
        let f = self.k_inv.transpose() * e * self.k_inv;
        let mut out = DVector::zeros(self.matches.len());
        for (i, (pa, pb)) in self.matches.iter().enumerate() {
            let xa = Vec3::new(pa.x, pa.y, 1.0);
            let xb = Vec3::new(pb.x, pb.y, 1.0);
            let fxa = f * xa;
            let ftxb = f.transpose() * xb;
            let num = xb.dot(&fxa);
            let den =
                (fxa.x * fxa.x + fxa.y * fxa.y + ftxb.x * ftxb.x + ftxb.y * ftxb.y).max(1e-30);
            out[i] = num / den.sqrt();
        }
        out
    }
}

impl CostTerm for EpipolarTerm {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn eval(&self, values: &[BlockValue]) -> Result<TermEval, SolveError> {
        let rot = values[self.blocks[0].0].as_rotation();
        let dir = values[self.blocks[1].0].as_unit_normal();
        let n = self.matches.len();
        let residual = self.residuals_at(&rot, dir);
        let h = 1e-6;
        let mut j_rot = DMatrix::zeros(n, 3);
        let mut j_dir = DMatrix::zeros(n, 3);
        for axis in 0..3 {
            let mut delta = Vec3::zeros();
            delta[axis] = h;
            let plus = self.residuals_at(&rot.increment(delta), dir);
            let minus = self.residuals_at(&rot.increment(-delta), dir);
            let dplus = self.residuals_at(&rot, dir + delta);
            let dminus = self.residuals_at(&rot, dir - delta);
            for r in 0..n {
                j_rot[(r, axis)] = (plus[r] - minus[r]) / (2.0 * h);
                j_dir[(r, axis)] = (dplus[r] - dminus[r]) / (2.0 * h);
            }
        }
        Ok(TermEval {
            residual,
            jacobians: vec![j_rot, j_dir],
            row_deltas: vec![self.huber_px; n],
        })
    }
}

/// Triangulates matches under a relative pose at unit baseline. Points
/// behind either camera or with negligible ray angle are discarded. Returns
/// `(match index, frame-a point)` pairs.
pub fn triangulate_indexed(
    corr: &CorrespondenceSet,
    indices: &[usize],
    pose: &RelativePose,
    intr: &CameraIntrinsics,
    config: &MultiviewConfig,
) -> Vec<(usize, Vec3)> {
    let t = pose.frame_translation();
    let cam_b = pose.translation;
    let min_angle = config.min_triangulation_angle_deg.to_radians();
    let mut out = Vec::new();
    for &i in indices {
        let m = &corr.matches[i];
        let ra = normalized_ray(m.a, intr);
        let rb = normalized_ray(m.b, intr);
        let Some(p) = triangulate_ray_pair(ra, rb, &pose.rotation, t) else {
            continue;
        };
        let depth_b = (pose.rotation.rotate(p) + t).z;
        if p.z <= 0.0 || depth_b <= 0.0 {
            continue;
        }
        if triangulation_angle(p, cam_b) < min_angle {
            continue;
        }
        out.push((i, p));
    }
    out
}

/// Triangulation of egomotion-inlier matches; order follows `indices`.
pub fn triangulate(
    corr: &CorrespondenceSet,
    indices: &[usize],
    pose: &RelativePose,
    intr: &CameraIntrinsics,
    config: &MultiviewConfig,
) -> Vec<Vec3> {
    triangulate_indexed(corr, indices, pose, intr, config)
        .into_iter()
        .map(|(_, p)| p)
        .collect()
}

/// Indices of points that are road-labeled and fall inside the expanded box.
pub fn select_road_points_near(
    points2d_labels: &[(Vec2, PointLabel)],
    bbox: &BBox,
    expansion: f64,
) -> Vec<usize> {
    assert!(expansion >= 1.0, "expansion must be >= 1");
    let expanded = bbox.expanded(expansion);
    points2d_labels
        .iter()
        .enumerate()
        .filter(|(_, (p, label))| *label == PointLabel::Road && expanded.contains(*p))
        .map(|(i, _)| i)
        .collect()
}

/// Best 3-point-seeded plane by inlier count, refit by least squares on the
/// inliers. Deterministic given the config seed.
pub fn ransac_dominant_plane(
    points: &[Vec3],
    threshold: f64,
    iterations: usize,
    seed: u64,
) -> Result<(PlanePatch, Vec<usize>), MultiviewError> {
    let n = points.len();
    if n < 3 {
        return Err(MultiviewError::InsufficientPoints(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, PlanePatch)> = None;
    for _ in 0..iterations {
        let sample = rand::seq::index::sample(&mut rng, n, 3).into_vec();
        let (p0, p1, p2) = (points[sample[0]], points[sample[1]], points[sample[2]]);
        let normal = (p1 - p0).cross(&(p2 - p0));
        if normal.norm() < 1e-12 {
            continue;
        }
        let unit = normal.normalize();
        let plane = PlanePatch::ground(unit, unit.dot(&p0));
        let count = points
            .iter()
            .filter(|p| plane.signed_distance(**p).abs() < threshold)
            .count();
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, plane));
        }
    }
    let (_, seed_plane) =
        best.ok_or(MultiviewError::InsufficientPoints(n))?;
    let inliers: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| seed_plane.signed_distance(**p).abs() < threshold)
        .map(|(i, _)| i)
        .collect();
    if inliers.len() < 3 {
        return Err(MultiviewError::InsufficientPoints(inliers.len()));
    }
    let inlier_pts: Vec<Vec3> = inliers.iter().map(|&i| points[i]).collect();
    let refit = fit_plane_least_squares(&inlier_pts)?;
    let final_inliers: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| refit.signed_distance(**p).abs() < threshold)
        .map(|(i, _)| i)
        .collect();
    Ok((refit, final_inliers))
}

/// Scale factor aligning the reconstruction with metric units: the camera
/// height divided by the median Y of the plane's inlier road points. Even
/// counts take the lower median.
pub fn resolve_scale(
    _plane: &PlanePatch,
    road_points: &[Vec3],
    rig: &CameraRig,
) -> Result<f64, MultiviewError> {
    if road_points.is_empty() {
        return Err(MultiviewError::InsufficientPoints(0));
    }
    let mut ys: Vec<f64> = road_points.iter().map(|p| p.y).collect();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = ys[(ys.len() - 1) / 2];
    if median <= 1e-6 {
        return Err(MultiviewError::NonPositiveMedian { median });
    }
    Ok(rig.height / median)
}

/// Plane fit in inverse-depth space: for points on a plane `n . X = d`,
/// inverse depth is affine in the normalized image coordinates,
/// `1/z = (n_x x + n_y y + n_z) / d`, and triangulation noise is close to
/// uniform in inverse depth. A Huber-reweighted least-squares fit there
/// recovers planes from ray-aligned noise that defeats 3D scatter fits.
/// Points are (pixel, metric depth) pairs in the observing camera.
pub fn fit_plane_inverse_depth(
    samples: &[(Vec2, f64)],
    intr: &CameraIntrinsics,
) -> Result<PlanePatch, MultiviewError> {
    let usable: Vec<(f64, f64, f64)> = samples
        .iter()
        .filter(|(_, z)| *z > 0.1)
        .map(|(p, z)| {
            (
                (p.x - intr.cx) / intr.fx,
                (p.y - intr.cy) / intr.fy,
                1.0 / z,
            )
        })
        .collect();
    if usable.len() < 3 {
        return Err(MultiviewError::InsufficientPoints(usable.len()));
    }
    let mut weights = vec![1.0; usable.len()];
    let mut coeffs = Vec3::zeros();
    for pass in 0..3 {
        let mut ata = Mat3::zeros();
        let mut atb = Vec3::zeros();
        for ((x, y, rho), w) in usable.iter().zip(&weights) {
            let row = Vec3::new(*x, *y, 1.0);
            ata += row * row.transpose() * *w;
            atb += row * (*rho * *w);
        }
        let Some(solved) = ata.lu().solve(&atb) else {
            return Err(MultiviewError::InsufficientPoints(usable.len()));
        };
        coeffs = solved;
        if pass == 2 {
            break;
        }
        let mut residuals: Vec<f64> = usable
            .iter()
            .map(|(x, y, rho)| (coeffs.x * x + coeffs.y * y + coeffs.z - rho).abs())
            .collect();
        let mut sorted = residuals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let scale = (1.4826 * sorted[(sorted.len() - 1) / 2]).max(1e-9);
        for (w, r) in weights.iter_mut().zip(residuals.drain(..)) {
            *w = crate::residuals::huber_weight(r, 2.0 * scale);
        }
    }
    let norm = coeffs.norm();
    if norm < 1e-9 {
        return Err(MultiviewError::InsufficientPoints(usable.len()));
    }
    Ok(PlanePatch::ground(coeffs, 1.0))
}

/// One reconstructed scene point (pre-scale, frame of the first camera).
#[derive(Debug, Clone, Copy)]
pub struct ScenePoint {
    pub position: Vec3,
    /// Pixel in the current (detection) frame.
    pub pixel_a: Vec2,
    /// Pixel in the second frame, used to join third-view matches.
    pub pixel_b: Vec2,
    pub label: PointLabel,
}

/// Growing two/three-view reconstruction in the current camera's frame.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub pose_12: RelativePose,
    pub pose_13: Option<CameraPose>,
    pub points: Vec<ScenePoint>,
}

/// Builds the initial two-view reconstruction from f1<->f2 matches.
pub fn build_two_view(
    corr: &CorrespondenceSet,
    intr: &CameraIntrinsics,
    config: &MultiviewConfig,
) -> Result<Reconstruction, MultiviewError> {
    let ego = estimate_egomotion(corr, intr, config)?;
    let triangulated = triangulate_indexed(corr, &ego.inliers, &ego.pose, intr, config);
    let points = triangulated
        .into_iter()
        .map(|(i, position)| ScenePoint {
            position,
            pixel_a: corr.matches[i].a,
            pixel_b: corr.matches[i].b,
            label: corr.matches[i].label,
        })
        .collect();
    Ok(Reconstruction {
        pose_12: ego.pose,
        pose_13: None,
        points,
    })
}

/// Reprojection term for resection refinement: rotation and translation of
/// one camera against fixed 3D points.
struct ResectionTerm {
    blocks: [BlockId; 2],
    points: Vec<Vec3>,
    pixels: Vec<Vec2>,
    intr: CameraIntrinsics,
}

impl CostTerm for ResectionTerm {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn eval(&self, values: &[BlockValue]) -> Result<TermEval, SolveError> {
        let rot = values[self.blocks[0].0].as_rotation();
        let t = Vec3::new(
            values[self.blocks[1].0].as_euclidean()[0],
            values[self.blocks[1].0].as_euclidean()[1],
            values[self.blocks[1].0].as_euclidean()[2],
        );
        let n = self.points.len();
        let mut residual = DVector::zeros(2 * n);
        let mut j_rot = DMatrix::zeros(2 * n, 3);
        let mut j_t = DMatrix::zeros(2 * n, 3);
        for (i, (&p, &pix)) in self.points.iter().zip(&self.pixels).enumerate() {
            let x = rot.rotate(p) + t;
            if x.z <= crate::geometry::DEPTH_EPSILON {
                return Err(SolveError::Evaluation(format!(
                    "resection point {i} behind camera"
                )));
            }
            let proj = Vec2::new(
                self.intr.fx * x.x / x.z + self.intr.cx,
                self.intr.fy * x.y / x.z + self.intr.cy,
            );
            residual[2 * i] = proj.x - pix.x;
            residual[2 * i + 1] = proj.y - pix.y;
            let jp = crate::geometry::projection_jacobian(x, &self.intr);
            let skew = Mat3::new(
                0.0,
                -(x.z - t.z),
                x.y - t.y,
                x.z - t.z,
                0.0,
                -(x.x - t.x),
                -(x.y - t.y),
                x.x - t.x,
                0.0,
            );
            let jr = jp * (-skew);
            for c in 0..3 {
                j_rot[(2 * i, c)] = jr[(0, c)];
                j_rot[(2 * i + 1, c)] = jr[(1, c)];
                j_t[(2 * i, c)] = jp[(0, c)];
                j_t[(2 * i + 1, c)] = jp[(1, c)];
            }
        }
        Ok(TermEval {
            residual,
            jacobians: vec![j_rot, j_t],
            row_deltas: vec![f64::INFINITY; 2 * n],
        })
    }
}

/// Linear DLT pose from 3D-2D matches in normalized coordinates.
fn dlt_resection(points: &[Vec3], rays: &[Vec3]) -> Option<CameraPose> {
    let n = points.len();
    if n < 6 {
        return None;
    }
    let mut a = DMatrix::zeros(2 * n, 12);
    for (i, (p, r)) in points.iter().zip(rays).enumerate() {
        let hom = [p.x, p.y, p.z, 1.0];
        for c in 0..4 {
            a[(2 * i, c)] = -hom[c];
            a[(2 * i, 8 + c)] = r.x * hom[c];
            a[(2 * i + 1, 4 + c)] = -hom[c];
            a[(2 * i + 1, 8 + c)] = r.y * hom[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let p_vec = v_t.row(v_t.nrows() - 1);
    let mut m = Mat3::new(
        p_vec[0], p_vec[1], p_vec[2], p_vec[4], p_vec[5], p_vec[6], p_vec[8], p_vec[9], p_vec[10],
    );
    let mut p4 = Vec3::new(p_vec[3], p_vec[7], p_vec[11]);
    if m.determinant() < 0.0 {
        m = -m;
        p4 = -p4;
    }
    let scale = m.determinant().cbrt();
    if scale.abs() < 1e-12 {
        return None;
    }
    let svd3 = (m / scale).svd(true, true);
    let (u, v_t3) = (svd3.u?, svd3.v_t?);
    let mut r = u * v_t3;
    if r.determinant() < 0.0 {
        r = -r;
    }
    Some(CameraPose {
        rotation: Rotation::from_matrix(&r),
        translation: p4 / scale,
    })
}

/// Adds the third view: RANSAC resection of f3 against already-triangulated
/// points joined through shared f2 pixels, LM refinement, then triangulation
/// of the remaining f2<->f3 matches into the common frame.
pub fn add_third_view(
    corr23: &CorrespondenceSet,
    recon: &mut Reconstruction,
    intr: &CameraIntrinsics,
    config: &MultiviewConfig,
) -> Result<(), MultiviewError> {
    // Join corr23 frame-a pixels (f2) against reconstructed points' f2 pixels.
    let quantize = |p: Vec2| -> (i64, i64) {
        ((p.x * 1e6).round() as i64, (p.y * 1e6).round() as i64)
    };
    let mut by_pixel = std::collections::HashMap::new();
    for (idx, sp) in recon.points.iter().enumerate() {
        by_pixel.insert(quantize(sp.pixel_b), idx);
    }
    let mut joined: Vec<(usize, usize)> = Vec::new(); // (corr23 match, recon point)
    for (mi, m) in corr23.matches.iter().enumerate() {
        if let Some(&pi) = by_pixel.get(&quantize(m.a)) {
            joined.push((mi, pi));
        }
    }
    if joined.len() < 6 {
        return Err(MultiviewError::ResectionFailure(format!(
            "only {} matches join triangulated points",
            joined.len()
        )));
    }

    let pts3d: Vec<Vec3> = joined.iter().map(|&(_, pi)| recon.points[pi].position).collect();
    let pixels3: Vec<Vec2> = joined.iter().map(|&(mi, _)| corr23.matches[mi].b).collect();
    let rays3: Vec<Vec3> = pixels3.iter().map(|p| normalized_ray(*p, intr)).collect();

    // RANSAC resection on 6-point samples scored by pixel reprojection.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let thresh = config.resection_threshold_px;
    let reproj_ok = |pose: &CameraPose, p: Vec3, pix: Vec2| -> bool {
        let x = pose.rotation.rotate(p) + pose.translation;
        if x.z <= 0.0 {
            return false;
        }
        match project(x, intr) {
            Ok(q) => (q - pix).norm() < thresh,
            Err(_) => false,
        }
    };
    let mut best: Option<(usize, CameraPose)> = None;
    for _ in 0..config.ransac_iterations {
        let sample = rand::seq::index::sample(&mut rng, joined.len(), 6.min(joined.len())).into_vec();
        let sp: Vec<Vec3> = sample.iter().map(|&i| pts3d[i]).collect();
        let sr: Vec<Vec3> = sample.iter().map(|&i| rays3[i]).collect();
        let Some(pose) = dlt_resection(&sp, &sr) else {
            continue;
        };
        let count = pts3d
            .iter()
            .zip(&pixels3)
            .filter(|(p, pix)| reproj_ok(&pose, **p, **pix))
            .count();
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, pose));
        }
    }
    let (count, pose) = best.ok_or_else(|| {
        MultiviewError::ResectionFailure("no valid resection hypothesis".into())
    })?;
    if count * 2 < joined.len() {
        return Err(MultiviewError::ResectionFailure(format!(
            "inlier ratio {count}/{} below 50%",
            joined.len()
        )));
    }

    // Refine on the inliers with the LM solver.
    let inlier_idx: Vec<usize> = (0..joined.len())
        .filter(|&i| reproj_ok(&pose, pts3d[i], pixels3[i]))
        .collect();
    let mut problem = Problem::new();
    let rot_block = problem.add_block(BlockValue::RotationQuat(pose.rotation), BlockRole::Rotation);
    let t_block = problem.add_block(
        BlockValue::Euclidean(DVector::from_column_slice(&[
            pose.translation.x,
            pose.translation.y,
            pose.translation.z,
        ])),
        BlockRole::Translation,
    );
    problem
        .add_term(Box::new(ResectionTerm {
            blocks: [rot_block, t_block],
            points: inlier_idx.iter().map(|&i| pts3d[i]).collect(),
            pixels: inlier_idx.iter().map(|&i| pixels3[i]).collect(),
            intr: *intr,
        }))
        .map_err(MultiviewError::from)?;
    let solve_config = SolverConfig {
        schedule: vec![Phase::new(
            "resection",
            &[BlockRole::Rotation, BlockRole::Translation],
        )],
        max_iterations: 50,
        ..Default::default()
    };
    solve(&mut problem, &solve_config).map_err(MultiviewError::from)?;
    let refined = CameraPose {
        rotation: problem.block_value(rot_block).as_rotation(),
        translation: {
            let v = problem.block_value(t_block).as_euclidean();
            Vec3::new(v[0], v[1], v[2])
        },
    };

    // Re-triangulate the joined points against the first view over the
    // doubled baseline; depth noise shrinks accordingly.
    let min_angle = config.min_triangulation_angle_deg.to_radians();
    let c3_center = -(refined.rotation.inverse_rotate(refined.translation));
    for &(mi, pi) in &joined {
        let ra = normalized_ray(recon.points[pi].pixel_a, intr);
        let rb = normalized_ray(corr23.matches[mi].b, intr);
        let Some(p) = triangulate_ray_pair(ra, rb, &refined.rotation, refined.translation) else {
            continue;
        };
        let d3 = (refined.rotation.rotate(p) + refined.translation).z;
        if p.z <= 0.0 || d3 <= 0.0 {
            continue;
        }
        if triangulation_angle(p, c3_center) < min_angle {
            continue;
        }
        recon.points[pi].position = p;
    }

    // Triangulate f2<->f3 matches that did not join existing points.
    let joined_set: std::collections::HashSet<usize> = joined.iter().map(|&(mi, _)| mi).collect();
    let pose2 = CameraPose {
        rotation: recon.pose_12.rotation,
        translation: recon.pose_12.frame_translation(),
    };
    let c2 = -(pose2.rotation.inverse_rotate(pose2.translation));
    let c3 = -(refined.rotation.inverse_rotate(refined.translation));
    for (mi, m) in corr23.matches.iter().enumerate() {
        if joined_set.contains(&mi) {
            continue;
        }
        let r2 = normalized_ray(m.a, intr);
        let r3 = normalized_ray(m.b, intr);
        let Some(p) = triangulate_general(&pose2, &refined, r2, r3) else {
            continue;
        };
        let d2 = (pose2.rotation.rotate(p) + pose2.translation).z;
        let d3 = (refined.rotation.rotate(p) + refined.translation).z;
        if d2 <= 0.0 || d3 <= 0.0 || p.z <= 0.0 {
            continue;
        }
        let a2 = ((p - c2).normalize()).dot(&(p - c3).normalize()).clamp(-1.0, 1.0).acos();
        if a2 < min_angle {
            continue;
        }
        let Ok(pixel_a) = project(p, intr) else {
            continue;
        };
        recon.points.push(ScenePoint {
            position: p,
            pixel_a,
            pixel_b: m.a,
            label: m.label,
        });
    }

    recon.pose_13 = Some(refined);
    Ok(())
}

/// DLT triangulation under two arbitrary camera poses in the common frame.
fn triangulate_general(pa: &CameraPose, pb: &CameraPose, ra: Vec3, rb: Vec3) -> Option<Vec3> {
    let mut a = Matrix4::zeros();
    for (row0, (pose, ray)) in [(pa, ra), (pb, rb)].into_iter().enumerate() {
        let r = pose.rotation.matrix();
        let t = pose.translation;
        for col in 0..3 {
            a[(2 * row0, col)] = ray.x * r[(2, col)] - r[(0, col)];
            a[(2 * row0 + 1, col)] = ray.y * r[(2, col)] - r[(1, col)];
        }
        a[(2 * row0, 3)] = ray.x * t.z - t.x;
        a[(2 * row0 + 1, 3)] = ray.y * t.z - t.y;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let h: Vector4<f64> = v_t.row(3).transpose();
    if h.w.abs() < 1e-12 {
        return None;
    }
    Some(Vec3::new(h.x / h.w, h.y / h.w, h.z / h.w))
}
