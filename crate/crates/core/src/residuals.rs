//! Energy terms of the joint objective, each exposed as a residual vector
//! with analytic Jacobians with respect to its parameter blocks.
//!
//! Parameter blocks per vehicle: rotation increment (3), translation (3),
//! shape coefficients (B), plane normal (ambient 3), plane offset (1).
//! Rotation Jacobians are taken with respect to a left-composed axis-angle
//! increment at the current estimate; plane-normal Jacobians are ambient and
//! are restricted to the unit sphere's tangent plane by the solver.

use nalgebra::{DMatrix, DVector, RowVector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    canonicalize_up, projection_jacobian, CameraIntrinsics, GeometryError, Mat3, Vec2, Vec3, E2,
};
use crate::shape_model::{
    deformed_object_points, dimension_extremizers, dimensions, ShapeError, ShapePrior,
    VehicleState,
};

/// Denominator guard used by the solver-facing disambiguation term.
pub const DISAMBIGUATION_CLAMP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResidualError {
    #[error("keypoint {index} has non-positive depth z = {z}")]
    NonPositiveDepth { z: f64, index: usize },
    #[error("disambiguation denominator {value} is near singular")]
    NearSingularDenominator { value: f64 },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Which energy term a residual block evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TermKind {
    Reprojection,
    Ground,
    NormalAlignment,
    Disambiguation,
    BasePoints,
    Consistency,
    DimensionRegularizer,
}

impl TermKind {
    pub const ALL: [TermKind; 7] = [
        TermKind::Reprojection,
        TermKind::Ground,
        TermKind::NormalAlignment,
        TermKind::Disambiguation,
        TermKind::BasePoints,
        TermKind::Consistency,
        TermKind::DimensionRegularizer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TermKind::Reprojection => "reprojection",
            TermKind::Ground => "ground",
            TermKind::NormalAlignment => "normal_alignment",
            TermKind::Disambiguation => "disambiguation",
            TermKind::BasePoints => "base_points",
            TermKind::Consistency => "consistency",
            TermKind::DimensionRegularizer => "dimension_regularizer",
        }
    }
}

/// Physical class of a residual row; selects the Huber scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowScale {
    Pixels,
    Meters,
    Dimensionless,
}

/// Parameter block reference: block kind plus the vehicle it binds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockRef {
    Rotation(usize),
    Translation(usize),
    Shape(usize),
    PlaneNormal(usize),
    PlaneOffset(usize),
}

impl BlockRef {
    pub fn vehicle(&self) -> usize {
        match *self {
            BlockRef::Rotation(v)
            | BlockRef::Translation(v)
            | BlockRef::Shape(v)
            | BlockRef::PlaneNormal(v)
            | BlockRef::PlaneOffset(v) => v,
        }
    }

    pub fn with_vehicle(&self, v: usize) -> BlockRef {
        match *self {
            BlockRef::Rotation(_) => BlockRef::Rotation(v),
            BlockRef::Translation(_) => BlockRef::Translation(v),
            BlockRef::Shape(_) => BlockRef::Shape(v),
            BlockRef::PlaneNormal(_) => BlockRef::PlaneNormal(v),
            BlockRef::PlaneOffset(_) => BlockRef::PlaneOffset(v),
        }
    }
}

/// A residual vector with one dense Jacobian per bound parameter block.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub term: TermKind,
    pub residual: DVector<f64>,
    pub jacobians: Vec<(BlockRef, DMatrix<f64>)>,
    pub row_scales: Vec<RowScale>,
}

impl ResidualBlock {
    pub fn len(&self) -> usize {
        self.residual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual.len() == 0
    }

    /// Rebinds every block to the given vehicle index (single-vehicle terms
    /// are built against vehicle 0).
    pub fn for_vehicle(mut self, v: usize) -> Self {
        for (block, _) in &mut self.jacobians {
            *block = block.with_vehicle(v);
        }
        self
    }

    pub fn jacobian(&self, block: BlockRef) -> Option<&DMatrix<f64>> {
        self.jacobians.iter().find(|(b, _)| *b == block).map(|(_, j)| j)
    }
}

/// Weights and robustifier scales of the total energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyWeights {
    pub eta_r: f64,
    pub eta_g: f64,
    pub eta_n: f64,
    pub eta_d: f64,
    pub eta_b: f64,
    pub eta_c: f64,
    pub eta_reg: f64,
    /// Huber scale for reprojection rows, pixels.
    pub huber_delta_px: f64,
    /// Huber scale for metric rows, meters.
    pub huber_delta_m: f64,
    /// Huber scale for dimensionless rows.
    pub huber_delta_dimensionless: f64,
    /// Stabilizing constant of the disambiguation prior.
    pub epsilon: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            eta_r: 1.0,
            eta_g: 10.0,
            eta_n: 1.0,
            eta_d: 0.05,
            eta_b: 10.0,
            eta_c: 1.0,
            eta_reg: 1.0,
            huber_delta_px: 10.0,
            huber_delta_m: 0.5,
            huber_delta_dimensionless: 1.0,
            epsilon: 1e-3,
        }
    }
}

impl EnergyWeights {
    pub fn validate(&self) -> Result<(), ResidualError> {
        let all = [
            self.eta_r,
            self.eta_g,
            self.eta_n,
            self.eta_d,
            self.eta_b,
            self.eta_c,
            self.eta_reg,
        ];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(ResidualError::NearSingularDenominator { value: f64::NAN });
        }
        assert!(self.epsilon > 0.0, "epsilon must be positive");
        Ok(())
    }

    /// Same weights with the robustifier disabled (pure quadratic cost).
    pub fn without_huber(mut self) -> Self {
        self.huber_delta_px = f64::INFINITY;
        self.huber_delta_m = f64::INFINITY;
        self.huber_delta_dimensionless = f64::INFINITY;
        self
    }

    pub fn eta(&self, term: TermKind) -> f64 {
        match term {
            TermKind::Reprojection => self.eta_r,
            TermKind::Ground => self.eta_g,
            TermKind::NormalAlignment => self.eta_n,
            TermKind::Disambiguation => self.eta_d,
            TermKind::BasePoints => self.eta_b,
            TermKind::Consistency => self.eta_c,
            TermKind::DimensionRegularizer => self.eta_reg,
        }
    }

    pub fn huber_delta(&self, scale: RowScale) -> f64 {
        match scale {
            RowScale::Pixels => self.huber_delta_px,
            RowScale::Meters => self.huber_delta_m,
            RowScale::Dimensionless => self.huber_delta_dimensionless,
        }
    }
}

/// Axis-aligned detection bounding box, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl BBox {
    pub fn is_degenerate(&self) -> bool {
        self.u_max <= self.u_min || self.v_max <= self.v_min
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(
            0.5 * (self.u_min + self.u_max),
            0.5 * (self.v_min + self.v_max),
        )
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    /// Scaled about its center by `factor`.
    pub fn expanded(&self, factor: f64) -> BBox {
        let c = self.center();
        let hw = 0.5 * (self.u_max - self.u_min) * factor;
        let hh = 0.5 * (self.v_max - self.v_min) * factor;
        BBox {
            u_min: c.x - hw,
            v_min: c.y - hh,
            u_max: c.x + hw,
            v_max: c.y + hh,
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.u_min && p.x <= self.u_max && p.y >= self.v_min && p.y <= self.v_max
    }
}

/// One detected vehicle's 2D evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    /// K keypoint locations; entries with confidence 0 are unobserved.
    pub keypoints2d: Vec<Vec2>,
    /// Per-keypoint confidence in [0, 1].
    pub confidences: Vec<f64>,
    pub bbox: BBox,
    pub intr: CameraIntrinsics,
}

fn skew(v: Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Instantiated wireframe plus the derivative bookkeeping shared by the
/// ground, normal and base-point terms.
pub(crate) struct VehicleKinematics {
    pub keypoints_cam: Vec<Vec3>,
    /// Bottom-of-vehicle point: wheel-center centroid, camera frame.
    pub t_c: Vec3,
    /// Car-base normal, camera frame, pointing up.
    pub n_c: Vec3,
    /// d t_c / d lambda_j, camera frame.
    pub dtc_dlam: Vec<Vec3>,
    /// d n_c / d lambda_j, camera frame.
    pub dnc_dlam: Vec<Vec3>,
}

pub(crate) fn vehicle_kinematics(
    prior: &ShapePrior,
    state: &VehicleState,
) -> Result<VehicleKinematics, ResidualError> {
    let object_pts = deformed_object_points(prior, &state.shape);
    let keypoints_cam: Vec<Vec3> = object_pts
        .iter()
        .map(|p| state.rotation.rotate(*p) + state.translation)
        .collect();
    let b = prior.basis_size();

    // Wheel geometry in the object frame.
    let wheels: Vec<Vec3> = prior.wheel_indices.iter().map(|&w| object_pts[w]).collect();
    let mu = wheels.iter().fold(Vec3::zeros(), |a, p| a + p) / 4.0;
    let centered: Vec<Vec3> = wheels.iter().map(|p| p - mu).collect();
    let mut scatter = Mat3::zeros();
    for q in &centered {
        scatter += q * q.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let sv: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
    if sv[1] - sv[0] < crate::geometry::PLANE_DEGENERACY_TOLERANCE {
        return Err(GeometryError::DegenerateConfiguration { gap: sv[1] - sv[0] }.into());
    }
    let n_obj_raw: Vec3 = eig.eigenvectors.column(order[0]).normalize();
    let n_obj = canonicalize_up(n_obj_raw);
    let obj_sign = if (n_obj - n_obj_raw).norm() > 1.0 { -1.0 } else { 1.0 };

    // First-order eigenvector perturbation for the smallest eigenvalue.
    let lam_min = eig.eigenvalues[order[0]];
    let mut dn_obj_dlam: Vec<Vec3> = Vec::with_capacity(b);
    for j in 0..b {
        let disp: Vec<Vec3> = prior
            .wheel_indices
            .iter()
            .map(|&w| prior.basis[j][w])
            .collect();
        let disp_mean = disp.iter().fold(Vec3::zeros(), |a, p| a + p) / 4.0;
        let mut ds = Mat3::zeros();
        for (q, d) in centered.iter().zip(&disp) {
            let u = d - disp_mean;
            ds += u * q.transpose() + q * u.transpose();
        }
        let mut dn = Vec3::zeros();
        for &k in &order[1..] {
            let ek: Vec3 = eig.eigenvectors.column(k).into();
            let coeff = (ek.transpose() * ds * (n_obj * obj_sign))[(0, 0)]
                / (lam_min - eig.eigenvalues[k]);
            dn += ek * coeff;
        }
        dn_obj_dlam.push(dn * obj_sign);
    }

    // Into the camera frame, with the up-pointing sign fixed there.
    let m = state.rotation.rotate(n_obj);
    let n_c = canonicalize_up(m);
    let cam_sign = if (n_c - m).norm() > 1.0 { -1.0 } else { 1.0 };
    let dnc_dlam: Vec<Vec3> = dn_obj_dlam
        .iter()
        .map(|dn| state.rotation.rotate(*dn) * cam_sign)
        .collect();

    let t_c = state.rotation.rotate(mu) + state.translation;
    let dtc_dlam: Vec<Vec3> = (0..b)
        .map(|j| {
            let disp_mean = prior
                .wheel_indices
                .iter()
                .fold(Vec3::zeros(), |a, &w| a + prior.basis[j][w])
                / 4.0;
            state.rotation.rotate(disp_mean)
        })
        .collect();

    Ok(VehicleKinematics {
        keypoints_cam,
        t_c,
        n_c,
        dtc_dlam,
        dnc_dlam,
    })
}

/// Confidence-weighted keypoint reprojection term. Rows come in (u, v) pairs
/// for every keypoint with nonzero confidence.
pub fn reprojection_residual(
    prior: &ShapePrior,
    state: &VehicleState,
    obs: &Observation,
) -> Result<ResidualBlock, ResidualError> {
    let kin = vehicle_kinematics(prior, state)?;
    let b = prior.basis_size();
    let visible: Vec<usize> = (0..prior.keypoint_count())
        .filter(|&i| obs.confidences[i] > 0.0)
        .collect();
    let rows = 2 * visible.len();

    let mut residual = DVector::zeros(rows);
    let mut j_rot = DMatrix::zeros(rows, 3);
    let mut j_trans = DMatrix::zeros(rows, 3);
    let mut j_shape = DMatrix::zeros(rows, b);

    for (slot, &i) in visible.iter().enumerate() {
        let x = kin.keypoints_cam[i];
        if x.z <= crate::geometry::DEPTH_EPSILON {
            return Err(ResidualError::NonPositiveDepth { z: x.z, index: i });
        }
        let c = obs.confidences[i];
        let proj = Vec2::new(
            obs.intr.fx * x.x / x.z + obs.intr.cx,
            obs.intr.fy * x.y / x.z + obs.intr.cy,
        );
        let diff = (proj - obs.keypoints2d[i]) * c;
        residual[2 * slot] = diff.x;
        residual[2 * slot + 1] = diff.y;

        let jp = projection_jacobian(x, &obs.intr) * c;
        let dx_drot = -skew(x - state.translation);
        let jr = jp * dx_drot;
        for col in 0..3 {
            j_rot[(2 * slot, col)] = jr[(0, col)];
            j_rot[(2 * slot + 1, col)] = jr[(1, col)];
            j_trans[(2 * slot, col)] = jp[(0, col)];
            j_trans[(2 * slot + 1, col)] = jp[(1, col)];
        }
        for j in 0..b {
            let dir = state.rotation.rotate(prior.basis[j][i]);
            let dpix = jp * dir;
            j_shape[(2 * slot, j)] = dpix.x;
            j_shape[(2 * slot + 1, j)] = dpix.y;
        }
    }

    Ok(ResidualBlock {
        term: TermKind::Reprojection,
        residual,
        jacobians: vec![
            (BlockRef::Rotation(0), j_rot),
            (BlockRef::Translation(0), j_trans),
            (BlockRef::Shape(0), j_shape),
        ],
        row_scales: vec![RowScale::Pixels; rows],
    })
}

/// Ground contact term: scalar `n_c . t_c - d_g`.
pub fn ground_residual(
    state: &VehicleState,
    prior: &ShapePrior,
) -> Result<ResidualBlock, ResidualError> {
    let kin = vehicle_kinematics(prior, state)?;
    let b = prior.basis_size();
    let r = kin.n_c.dot(&kin.t_c) - state.plane.offset;

    let rot_row: RowVector3<f64> = kin.t_c.transpose() * (-skew(kin.n_c))
        + kin.n_c.transpose() * (-skew(kin.t_c - state.translation));
    let mut j_rot = DMatrix::zeros(1, 3);
    let mut j_trans = DMatrix::zeros(1, 3);
    for col in 0..3 {
        j_rot[(0, col)] = rot_row[col];
        j_trans[(0, col)] = kin.n_c[col];
    }
    let mut j_shape = DMatrix::zeros(1, b);
    for j in 0..b {
        j_shape[(0, j)] = kin.dnc_dlam[j].dot(&kin.t_c) + kin.n_c.dot(&kin.dtc_dlam[j]);
    }
    let j_offset = DMatrix::from_element(1, 1, -1.0);

    Ok(ResidualBlock {
        term: TermKind::Ground,
        residual: DVector::from_element(1, r),
        jacobians: vec![
            (BlockRef::Rotation(0), j_rot),
            (BlockRef::Translation(0), j_trans),
            (BlockRef::Shape(0), j_shape),
            (BlockRef::PlaneOffset(0), j_offset),
        ],
        row_scales: vec![RowScale::Meters],
    })
}

/// Normal alignment term: `n_c x n_g`, vanishing when the car base is
/// parallel to its ground patch.
pub fn normal_alignment_residual(
    state: &VehicleState,
    prior: &ShapePrior,
) -> Result<ResidualBlock, ResidualError> {
    let kin = vehicle_kinematics(prior, state)?;
    let b = prior.basis_size();
    let n_g = state.plane.normal;
    let r = kin.n_c.cross(&n_g);

    // dr = dn_c x n_g + n_c x dn_g
    let j_rot_m = -skew(n_g) * (-skew(kin.n_c));
    let j_normal_m = skew(kin.n_c);
    let mut j_rot = DMatrix::zeros(3, 3);
    let mut j_normal = DMatrix::zeros(3, 3);
    for row in 0..3 {
        for col in 0..3 {
            j_rot[(row, col)] = j_rot_m[(row, col)];
            j_normal[(row, col)] = j_normal_m[(row, col)];
        }
    }
    let mut j_shape = DMatrix::zeros(3, b);
    for j in 0..b {
        let d = kin.dnc_dlam[j].cross(&n_g);
        for row in 0..3 {
            j_shape[(row, j)] = d[row];
        }
    }

    Ok(ResidualBlock {
        term: TermKind::NormalAlignment,
        residual: DVector::from_column_slice(&[r.x, r.y, r.z]),
        jacobians: vec![
            (BlockRef::Rotation(0), j_rot),
            (BlockRef::Shape(0), j_shape),
            (BlockRef::PlaneNormal(0), j_normal),
        ],
        row_scales: vec![RowScale::Dimensionless; 3],
    })
}

/// Upright disambiguation prior: `[-1/(e2.n_c + eps), -1/(e2.n_g + eps)]`.
/// Errors when a denominator is within 1e-12 of zero; the solver uses
/// [`disambiguation_residual_guarded`] instead.
pub fn disambiguation_residual(
    state: &VehicleState,
    prior: &ShapePrior,
    weights: &EnergyWeights,
) -> Result<ResidualBlock, ResidualError> {
    disambiguation_impl(state, prior, weights, false)
}

/// Disambiguation term with denominators clamped away from the pole.
pub fn disambiguation_residual_guarded(
    state: &VehicleState,
    prior: &ShapePrior,
    weights: &EnergyWeights,
) -> Result<ResidualBlock, ResidualError> {
    disambiguation_impl(state, prior, weights, true)
}

fn disambiguation_impl(
    state: &VehicleState,
    prior: &ShapePrior,
    weights: &EnergyWeights,
    clamp: bool,
) -> Result<ResidualBlock, ResidualError> {
    let kin = vehicle_kinematics(prior, state)?;
    let b = prior.basis_size();
    let eps = weights.epsilon;

    // Returns (residual, d residual / d denominator-argument).
    let eval = |dot: f64| -> Result<(f64, f64), ResidualError> {
        let den = dot + eps;
        if clamp {
            if den.abs() < DISAMBIGUATION_CLAMP {
                let clamped = DISAMBIGUATION_CLAMP * if den < 0.0 { -1.0 } else { 1.0 };
                return Ok((-1.0 / clamped, 0.0));
            }
        } else if den.abs() < 1e-12 {
            return Err(ResidualError::NearSingularDenominator { value: den });
        }
        Ok((-1.0 / den, 1.0 / (den * den)))
    };

    let (r_c, g_c) = eval(E2.dot(&kin.n_c))?;
    let (r_g, g_g) = eval(E2.dot(&state.plane.normal))?;

    // d(e2 . n_c)/d rot = e2^T (-[n_c]x)
    let drow: RowVector3<f64> = E2.transpose() * (-skew(kin.n_c));
    let mut j_rot = DMatrix::zeros(2, 3);
    let mut j_normal = DMatrix::zeros(2, 3);
    for col in 0..3 {
        j_rot[(0, col)] = g_c * drow[col];
        j_normal[(1, col)] = g_g * E2[col];
    }
    let mut j_shape = DMatrix::zeros(2, b);
    for j in 0..b {
        j_shape[(0, j)] = g_c * E2.dot(&kin.dnc_dlam[j]);
    }

    Ok(ResidualBlock {
        term: TermKind::Disambiguation,
        residual: DVector::from_column_slice(&[r_c, r_g]),
        jacobians: vec![
            (BlockRef::Rotation(0), j_rot),
            (BlockRef::Shape(0), j_shape),
            (BlockRef::PlaneNormal(0), j_normal),
        ],
        row_scales: vec![RowScale::Dimensionless; 2],
    })
}

/// Base point term: one row `n_c . t_c - n_c . X_b` per base keypoint.
pub fn base_points_residual(
    prior: &ShapePrior,
    state: &VehicleState,
) -> Result<ResidualBlock, ResidualError> {
    let kin = vehicle_kinematics(prior, state)?;
    let b = prior.basis_size();
    let rows = prior.base_indices.len();

    let mut residual = DVector::zeros(rows);
    let mut j_rot = DMatrix::zeros(rows, 3);
    let j_trans = DMatrix::zeros(rows, 3); // t cancels between t_c and X_b
    let mut j_shape = DMatrix::zeros(rows, b);

    for (row, &bi) in prior.base_indices.iter().enumerate() {
        let xb = kin.keypoints_cam[bi];
        let diff = kin.t_c - xb;
        residual[row] = kin.n_c.dot(&diff);

        let rot_row: RowVector3<f64> = diff.transpose() * (-skew(kin.n_c))
            + kin.n_c.transpose() * (-skew(kin.t_c - state.translation) + skew(xb - state.translation));
        for col in 0..3 {
            j_rot[(row, col)] = rot_row[col];
        }
        for j in 0..b {
            let dxb = state.rotation.rotate(prior.basis[j][bi]);
            j_shape[(row, j)] =
                kin.dnc_dlam[j].dot(&diff) + kin.n_c.dot(&(kin.dtc_dlam[j] - dxb));
        }
    }

    Ok(ResidualBlock {
        term: TermKind::BasePoints,
        residual,
        jacobians: vec![
            (BlockRef::Rotation(0), j_rot),
            (BlockRef::Translation(0), j_trans),
            (BlockRef::Shape(0), j_shape),
        ],
        row_scales: vec![RowScale::Meters; rows],
    })
}

/// Neighboring vehicles within `neighbor_radius` of each other, as ordered
/// index pairs.
pub fn neighbor_pairs(states: &[VehicleState], neighbor_radius: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for v in 0..states.len() {
        for w in 0..states.len() {
            if v == w {
                continue;
            }
            if (states[v].translation - states[w].translation).norm() <= neighbor_radius {
                pairs.push((v, w));
            }
        }
    }
    pairs
}

/// Cross-vehicle plane consistency: for each ordered neighbor pair, the
/// 4-vector `[n_g^v - n_g^w, d_g^v - d_g^w]`.
pub fn consistency_residual(states: &[VehicleState], neighbor_radius: f64) -> ResidualBlock {
    let pairs = neighbor_pairs(states, neighbor_radius);
    let rows = 4 * pairs.len();
    let mut residual = DVector::zeros(rows);
    let mut row_scales = Vec::with_capacity(rows);

    let mut jacobians: Vec<(BlockRef, DMatrix<f64>)> = Vec::new();
    let entry = |block: BlockRef,
                 jacobians: &mut Vec<(BlockRef, DMatrix<f64>)>|
     -> usize {
        if let Some(pos) = jacobians.iter().position(|(b, _)| *b == block) {
            pos
        } else {
            let cols = match block {
                BlockRef::PlaneNormal(_) => 3,
                BlockRef::PlaneOffset(_) => 1,
                _ => unreachable!(),
            };
            jacobians.push((block, DMatrix::zeros(rows, cols)));
            jacobians.len() - 1
        }
    };

    for (p, &(v, w)) in pairs.iter().enumerate() {
        let dn = states[v].plane.normal - states[w].plane.normal;
        let dd = states[v].plane.offset - states[w].plane.offset;
        let base = 4 * p;
        residual[base] = dn.x;
        residual[base + 1] = dn.y;
        residual[base + 2] = dn.z;
        residual[base + 3] = dd;
        row_scales.extend([
            RowScale::Dimensionless,
            RowScale::Dimensionless,
            RowScale::Dimensionless,
            RowScale::Meters,
        ]);

        for (vehicle, sign) in [(v, 1.0), (w, -1.0)] {
            let ni = entry(BlockRef::PlaneNormal(vehicle), &mut jacobians);
            for axis in 0..3 {
                jacobians[ni].1[(base + axis, axis)] += sign;
            }
            let di = entry(BlockRef::PlaneOffset(vehicle), &mut jacobians);
            jacobians[di].1[(base + 3, 0)] += sign;
        }
    }

    ResidualBlock {
        term: TermKind::Consistency,
        residual,
        jacobians,
        row_scales,
    }
}

/// Dimension prior: `(dim_i(lambda) - target_i) / sigma_i` on the canonical
/// (length, width, height) extents.
pub fn dimension_regularizer(
    prior: &ShapePrior,
    state: &VehicleState,
    target_dims: (f64, f64, f64),
    sigma_dims: (f64, f64, f64),
) -> ResidualBlock {
    assert!(
        sigma_dims.0 > 0.0 && sigma_dims.1 > 0.0 && sigma_dims.2 > 0.0,
        "sigma_dims must be positive"
    );
    let pts = deformed_object_points(prior, &state.shape);
    let dims = dimensions(&pts);
    let extremizers = dimension_extremizers(&pts);
    let targets = [target_dims.0, target_dims.1, target_dims.2];
    let sigmas = [sigma_dims.0, sigma_dims.1, sigma_dims.2];
    let values = [dims.0, dims.1, dims.2];
    // dimension index -> coordinate axis (length = z, width = x, height = y)
    let axes = [2usize, 0, 1];

    let b = prior.basis_size();
    let mut residual = DVector::zeros(3);
    let mut j_shape = DMatrix::zeros(3, b);
    for row in 0..3 {
        residual[row] = (values[row] - targets[row]) / sigmas[row];
        let (hi, lo) = extremizers[row];
        let axis = axes[row];
        for j in 0..b {
            j_shape[(row, j)] = (prior.basis[j][hi][axis] - prior.basis[j][lo][axis]) / sigmas[row];
        }
    }

    ResidualBlock {
        term: TermKind::DimensionRegularizer,
        residual,
        jacobians: vec![(BlockRef::Shape(0), j_shape)],
        row_scales: vec![RowScale::Dimensionless; 3],
    }
}

/// Huber penalty: quadratic within `delta`, linear outside.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// IRLS row weight of the Huber penalty: `min(1, delta / |r|)`.
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// Total robustified energy over a set of residual blocks.
pub fn total_cost(blocks: &[ResidualBlock], weights: &EnergyWeights) -> f64 {
    blocks
        .iter()
        .map(|block| {
            let eta = weights.eta(block.term);
            block
                .residual
                .iter()
                .zip(&block.row_scales)
                .map(|(&r, &scale)| eta * huber(r, weights.huber_delta(scale)))
                .sum::<f64>()
        })
        .sum()
}
