//! Per-frame orchestration: ingest detections and correspondences, estimate
//! per-vehicle ground patches, initialize each vehicle on its patch, build
//! the joint problem with cross-vehicle consistency, solve, and emit
//! localized wireframes.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PlanePatch, Rotation, Vec2, Vec3};
use crate::multiview::{
    add_third_view, build_two_view, ransac_dominant_plane, resolve_scale, select_road_points_near,
    CameraRig, CorrespondenceSet, MultiviewConfig, MultiviewError, PointLabel,
};
use crate::residuals::{
    base_points_residual, consistency_residual, dimension_regularizer,
    disambiguation_residual_guarded, ground_residual, neighbor_pairs, normal_alignment_residual,
    reprojection_residual, total_cost, BBox, BlockRef, EnergyWeights, Observation, ResidualBlock,
    ResidualError, TermKind,
};
use crate::shape_model::{
    dimensions, instantiate, ShapeCoefficients, ShapeError, ShapePrior, VehicleState,
};
use crate::solver::{
    coplanar_schedule, solve, BlockId, BlockRole, BlockValue, CostTerm, Problem, SolveError,
    SolveReport, SolverConfig, TermEval,
};

/// Minimum visible keypoints required to attempt localization.
pub const MIN_VISIBLE_KEYPOINTS: usize = 8;

#[derive(Debug, Error, Clone)]
pub enum PipelineError {
    #[error("no ground plane available for detection {detection}: {reason}")]
    PlaneUnavailable { detection: usize, reason: String },
    #[error("bbox bottom ray does not intersect the plane (n.dir = {denom}, range = {range})")]
    RayParallelToPlane { denom: f64, range: f64 },
    #[error("frame has no detections")]
    NoDetections,
    #[error("detection {detection} has only {visible} visible keypoints")]
    TooFewKeypoints { detection: usize, visible: usize },
    #[error("vehicle id sets do not match: {0}")]
    IdMismatch(String),
    #[error(transparent)]
    Multiview(#[from] MultiviewError),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("solver: {0}")]
    Solver(String),
}

impl From<SolveError> for PipelineError {
    fn from(e: SolveError) -> Self {
        PipelineError::Solver(e.to_string())
    }
}

/// One detected vehicle in a frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// K keypoint slots; confidence 0 marks unobserved.
    pub keypoints: Vec<Vec2>,
    pub confidences: Vec<f64>,
    /// Externally supplied metric plane prior (e.g. from lane markings).
    pub plane_prior: Option<PlanePatch>,
}

/// Input for one frame: detections plus correspondences to the two
/// preceding frames (current = f1, previous = f2, before that = f3).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameInput {
    pub frame_id: u64,
    pub detections: Vec<Detection>,
    /// f1 <-> f2 matches.
    pub corr_prev1: Option<CorrespondenceSet>,
    /// f2 <-> f3 matches.
    pub corr_prev2: Option<CorrespondenceSet>,
    pub rig: CameraRig,
}

/// Behavior when no external prior and no usable multiview chain exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPlaneMode {
    /// Assume the flat-world plane at camera height.
    Coplanar,
    /// Report the detection as unlocalized instead.
    RequireMultiview,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Vehicles within this distance share consistency terms, meters.
    pub neighbor_radius: f64,
    /// Bounding-box expansion factor for road-point selection.
    pub bbox_expansion: f64,
    pub weights: EnergyWeights,
    pub solver: SolverConfig,
    pub multiview: MultiviewConfig,
    pub fallback_plane_mode: FallbackPlaneMode,
    /// Freeze planes at the flat-world prior and run phases 1-3 only.
    pub coplanar_baseline: bool,
    /// Dimension-regularizer standard deviations (length, width, height).
    pub dim_sigmas: (f64, f64, f64),
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            neighbor_radius: 6.0,
            bbox_expansion: 2.0,
            weights: EnergyWeights::default(),
            solver: SolverConfig::default(),
            multiview: MultiviewConfig::default(),
            fallback_plane_mode: FallbackPlaneMode::Coplanar,
            coplanar_baseline: false,
            dim_sigmas: (0.2, 0.1, 0.1),
        }
    }
}

/// Where a vehicle's ground patch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneSource {
    ExternalPrior,
    Multiview,
    CoplanarFallback,
}

/// How the vehicle pose was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    RayPlane,
    BBoxHeight,
}

/// Per-frame multiview products shared by all detections: the metric-scaled
/// road point cloud and the frame scale factor.
#[derive(Debug, Clone)]
pub struct FrameGeometry {
    /// Scale factor from reconstruction units to meters.
    pub scale: f64,
    /// Road-labeled points: current-frame pixel and metric position.
    pub road_points: Vec<(Vec2, Vec3)>,
    pub used_third_view: bool,
}

/// Runs the multiview chain once for a frame: egomotion, triangulation,
/// optional third view, and camera-height scale resolution against the road
/// directly ahead of the camera.
pub fn build_frame_geometry(
    frame: &FrameInput,
    config: &PipelineConfig,
) -> Result<FrameGeometry, PipelineError> {
    let corr12 = frame.corr_prev1.as_ref().ok_or_else(|| {
        PipelineError::Multiview(MultiviewError::TooFewMatches {
            got: 0,
            required: 8,
        })
    })?;
    let intr = &frame.rig.intr;
    let mut recon = build_two_view(corr12, intr, &config.multiview)?;
    let mut used_third_view = false;
    if let Some(corr23) = &frame.corr_prev2 {
        // A failed third view falls back to the two-view chain.
        used_third_view = add_third_view(corr23, &mut recon, intr, &config.multiview).is_ok();
    }

    let road: Vec<(Vec2, Vec3)> = recon
        .points
        .iter()
        .filter(|p| p.label == PointLabel::Road)
        .map(|p| (p.pixel_a, p.position))
        .collect();
    if road.len() < 3 {
        return Err(PipelineError::Multiview(MultiviewError::InsufficientPoints(
            road.len(),
        )));
    }

    // Scale from the road right in front of the camera, where the rig height
    // is defined: nearest third of the road cloud by depth.
    let mut by_depth: Vec<usize> = (0..road.len()).collect();
    by_depth.sort_by(|&a, &b| road[a].1.z.partial_cmp(&road[b].1.z).unwrap());
    let take = (road.len() * 3 / 10).max(12).min(road.len());
    let near: Vec<Vec3> = by_depth[..take].iter().map(|&i| road[i].1).collect();

    let mut ys: Vec<f64> = near.iter().map(|p| p.y).collect();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rough_median = ys[(ys.len() - 1) / 2];
    if rough_median <= 1e-6 {
        return Err(PipelineError::Multiview(MultiviewError::NonPositiveMedian {
            median: rough_median,
        }));
    }
    let rough_scale = frame.rig.height / rough_median;
    let base_threshold = config.multiview.plane_threshold_m / rough_scale;
    let threshold = match crate::geometry::fit_plane_least_squares(&near) {
        Ok(prefit) => {
            let mut dists: Vec<f64> = near
                .iter()
                .map(|p| prefit.signed_distance(*p).abs())
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            base_threshold.max(3.0 * 1.4826 * dists[(dists.len() - 1) / 2])
        }
        Err(_) => base_threshold,
    };
    let (plane, inliers) = ransac_dominant_plane(
        &near,
        threshold,
        config.multiview.plane_ransac_iterations,
        config.multiview.seed,
    )?;
    let inlier_pts: Vec<Vec3> = inliers.iter().map(|&i| near[i]).collect();
    let scale = resolve_scale(&plane, &inlier_pts, &frame.rig)?;

    Ok(FrameGeometry {
        scale,
        road_points: road.into_iter().map(|(px, p)| (px, p * scale)).collect(),
        used_third_view,
    })
}

/// Dominant metric plane among road points near one detection's expanded box.
pub fn local_plane_from_geometry(
    geometry: &FrameGeometry,
    bbox: &BBox,
    detection: usize,
    config: &PipelineConfig,
) -> Result<PlanePatch, PipelineError> {
    let labeled: Vec<(Vec2, PointLabel)> = geometry
        .road_points
        .iter()
        .map(|(px, _)| (*px, PointLabel::Road))
        .collect();
    let selected = select_road_points_near(&labeled, bbox, config.bbox_expansion);
    if selected.len() < 3 {
        return Err(PipelineError::PlaneUnavailable {
            detection,
            reason: format!("{} road points near the box", selected.len()),
        });
    }
    let pts: Vec<Vec3> = selected.iter().map(|&i| geometry.road_points[i].1).collect();
    // Triangulation depth noise grows quadratically with range, so the
    // inlier band has to adapt: a least-squares prefit sets the scale via
    // the median absolute deviation, RANSAC rejects gross outliers at that
    // scale, and the final least-squares refit recovers the sqrt(N)
    // averaging a fixed narrow band would destroy.
    let threshold = match crate::geometry::fit_plane_least_squares(&pts) {
        Ok(prefit) => {
            let mut dists: Vec<f64> = pts
                .iter()
                .map(|p| prefit.signed_distance(*p).abs())
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mad = dists[(dists.len() - 1) / 2];
            config.multiview.plane_threshold_m.max(3.0 * 1.4826 * mad)
        }
        Err(_) => config.multiview.plane_threshold_m,
    };
    let (plane, inliers) = ransac_dominant_plane(
        &pts,
        threshold,
        config.multiview.plane_ransac_iterations,
        config.multiview.seed.wrapping_add(detection as u64),
    )
    .map_err(|e| PipelineError::PlaneUnavailable {
        detection,
        reason: e.to_string(),
    })?;
    // Refine in inverse-depth space, where triangulation noise is uniform;
    // the 3D scatter fit degrades badly at range.
    let samples: Vec<(Vec2, f64)> = inliers
        .iter()
        .map(|&i| {
            let (pixel, pos) = geometry.road_points[selected[i]];
            (pixel, pos.z)
        })
        .collect();
    match fit_plane_inverse_depth(&samples, &geometry.intr) {
        Ok(refined) => Ok(refined),
        Err(_) => Ok(plane),
    }
}

/// Flat-world plane at camera height.
pub fn coplanar_plane(rig: &CameraRig) -> PlanePatch {
    PlanePatch::ground(Vec3::new(0.0, -1.0, 0.0), -rig.height)
}

/// Metric ground patch for one detection: external prior, then the
/// multiview chain, then the coplanar fallback (mode permitting).
pub fn estimate_local_plane(
    frame: &FrameInput,
    detection: usize,
    config: &PipelineConfig,
) -> Result<(PlanePatch, PlaneSource), PipelineError> {
    let geometry = if frame.corr_prev1.is_some() {
        build_frame_geometry(frame, config).ok()
    } else {
        None
    };
    plane_for_detection(frame, detection, geometry.as_ref(), config)
}

fn plane_for_detection(
    frame: &FrameInput,
    detection: usize,
    geometry: Option<&FrameGeometry>,
    config: &PipelineConfig,
) -> Result<(PlanePatch, PlaneSource), PipelineError> {
    let det = &frame.detections[detection];
    if let Some(prior) = det.plane_prior {
        return Ok((prior, PlaneSource::ExternalPrior));
    }
    if let Some(geom) = geometry {
        if let Ok(plane) = local_plane_from_geometry(geom, &det.bbox, detection, config) {
            return Ok((plane, PlaneSource::Multiview));
        }
    }
    match config.fallback_plane_mode {
        FallbackPlaneMode::Coplanar => Ok((coplanar_plane(&frame.rig), PlaneSource::CoplanarFallback)),
        FallbackPlaneMode::RequireMultiview => Err(PipelineError::PlaneUnavailable {
            detection,
            reason: "multiview chain unavailable and fallback disabled".into(),
        }),
    }
}

/// Orientation whose base normal matches the plane normal, with the given
/// yaw about that normal (yaw 0 faces the camera-forward direction
/// projected into the plane).
pub fn orientation_on_plane(normal: Vec3, yaw: f64) -> Result<Rotation, PipelineError> {
    let fwd = Vec3::new(0.0, 0.0, 1.0);
    let in_plane = fwd - normal * normal.dot(&fwd);
    if in_plane.norm() < 1e-9 {
        return Err(PipelineError::RayParallelToPlane {
            denom: 0.0,
            range: 0.0,
        });
    }
    let f0 = in_plane.normalize();
    let side = normal.cross(&f0);
    let forward = f0 * yaw.cos() + side * yaw.sin();
    let down = -normal;
    let right = down.cross(&forward);
    Ok(Rotation::from_columns(right, down, forward))
}

/// Places a vehicle on its plane from the bbox bottom-center ray: the ray's
/// plane intersection is taken as the nearest base corner, and the state is
/// positioned so the wheel centroid sits on the plane behind it. Evaluates
/// both yaw hypotheses (forward and flipped) by reprojection cost.
pub fn initialize_vehicle(
    detection: &Detection,
    plane: &PlanePatch,
    prior: &ShapePrior,
    rig: &CameraRig,
) -> Result<VehicleState, PipelineError> {
    let bottom_center = Vec2::new(detection.bbox.center().x, detection.bbox.v_max);
    let dir = rig.intr.ray_direction(bottom_center).normalize();
    let denom = plane.normal.dot(&dir);
    if denom.abs() < 1e-6 {
        return Err(PipelineError::RayParallelToPlane {
            denom,
            range: f64::NAN,
        });
    }
    let range = plane.offset / denom;
    if range <= 0.5 {
        return Err(PipelineError::RayParallelToPlane { denom, range });
    }
    let hit = dir * range;

    // In-plane direction pointing away from the camera.
    let g = (dir - plane.normal * denom).normalize();
    let shape = prior.zero_shape();
    let c_obj = prior.wheel_centroid_object(&shape);
    let object_pts = crate::shape_model::deformed_object_points(prior, &shape);

    let observation = Observation {
        keypoints2d: detection.keypoints.clone(),
        confidences: detection.confidences.clone(),
        bbox: detection.bbox,
        intr: rig.intr,
    };

    let mut best: Option<(f64, VehicleState)> = None;
    for yaw in [0.0, std::f64::consts::PI] {
        let rotation = orientation_on_plane(plane.normal, yaw)?;
        // Nearest base-corner offset along g for this heading.
        let m = prior
            .base_indices
            .iter()
            .map(|&b| rotation.rotate(object_pts[b] - c_obj).dot(&g))
            .fold(f64::MAX, f64::min);
        let translation = hit - rotation.rotate(c_obj) - g * m;
        let state = VehicleState {
            rotation,
            translation,
            shape: shape.clone(),
            plane: *plane,
        };
        let cost = match reprojection_residual(prior, &state, &observation) {
            Ok(block) => block.residual.norm_squared(),
            Err(_) => f64::INFINITY,
        };
        if best.as_ref().map_or(true, |(c, _)| cost < *c) {
            best = Some((cost, state));
        }
    }
    let (cost, state) = best.expect("two hypotheses evaluated");
    if !cost.is_finite() {
        return Err(PipelineError::RayParallelToPlane {
            denom,
            range,
        });
    }
    Ok(state)
}

/// Depth heuristic used when the bbox ray misses the plane (the steep-slope
/// failure mode of the flat-world baseline): depth from the prior height
/// over the bbox pixel height, orientation aligned to the plane.
fn initialize_from_bbox_height(
    detection: &Detection,
    plane: &PlanePatch,
    prior: &ShapePrior,
    rig: &CameraRig,
) -> Result<VehicleState, PipelineError> {
    let (_, _, prior_height) = dimensions(&prior.mean);
    let depth = rig.intr.fy * prior_height / detection.bbox.height().max(1.0);
    let center_ray = rig.intr.ray_direction(detection.bbox.center()).normalize();
    let center = center_ray * depth / center_ray.z.max(1e-6);
    let rotation = orientation_on_plane(plane.normal, 0.0)?;
    Ok(VehicleState {
        rotation,
        translation: center,
        shape: prior.zero_shape(),
        plane: *plane,
    })
}

/// Parameter-block handles of one vehicle in the joint problem.
#[derive(Debug, Clone, Copy)]
struct VehicleBlocks {
    rotation: BlockId,
    translation: BlockId,
    shape: BlockId,
    plane_normal: BlockId,
    plane_offset: BlockId,
}

/// Wraps one residual-module term as a solver cost term for one vehicle (or
/// a vehicle pair, for the consistency term).
struct VehicleTerm {
    kind: TermKind,
    vehicles: Vec<usize>,
    blocks: Vec<BlockId>,
    block_refs: Vec<BlockRef>,
    prior: Arc<ShapePrior>,
    weights: EnergyWeights,
    observations: Arc<Vec<Observation>>,
    dim_targets: (f64, f64, f64),
    dim_sigmas: (f64, f64, f64),
    all_blocks: Vec<VehicleBlocks>,
}

impl VehicleTerm {
    fn state_of(&self, vehicle: usize, values: &[BlockValue]) -> VehicleState {
        let vb = &self.all_blocks[vehicle];
        let t = values[vb.translation.0].as_euclidean();
        let lam = values[vb.shape.0].as_euclidean();
        VehicleState {
            rotation: values[vb.rotation.0].as_rotation(),
            translation: Vec3::new(t[0], t[1], t[2]),
            shape: ShapeCoefficients {
                lambda: lam.iter().copied().collect(),
            },
            plane: PlanePatch {
                normal: values[vb.plane_normal.0].as_unit_normal(),
                offset: values[vb.plane_offset.0].as_euclidean()[0],
            },
        }
    }

    fn to_eval(&self, block: ResidualBlock) -> TermEval {
        let rows = block.residual.len();
        let jacobians = self
            .block_refs
            .iter()
            .map(|wanted| {
                block
                    .jacobian(*wanted)
                    .cloned()
                    .unwrap_or_else(|| DMatrix::zeros(rows, block_ref_dim(wanted, &self.prior)))
            })
            .collect();
        let row_deltas = block
            .row_scales
            .iter()
            .map(|s| self.weights.huber_delta(*s))
            .collect();
        TermEval {
            residual: block.residual,
            jacobians,
            row_deltas,
        }
    }
}

fn block_ref_dim(block: &BlockRef, prior: &ShapePrior) -> usize {
    match block {
        BlockRef::Rotation(_) | BlockRef::Translation(_) | BlockRef::PlaneNormal(_) => 3,
        BlockRef::Shape(_) => prior.basis_size(),
        BlockRef::PlaneOffset(_) => 1,
    }
}

impl CostTerm for VehicleTerm {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn eta(&self) -> f64 {
        self.weights.eta(self.kind)
    }

    fn eval(&self, values: &[BlockValue]) -> Result<TermEval, SolveError> {
        let err = |e: String| SolveError::Evaluation(e);
        let block = match self.kind {
            TermKind::Reprojection => {
                let state = self.state_of(self.vehicles[0], values);
                reprojection_residual(&self.prior, &state, &self.observations[self.vehicles[0]])
                    .map_err(|e| err(e.to_string()))?
            }
            TermKind::Ground => {
                let state = self.state_of(self.vehicles[0], values);
                ground_residual(&state, &self.prior).map_err(|e| err(e.to_string()))?
            }
            TermKind::NormalAlignment => {
                let state = self.state_of(self.vehicles[0], values);
                normal_alignment_residual(&state, &self.prior).map_err(|e| err(e.to_string()))?
            }
            TermKind::Disambiguation => {
                let state = self.state_of(self.vehicles[0], values);
                disambiguation_residual_guarded(&state, &self.prior, &self.weights)
                    .map_err(|e| err(e.to_string()))?
            }
            TermKind::BasePoints => {
                let state = self.state_of(self.vehicles[0], values);
                base_points_residual(&self.prior, &state).map_err(|e| err(e.to_string()))?
            }
            TermKind::DimensionRegularizer => {
                let state = self.state_of(self.vehicles[0], values);
                dimension_regularizer(&self.prior, &state, self.dim_targets, self.dim_sigmas)
            }
            TermKind::Consistency => {
                // Evaluated pairwise: vehicles[0], vehicles[1] are the pair;
                // the neighbor graph is fixed at problem construction.
                let a = self.state_of(self.vehicles[0], values);
                let b = self.state_of(self.vehicles[1], values);
                let mut block = consistency_residual(&[a, b], f64::INFINITY);
                // Restrict to the ordered pair (0, 1) rows.
                let rows = 4;
                let residual = DVector::from_fn(rows, |r, _| block.residual[r]);
                for (_, jac) in &mut block.jacobians {
                    *jac = jac.rows(0, rows).into_owned();
                }
                block.residual = residual;
                block.row_scales.truncate(rows);
                block
            }
        };
        // Jacobian lookup stays in vehicle-local refs; the block-id binding
        // to actual vehicles happened at construction.
        Ok(self.to_eval(block))
    }
}

/// Localization output for one vehicle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleResult {
    pub detection_index: usize,
    pub state: VehicleState,
    /// Camera-frame wireframe, exactly `instantiate(prior, state)`.
    pub wireframe: Vec<Vec3>,
    /// Euclidean distance to the object frame origin.
    pub depth_norm: f64,
    /// Forward (Z) depth of the object frame origin.
    pub depth_z: f64,
    pub plane: PlanePatch,
    pub plane_source: PlaneSource,
    pub init_method: InitMethod,
    /// Final weighted robustified cost per energy term.
    pub term_costs: Vec<(TermKind, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlocalizedDetection {
    pub detection_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub frame_id: u64,
    pub vehicles: Vec<VehicleResult>,
    pub unlocalized: Vec<UnlocalizedDetection>,
    pub solve: SolveReport,
    /// Final weighted consistency cost over all neighbor pairs.
    pub consistency_cost: f64,
}

fn observation_of(det: &Detection, rig: &CameraRig) -> Observation {
    Observation {
        keypoints2d: det.keypoints.clone(),
        confidences: det.confidences.clone(),
        bbox: det.bbox,
        intr: rig.intr,
    }
}

/// Localizes every detection in a frame by joint optimization.
pub fn localize_frame(
    frame: &FrameInput,
    prior: &ShapePrior,
    config: &PipelineConfig,
) -> Result<LocalizationResult, PipelineError> {
    if frame.detections.is_empty() {
        return Err(PipelineError::NoDetections);
    }
    let prior = Arc::new(prior.clone());

    // Frame-level multiview products, shared by all detections. Failures
    // leave the chain unavailable and the fallback policy decides.
    let geometry = if config.coplanar_baseline || frame.corr_prev1.is_none() {
        None
    } else {
        build_frame_geometry(frame, config).ok()
    };

    // Plane and initial state per detection.
    let mut initialized: Vec<(usize, VehicleState, PlaneSource, InitMethod)> = Vec::new();
    let mut unlocalized: Vec<UnlocalizedDetection> = Vec::new();
    for (index, det) in frame.detections.iter().enumerate() {
        let visible = det.confidences.iter().filter(|&&c| c > 0.0).count();
        if visible < MIN_VISIBLE_KEYPOINTS {
            unlocalized.push(UnlocalizedDetection {
                detection_index: index,
                reason: PipelineError::TooFewKeypoints {
                    detection: index,
                    visible,
                }
                .to_string(),
            });
            continue;
        }
        let plane_result = if config.coplanar_baseline {
            Ok((coplanar_plane(&frame.rig), PlaneSource::CoplanarFallback))
        } else {
            plane_for_detection(frame, index, geometry.as_ref(), config)
        };
        let (plane, source) = match plane_result {
            Ok(p) => p,
            Err(e) => {
                unlocalized.push(UnlocalizedDetection {
                    detection_index: index,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        match initialize_vehicle(det, &plane, &prior, &frame.rig) {
            Ok(state) => initialized.push((index, state, source, InitMethod::RayPlane)),
            Err(PipelineError::RayParallelToPlane { .. }) => {
                match initialize_from_bbox_height(det, &plane, &prior, &frame.rig) {
                    Ok(state) => initialized.push((index, state, source, InitMethod::BBoxHeight)),
                    Err(e) => unlocalized.push(UnlocalizedDetection {
                        detection_index: index,
                        reason: e.to_string(),
                    }),
                }
            }
            Err(e) => unlocalized.push(UnlocalizedDetection {
                detection_index: index,
                reason: e.to_string(),
            }),
        }
    }

    if initialized.is_empty() {
        return Ok(LocalizationResult {
            frame_id: frame.frame_id,
            vehicles: Vec::new(),
            unlocalized,
            solve: SolveReport {
                phases: Vec::new(),
                initial_cost: 0.0,
                final_cost: 0.0,
            },
            consistency_cost: 0.0,
        });
    }

    // Assemble the joint problem over all initialized vehicles.
    let observations: Arc<Vec<Observation>> = Arc::new(
        initialized
            .iter()
            .map(|(index, _, _, _)| observation_of(&frame.detections[*index], &frame.rig))
            .collect(),
    );
    let dim_targets = dimensions(&prior.mean);
    let mut problem = Problem::new();
    let mut vehicle_blocks: Vec<VehicleBlocks> = Vec::new();
    for (_, state, _, _) in &initialized {
        let rotation = problem.add_block(BlockValue::RotationQuat(state.rotation), BlockRole::Rotation);
        let translation = problem.add_block(
            BlockValue::Euclidean(DVector::from_column_slice(&[
                state.translation.x,
                state.translation.y,
                state.translation.z,
            ])),
            BlockRole::Translation,
        );
        let shape = problem.add_bounded_block(
            BlockValue::Euclidean(DVector::zeros(prior.basis_size())),
            BlockRole::Shape,
            (-prior.lambda_bound, prior.lambda_bound),
        );
        let plane_normal = problem.add_block(
            BlockValue::UnitNormal(state.plane.normal),
            BlockRole::PlaneNormal,
        );
        let plane_offset = problem.add_block(
            BlockValue::Euclidean(DVector::from_element(1, state.plane.offset)),
            BlockRole::PlaneOffset,
        );
        if config.coplanar_baseline {
            problem.freeze_block(plane_normal);
            problem.freeze_block(plane_offset);
        }
        vehicle_blocks.push(VehicleBlocks {
            rotation,
            translation,
            shape,
            plane_normal,
            plane_offset,
        });
    }

    let make_term = |kind: TermKind, vehicles: Vec<usize>, block_refs: Vec<BlockRef>| {
        let blocks = block_refs
            .iter()
            .map(|r| {
                let vb = &vehicle_blocks[vehicles[r.vehicle()]];
                match r {
                    BlockRef::Rotation(_) => vb.rotation,
                    BlockRef::Translation(_) => vb.translation,
                    BlockRef::Shape(_) => vb.shape,
                    BlockRef::PlaneNormal(_) => vb.plane_normal,
                    BlockRef::PlaneOffset(_) => vb.plane_offset,
                }
            })
            .collect();
        Box::new(VehicleTerm {
            kind,
            vehicles,
            blocks,
            block_refs,
            prior: prior.clone(),
            weights: config.weights,
            observations: observations.clone(),
            dim_targets,
            dim_sigmas: config.dim_sigmas,
            all_blocks: vehicle_blocks.clone(),
        })
    };

    for v in 0..initialized.len() {
        use BlockRef::*;
        let single = vec![v];
        problem
            .add_term(make_term(
                TermKind::Reprojection,
                single.clone(),
                vec![Rotation(0), Translation(0), Shape(0)],
            ))
            .map_err(PipelineError::from)?;
        problem
            .add_term(make_term(
                TermKind::Ground,
                single.clone(),
                vec![Rotation(0), Translation(0), Shape(0), PlaneOffset(0)],
            ))
            .map_err(PipelineError::from)?;
        problem
            .add_term(make_term(
                TermKind::NormalAlignment,
                single.clone(),
                vec![Rotation(0), Shape(0), PlaneNormal(0)],
            ))
            .map_err(PipelineError::from)?;
        problem
            .add_term(make_term(
                TermKind::Disambiguation,
                single.clone(),
                vec![Rotation(0), Shape(0), PlaneNormal(0)],
            ))
            .map_err(PipelineError::from)?;
        problem
            .add_term(make_term(
                TermKind::BasePoints,
                single.clone(),
                vec![Rotation(0), Translation(0), Shape(0)],
            ))
            .map_err(PipelineError::from)?;
        problem
            .add_term(make_term(
                TermKind::DimensionRegularizer,
                single,
                vec![Shape(0)],
            ))
            .map_err(PipelineError::from)?;
    }

    // Consistency terms over the neighbor graph fixed at initialization.
    let init_states: Vec<VehicleState> = initialized.iter().map(|(_, s, _, _)| s.clone()).collect();
    for (v, w) in neighbor_pairs(&init_states, config.neighbor_radius) {
        use BlockRef::*;
        problem
            .add_term(make_term(
                TermKind::Consistency,
                vec![v, w],
                vec![PlaneNormal(0), PlaneOffset(0), PlaneNormal(1), PlaneOffset(1)],
            ))
            .map_err(PipelineError::from)?;
    }

    let mut solver_config = config.solver.clone();
    if config.coplanar_baseline {
        solver_config.schedule = coplanar_schedule();
    }
    let solve_report = solve(&mut problem, &solver_config).map_err(PipelineError::from)?;

    // Extract final states and per-term costs.
    let final_states: Vec<VehicleState> = vehicle_blocks
        .iter()
        .map(|vb| {
            let t = problem.block_value(vb.translation).as_euclidean();
            let lam = problem.block_value(vb.shape).as_euclidean();
            VehicleState {
                rotation: problem.block_value(vb.rotation).as_rotation(),
                translation: Vec3::new(t[0], t[1], t[2]),
                shape: ShapeCoefficients {
                    lambda: lam.iter().copied().collect(),
                },
                plane: PlanePatch {
                    normal: problem.block_value(vb.plane_normal).as_unit_normal(),
                    offset: problem.block_value(vb.plane_offset).as_euclidean()[0],
                },
            }
        })
        .collect();

    let mut vehicles = Vec::with_capacity(final_states.len());
    for (slot, state) in final_states.iter().enumerate() {
        let (index, _, source, init_method) = initialized[slot];
        let obs = &observations[slot];
        let mut term_costs = Vec::new();
        let mut push_cost = |block: Result<ResidualBlock, ResidualError>| {
            if let Ok(b) = block {
                let kind = b.term;
                term_costs.push((kind, total_cost(&[b], &config.weights)));
            }
        };
        push_cost(reprojection_residual(&prior, state, obs));
        push_cost(ground_residual(state, &prior));
        push_cost(normal_alignment_residual(state, &prior));
        push_cost(disambiguation_residual_guarded(state, &prior, &config.weights));
        push_cost(base_points_residual(&prior, state));
        push_cost(Ok(dimension_regularizer(
            &prior,
            state,
            dim_targets,
            config.dim_sigmas,
        )));
        vehicles.push(VehicleResult {
            detection_index: index,
            state: state.clone(),
            wireframe: instantiate(&prior, state),
            depth_norm: state.translation.norm(),
            depth_z: state.translation.z,
            plane: state.plane,
            plane_source: source,
            init_method,
            term_costs,
        });
    }
    let consistency_cost = total_cost(
        &[consistency_residual(&final_states, config.neighbor_radius)],
        &config.weights,
    );

    Ok(LocalizationResult {
        frame_id: frame.frame_id,
        vehicles,
        unlocalized,
        solve: solve_report,
        consistency_cost,
    })
}

/// Absolute translational error report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AteReport {
    pub per_vehicle: Vec<(usize, f64)>,
    pub mean: f64,
    pub std_dev: f64,
}

/// Euclidean distance between estimated and ground-truth translations,
/// matched by detection index.
pub fn ate(
    result: &LocalizationResult,
    ground_truth: &[(usize, Vec3)],
) -> Result<AteReport, PipelineError> {
    let mut per_vehicle = Vec::with_capacity(result.vehicles.len());
    for v in &result.vehicles {
        let gt = ground_truth
            .iter()
            .find(|(id, _)| *id == v.detection_index)
            .ok_or_else(|| {
                PipelineError::IdMismatch(format!("no ground truth for vehicle {}", v.detection_index))
            })?;
        per_vehicle.push((v.detection_index, (v.state.translation - gt.1).norm()));
    }
    if per_vehicle.is_empty() {
        return Err(PipelineError::IdMismatch("no localized vehicles".into()));
    }
    let mean = per_vehicle.iter().map(|(_, e)| e).sum::<f64>() / per_vehicle.len() as f64;
    let var = per_vehicle
        .iter()
        .map(|(_, e)| (e - mean) * (e - mean))
        .sum::<f64>()
        / per_vehicle.len() as f64;
    Ok(AteReport {
        per_vehicle,
        mean,
        std_dev: var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_wireframe;
    use crate::shape_model::synthetic_prior;
    use approx::assert_relative_eq;

    fn rig() -> CameraRig {
        CameraRig {
            intr: crate::geometry::CameraIntrinsics::new(700.0, 700.0, 640.0, 480.0).unwrap(),
            height: 1.65,
        }
    }

    /// Detection of a synthetic car resting on a plane, from exact keypoints.
    fn detection_of(prior: &ShapePrior, state: &VehicleState) -> Detection {
        let pts = instantiate(prior, state);
        let pixels = project_wireframe(&pts, &rig().intr).unwrap();
        let (mut umin, mut vmin, mut umax, mut vmax) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &pixels {
            umin = umin.min(p.x);
            vmin = vmin.min(p.y);
            umax = umax.max(p.x);
            vmax = vmax.max(p.y);
        }
        Detection {
            bbox: BBox {
                u_min: umin,
                v_min: vmin,
                u_max: umax,
                v_max: vmax,
            },
            keypoints: pixels,
            confidences: vec![1.0; prior.keypoint_count()],
            plane_prior: None,
        }
    }

    fn flat_state(prior: &ShapePrior, z: f64) -> VehicleState {
        let wheel_y = prior.wheel_centroid_object(&prior.zero_shape()).y;
        VehicleState {
            rotation: Rotation::identity(),
            translation: Vec3::new(0.0, 1.65 - wheel_y, z),
            shape: prior.zero_shape(),
            plane: coplanar_plane(&rig()),
        }
    }

    #[test]
    fn coplanar_fallback_plane_is_flat_world() {
        let plane = coplanar_plane(&rig());
        assert_relative_eq!(plane.normal.y, -1.0);
        assert_relative_eq!(plane.offset, -1.65);
    }

    #[test]
    fn initializer_depth_within_five_percent() {
        let prior = synthetic_prior();
        let truth = flat_state(&prior, 20.0);
        let det = detection_of(&prior, &truth);
        let state = initialize_vehicle(&det, &truth.plane, &prior, &rig()).unwrap();
        let depth_err = (state.translation.z - 20.0).abs() / 20.0;
        assert!(depth_err < 0.05, "depth error {depth_err}");
    }

    #[test]
    fn initializer_base_on_plane() {
        // On a 20 degree uphill patch the initialized base sits on the patch.
        let prior = synthetic_prior();
        let a = 20f64.to_radians();
        let plane = PlanePatch::ground(
            Vec3::new(0.0, -a.cos(), -a.sin()),
            -(a.cos() * 1.65) - a.sin() * 8.0,
        );
        // Build a detection by resting a car on that patch at depth ~14.
        let base_point = {
            // Solve for the surface point at z = 14 on the patch.
            let y = (plane.offset - plane.normal.z * 14.0) / plane.normal.y;
            Vec3::new(0.0, y, 14.0)
        };
        let rot = orientation_on_plane(plane.normal, 0.0).unwrap();
        let c_obj = prior.wheel_centroid_object(&prior.zero_shape());
        let truth = VehicleState {
            rotation: rot,
            translation: base_point - rot.rotate(c_obj),
            shape: prior.zero_shape(),
            plane,
        };
        let det = detection_of(&prior, &truth);
        let state = initialize_vehicle(&det, &plane, &prior, &rig()).unwrap();
        let pts = instantiate(&prior, &state);
        let base = crate::shape_model::base_translation(&state, &prior, &pts);
        assert!(plane.signed_distance(base).abs() < 1e-9);
        // Ground residual at initialization is zero.
        let block = ground_residual(&state, &prior).unwrap();
        assert!(block.residual.amax() < 1e-9);
    }

    #[test]
    fn initializer_detects_parallel_ray() {
        let prior = synthetic_prior();
        // A plane through the camera: every bbox ray is parallel-ish or hits
        // behind; build one whose normal is orthogonal to the bottom ray.
        let det = Detection {
            bbox: BBox {
                u_min: 600.0,
                v_min: 460.0,
                u_max: 680.0,
                v_max: 480.0, // bottom center exactly at the principal point
            },
            keypoints: vec![Vec2::new(640.0, 470.0); prior.keypoint_count()],
            confidences: vec![1.0; prior.keypoint_count()],
            plane_prior: None,
        };
        // Ray through (640, 480) is +Z; a vertical plane normal to Y gives
        // n . dir = 0.
        let plane = PlanePatch {
            normal: Vec3::new(0.0, -1.0, 0.0),
            offset: -1.65,
        };
        let err = initialize_vehicle(&det, &plane, &prior, &rig());
        assert!(matches!(err, Err(PipelineError::RayParallelToPlane { .. })));
    }

    #[test]
    fn external_plane_prior_takes_priority() {
        let prior = synthetic_prior();
        let truth = flat_state(&prior, 15.0);
        let mut det = detection_of(&prior, &truth);
        let custom = PlanePatch::ground(Vec3::new(0.0, -1.0, -0.1), -2.0);
        det.plane_prior = Some(custom);
        let frame = FrameInput {
            frame_id: 0,
            detections: vec![det],
            corr_prev1: None,
            corr_prev2: None,
            rig: rig(),
        };
        let (plane, source) =
            estimate_local_plane(&frame, 0, &PipelineConfig::default()).unwrap();
        assert_eq!(source, PlaneSource::ExternalPrior);
        assert!((plane.normal - custom.normal).norm() < 1e-12);
    }

    #[test]
    fn no_correspondences_coplanar_fallback() {
        let prior = synthetic_prior();
        let truth = flat_state(&prior, 15.0);
        let det = detection_of(&prior, &truth);
        let frame = FrameInput {
            frame_id: 0,
            detections: vec![det],
            corr_prev1: None,
            corr_prev2: None,
            rig: rig(),
        };
        let (plane, source) =
            estimate_local_plane(&frame, 0, &PipelineConfig::default()).unwrap();
        assert_eq!(source, PlaneSource::CoplanarFallback);
        assert_relative_eq!(plane.normal.y, -1.0);
        assert_relative_eq!(plane.offset, -1.65);

        let strict = PipelineConfig {
            fallback_plane_mode: FallbackPlaneMode::RequireMultiview,
            ..Default::default()
        };
        assert!(matches!(
            estimate_local_plane(&frame, 0, &strict),
            Err(PipelineError::PlaneUnavailable { .. })
        ));
    }

    #[test]
    fn localize_single_flat_car_noiseless() {
        let prior = synthetic_prior();
        let truth = flat_state(&prior, 20.0);
        let det = detection_of(&prior, &truth);
        let frame = FrameInput {
            frame_id: 3,
            detections: vec![det],
            corr_prev1: None,
            corr_prev2: None,
            rig: rig(),
        };
        let result = localize_frame(&frame, &prior, &PipelineConfig::default()).unwrap();
        assert_eq!(result.vehicles.len(), 1);
        let err = (result.vehicles[0].state.translation - truth.translation).norm();
        assert!(err < 1e-2, "translation error {err}");
        // Wireframe equals instantiate(prior, state) exactly.
        let expect = instantiate(&prior, &result.vehicles[0].state);
        for (a, b) in result.vehicles[0].wireframe.iter().zip(&expect) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ate_examples() {
        let prior = synthetic_prior();
        let truth = flat_state(&prior, 20.0);
        let det = detection_of(&prior, &truth);
        let frame = FrameInput {
            frame_id: 0,
            detections: vec![det],
            corr_prev1: None,
            corr_prev2: None,
            rig: rig(),
        };
        let result = localize_frame(&frame, &prior, &PipelineConfig::default()).unwrap();
        // Estimate equals truth -> 0 (use the estimate itself as truth).
        let self_truth = vec![(0usize, result.vehicles[0].state.translation)];
        let report = ate(&result, &self_truth).unwrap();
        assert_relative_eq!(report.mean, 0.0);

        // Offset by (0,0,2) -> ATE 2.
        let offset = vec![(0usize, result.vehicles[0].state.translation + Vec3::new(0.0, 0.0, 2.0))];
        let report = ate(&result, &offset).unwrap();
        assert_relative_eq!(report.mean, 2.0, epsilon = 1e-12);

        assert!(matches!(
            ate(&result, &[(5, Vec3::zeros())]),
            Err(PipelineError::IdMismatch(_))
        ));
    }

    #[test]
    fn batch_ate_matches_arithmetic_oracle() {
        let prior = synthetic_prior();
        let mut errors = Vec::new();
        let mut per = Vec::new();
        for i in 0..10 {
            let truth = flat_state(&prior, 12.0 + i as f64);
            let det = detection_of(&prior, &truth);
            let frame = FrameInput {
                frame_id: i,
                detections: vec![det],
                corr_prev1: None,
                corr_prev2: None,
                rig: rig(),
            };
            let result = localize_frame(&frame, &prior, &PipelineConfig::default()).unwrap();
            let report = ate(&result, &[(0, truth.translation)]).unwrap();
            errors.push(report.mean);
            per.push(report);
        }
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        for (e, r) in errors.iter().zip(&per) {
            assert_relative_eq!(*e, r.mean);
        }
        assert!(mean < 0.02);
    }

    #[test]
    fn detection_order_invariance() {
        let prior = synthetic_prior();
        let mut a = flat_state(&prior, 16.0);
        a.translation.x = -2.0;
        let mut b = flat_state(&prior, 18.0);
        b.translation.x = 2.0;
        let da = detection_of(&prior, &a);
        let db = detection_of(&prior, &b);
        let make_frame = |dets: Vec<Detection>| FrameInput {
            frame_id: 0,
            detections: dets,
            corr_prev1: None,
            corr_prev2: None,
            rig: rig(),
        };
        let r1 = localize_frame(&make_frame(vec![da.clone(), db.clone()]), &prior, &PipelineConfig::default())
            .unwrap();
        let r2 = localize_frame(&make_frame(vec![db, da]), &prior, &PipelineConfig::default()).unwrap();
        // Vehicle 0 of r1 corresponds to vehicle 1 of r2.
        let t1 = r1.vehicles[0].state.translation;
        let t2 = r2.vehicles[1].state.translation;
        assert!((t1 - t2).norm() < 1e-6);
        assert!((r1.solve.final_cost - r2.solve.final_cost).abs() < 1e-8);
    }


    #[test]
    fn unlocalized_detection_is_reported_not_dropped() {
        let prior = synthetic_prior();
        let truth = flat_state(&prior, 20.0);
        let good = detection_of(&prior, &truth);
        let bad = Detection {
            bbox: BBox {
                u_min: 10.0,
                v_min: 10.0,
                u_max: 60.0,
                v_max: 40.0,
            },
            keypoints: vec![Vec2::new(30.0, 20.0); prior.keypoint_count()],
            confidences: vec![0.0; prior.keypoint_count()],
            plane_prior: None,
        };
        let frame = FrameInput {
            frame_id: 0,
            detections: vec![good, bad],
            corr_prev1: None,
            corr_prev2: None,
            rig: rig(),
        };
        let result = localize_frame(&frame, &prior, &PipelineConfig::default()).unwrap();
        assert_eq!(result.vehicles.len(), 1);
        assert_eq!(result.unlocalized.len(), 1);
        assert_eq!(result.unlocalized[0].detection_index, 1);
    }
}
