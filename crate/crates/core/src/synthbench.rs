//! Synthetic scene generator and benchmark harness: parameterized road
//! surfaces, vehicle placement, noisy keypoint projection, correspondence
//! synthesis, and bucketed ATE reporting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, PlanePatch, Vec2, Vec3};
use crate::multiview::{CameraRig, CorrespondenceSet, PointLabel, PointMatch};
use crate::pipeline::{
    ate, localize_frame, orientation_on_plane, Detection, FrameInput, PipelineConfig,
    PipelineError,
};
use crate::residuals::BBox;
use crate::shape_model::{
    deformed_object_points, instantiate, ShapeCoefficients, ShapePrior, VehicleState,
    KEYPOINT_COUNT,
};

/// Maximum road grade the generator accepts by default.
pub const MAX_SLOPE_DEG: f64 = 25.0;

#[derive(Debug, Error, Clone)]
pub enum SynthbenchError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// One road segment starting at `z_start` with constant pitch and bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub z_start: f64,
    pub pitch_deg: f64,
    pub bank_deg: f64,
}

/// Road surface profile ahead of the camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoadProfile {
    Flat,
    Pitched { angle_deg: f64, z_break: f64 },
    Banked { angle_deg: f64, z_break: f64 },
    Piecewise { segments: Vec<Segment> },
}

impl RoadProfile {
    fn segments(&self) -> Vec<Segment> {
        match self {
            RoadProfile::Flat => vec![Segment {
                z_start: 0.0,
                pitch_deg: 0.0,
                bank_deg: 0.0,
            }],
            RoadProfile::Pitched { angle_deg, z_break } => vec![
                Segment {
                    z_start: 0.0,
                    pitch_deg: 0.0,
                    bank_deg: 0.0,
                },
                Segment {
                    z_start: *z_break,
                    pitch_deg: *angle_deg,
                    bank_deg: 0.0,
                },
            ],
            RoadProfile::Banked { angle_deg, z_break } => vec![
                Segment {
                    z_start: 0.0,
                    pitch_deg: 0.0,
                    bank_deg: 0.0,
                },
                Segment {
                    z_start: *z_break,
                    pitch_deg: 0.0,
                    bank_deg: *angle_deg,
                },
            ],
            RoadProfile::Piecewise { segments } => segments.clone(),
        }
    }

    pub fn max_slope_deg(&self) -> f64 {
        self.segments()
            .iter()
            .map(|s| s.pitch_deg.abs().max(s.bank_deg.abs()))
            .fold(0.0, f64::max)
    }
}

/// Piecewise-planar road surface with height continuity along x = 0.
#[derive(Debug, Clone)]
pub struct RoadSurface {
    /// Per segment: geometry plus its plane patch.
    patches: Vec<(Segment, PlanePatch)>,
}

impl RoadSurface {
    pub fn new(profile: &RoadProfile, camera_height: f64) -> Self {
        let segments = profile.segments();
        let mut patches: Vec<(Segment, PlanePatch)> = Vec::with_capacity(segments.len());
        let mut anchor = Vec3::new(0.0, camera_height, 0.0);
        for (i, seg) in segments.iter().enumerate() {
            let theta = seg.pitch_deg.to_radians();
            let phi = seg.bank_deg.to_radians();
            // Up-normal after pitching about X then banking about Z.
            let normal = Vec3::new(
                phi.sin() * theta.cos(),
                -phi.cos() * theta.cos(),
                -theta.sin(),
            );
            anchor.z = seg.z_start;
            if i > 0 {
                // Continuity at x = 0: anchor height from the previous patch.
                let prev = &patches[i - 1].1;
                anchor.y = (prev.offset - prev.normal.z * seg.z_start) / prev.normal.y;
            }
            let patch = PlanePatch::ground(normal, normal.dot(&anchor));
            patches.push((*seg, patch));
        }
        RoadSurface { patches }
    }

    /// Plane patch of the segment containing depth z.
    pub fn patch_at(&self, z: f64) -> PlanePatch {
        let mut current = self.patches[0].1;
        for (seg, patch) in &self.patches {
            if z >= seg.z_start {
                current = *patch;
            }
        }
        current
    }

    /// Surface point at lateral offset x and depth z.
    pub fn surface_point(&self, x: f64, z: f64) -> Vec3 {
        let patch = self.patch_at(z);
        let y = (patch.offset - patch.normal.x * x - patch.normal.z * z) / patch.normal.y;
        Vec3::new(x, y, z)
    }
}

/// Ground-truth vehicle placement request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub lambda: Vec<f64>,
    pub yaw_deg: f64,
    pub lateral_x: f64,
    pub depth_z: f64,
}

/// Noise model; standard-normal draws are made unconditionally and scaled,
/// so a fixed seed yields coupled noise across sigma levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub keypoint_sigma_px: f64,
    pub keypoint_dropout: f64,
    /// Fraction of visible keypoints replaced by uniform draws in the bbox.
    pub keypoint_outlier_rate: f64,
    pub corr_sigma_px: f64,
    /// Fraction of matches whose second pixel is replaced uniformly.
    pub corr_outlier_rate: f64,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        NoiseSpec {
            keypoint_sigma_px: 0.0,
            keypoint_dropout: 0.0,
            keypoint_outlier_rate: 0.0,
            corr_sigma_px: 0.0,
            corr_outlier_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub profile: RoadProfile,
    pub vehicles: Vec<VehicleSpec>,
    pub rig: CameraRig,
    pub image_width: f64,
    pub image_height: f64,
    /// Ego translation per frame step, meters.
    pub baseline_m: f64,
    pub noise: NoiseSpec,
    pub road_point_count: usize,
    pub non_road_point_count: usize,
    pub near_road_per_vehicle: usize,
    pub seed: u64,
    /// Emit the ground-truth patch as an external plane prior per detection.
    pub supply_plane_prior: bool,
    /// Permit grades beyond the default cap.
    pub allow_steep: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthbenchError> {
        if !self.allow_steep && self.profile.max_slope_deg() > MAX_SLOPE_DEG + 1e-9 {
            return Err(SynthbenchError::InvalidSpec(format!(
                "slope {}° exceeds {MAX_SLOPE_DEG}°",
                self.profile.max_slope_deg()
            )));
        }
        if self.vehicles.is_empty() {
            return Err(SynthbenchError::InvalidSpec("no vehicles".into()));
        }
        for v in &self.vehicles {
            if v.depth_z <= 0.0 {
                return Err(SynthbenchError::InvalidSpec(format!(
                    "vehicle depth {} must be positive",
                    v.depth_z
                )));
            }
        }
        if self.baseline_m <= 0.0 {
            return Err(SynthbenchError::InvalidSpec("baseline must be positive".into()));
        }
        Ok(())
    }

    pub fn default_scene(id: &str, seed: u64) -> SceneSpec {
        SceneSpec {
            id: id.to_string(),
            profile: RoadProfile::Flat,
            vehicles: vec![VehicleSpec {
                lambda: vec![0.0; 5],
                yaw_deg: 0.0,
                lateral_x: 0.0,
                depth_z: 20.0,
            }],
            rig: CameraRig {
                intr: CameraIntrinsics::new(700.0, 700.0, 640.0, 480.0).unwrap(),
                height: 1.65,
            },
            image_width: 1280.0,
            image_height: 960.0,
            baseline_m: 1.0,
            noise: NoiseSpec::noiseless(),
            road_point_count: 160,
            non_road_point_count: 90,
            near_road_per_vehicle: 50,
            seed,
            supply_plane_prior: false,
            allow_steep: false,
        }
    }
}

/// Ground truth accompanying a generated frame.
#[derive(Debug, Clone)]
pub struct SceneTruth {
    pub states: Vec<VehicleState>,
    pub patches: Vec<PlanePatch>,
    /// Camera centers of f1, f2, f3 in the f1 frame.
    pub camera_centers: [Vec3; 3],
    /// Metric road points (f1 frame) used for correspondences.
    pub road_points: Vec<Vec3>,
}

#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub spec: SceneSpec,
    pub frame: FrameInput,
    pub truth: SceneTruth,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; draws two uniforms unconditionally.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Back-face visibility: a keypoint faces the camera when its outward
/// direction (from the wireframe centroid) does not align with the viewing
/// ray. The slack keeps silhouette keypoints visible.
fn keypoint_visible(outward_cam: Vec3, point_cam: Vec3) -> bool {
    outward_cam.dot(&point_cam.normalize()) < 0.3
}

/// Deterministic scene synthesis: places vehicles with their base planes in
/// the road patches, projects exact keypoints, synthesizes correspondences
/// over a three-pose trajectory, and applies seeded noise.
pub fn generate(spec: &SceneSpec) -> Result<GeneratedScene, SynthbenchError> {
    spec.validate()?;
    let prior = crate::shape_model::synthetic_prior();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let surface = RoadSurface::new(&spec.profile, spec.rig.height);
    let intr = spec.rig.intr;
    let in_image =
        |p: Vec2| p.x >= 0.0 && p.x <= spec.image_width && p.y >= 0.0 && p.y <= spec.image_height;

    // Vehicle placement: base plane inside the patch plane.
    let mut states = Vec::new();
    let mut patches = Vec::new();
    for v in &spec.vehicles {
        let patch = surface.patch_at(v.depth_z);
        let base_point = surface.surface_point(v.lateral_x, v.depth_z);
        let rotation = orientation_on_plane(patch.normal, v.yaw_deg.to_radians())
            .map_err(SynthbenchError::from)?;
        let shape = ShapeCoefficients {
            lambda: v.lambda.clone(),
        };
        let wheel_centroid = prior.wheel_centroid_object(&shape);
        let translation = base_point - rotation.rotate(wheel_centroid);
        states.push(VehicleState {
            rotation,
            translation,
            shape,
            plane: patch,
        });
        patches.push(patch);
    }

    // Detections: project, drop back-facing keypoints, apply noise.
    let mut detections = Vec::new();
    for state in &states {
        let object_pts = deformed_object_points(&prior, &state.shape);
        let cam_pts = instantiate(&prior, state);
        let mut pixels = vec![Vec2::zeros(); KEYPOINT_COUNT];
        let mut confidences = vec![0.0; KEYPOINT_COUNT];
        let mut clean_visible: Vec<(usize, Vec2)> = Vec::new();
        for i in 0..KEYPOINT_COUNT {
            let outward = state.rotation.rotate(object_pts[i].normalize());
            if cam_pts[i].z <= 0.5 {
                continue;
            }
            let Ok(pixel) = project(cam_pts[i], &intr) else {
                continue;
            };
            if !in_image(pixel) || !keypoint_visible(outward, cam_pts[i]) {
                continue;
            }
            clean_visible.push((i, pixel));
        }
        // Noise draws are unconditional so sigma scaling shares the stream.
        let mut noisy: Vec<(usize, Vec2)> = Vec::new();
        for (i, pixel) in &clean_visible {
            let n = Vec2::new(standard_normal(&mut rng), standard_normal(&mut rng));
            let dropped = rng.gen_range(0.0..1.0) < spec.noise.keypoint_dropout;
            if !dropped {
                noisy.push((*i, pixel + n * spec.noise.keypoint_sigma_px));
            }
        }
        // Bounding box over the noisy visible keypoints.
        let mut bbox = BBox {
            u_min: f64::MAX,
            v_min: f64::MAX,
            u_max: f64::MIN,
            v_max: f64::MIN,
        };
        for (_, p) in &noisy {
            bbox.u_min = bbox.u_min.min(p.x);
            bbox.v_min = bbox.v_min.min(p.y);
            bbox.u_max = bbox.u_max.max(p.x);
            bbox.v_max = bbox.v_max.max(p.y);
        }
        // Outliers: uniform in the bbox.
        for (i, p) in &noisy {
            let is_outlier = rng.gen_range(0.0..1.0) < spec.noise.keypoint_outlier_rate;
            let u = rng.gen_range(0.0..1.0);
            let v = rng.gen_range(0.0..1.0);
            let placed = if is_outlier {
                Vec2::new(
                    bbox.u_min + u * (bbox.u_max - bbox.u_min),
                    bbox.v_min + v * (bbox.v_max - bbox.v_min),
                )
            } else {
                *p
            };
            pixels[*i] = placed;
            confidences[*i] = 1.0;
        }
        detections.push(Detection {
            bbox,
            keypoints: pixels,
            confidences,
            plane_prior: if spec.supply_plane_prior {
                Some(state.plane)
            } else {
                None
            },
        });
    }

    // World points for correspondences.
    let max_depth = spec
        .vehicles
        .iter()
        .map(|v| v.depth_z)
        .fold(0.0, f64::max);
    let mut world: Vec<(Vec3, PointLabel)> = Vec::new();
    for _ in 0..spec.road_point_count {
        let x = rng.gen_range(-7.0..7.0);
        let z = rng.gen_range(3.0..(max_depth + 12.0));
        world.push((surface.surface_point(x, z), PointLabel::Road));
    }
    // Dense coverage right in front of the ego camera (scale anchor)...
    for _ in 0..30 {
        let x = rng.gen_range(-6.0..6.0);
        let z = rng.gen_range(3.0..10.0);
        world.push((surface.surface_point(x, z), PointLabel::Road));
    }
    // ... and around every vehicle (local patch evidence), biased forward so
    // the samples stay on the vehicle's own patch near a grade break.
    for v in &spec.vehicles {
        for _ in 0..spec.near_road_per_vehicle {
            let x = v.lateral_x + rng.gen_range(-4.0..4.0);
            let z = v.depth_z + rng.gen_range(-2.0..5.0);
            world.push((surface.surface_point(x, z.max(2.0)), PointLabel::Road));
        }
    }
    for _ in 0..spec.non_road_point_count {
        let x = rng.gen_range(-12.0..12.0);
        let z = rng.gen_range(5.0..(max_depth + 12.0));
        let lift = rng.gen_range(1.5..6.0);
        let mut p = surface.surface_point(x, z);
        p.y -= lift;
        world.push((p, PointLabel::NonRoad));
    }

    // Trajectory: f1 at origin, f2 and f3 behind by one and two baselines.
    let c2 = Vec3::new(0.0, 0.0, -spec.baseline_m);
    let c3 = Vec3::new(0.0, 0.0, -2.0 * spec.baseline_m);

    let mut m12 = Vec::new();
    let mut m23 = Vec::new();
    for (p, label) in &world {
        let in_f1 = *p;
        let in_f2 = p - c2;
        let in_f3 = p - c3;
        let jitter = |rng: &mut ChaCha8Rng| {
            Vec2::new(standard_normal(rng), standard_normal(rng)) * spec.noise.corr_sigma_px
        };
        let (p1, p2, p3) = (
            project(in_f1, &intr),
            project(in_f2, &intr),
            project(in_f3, &intr),
        );
        let j1 = jitter(&mut rng);
        let j2 = jitter(&mut rng);
        let j3 = jitter(&mut rng);
        let out12: f64 = rng.gen_range(0.0..1.0);
        let out23: f64 = rng.gen_range(0.0..1.0);
        let ou = Vec2::new(
            rng.gen_range(0.0..spec.image_width),
            rng.gen_range(0.0..spec.image_height),
        );
        let ou2 = Vec2::new(
            rng.gen_range(0.0..spec.image_width),
            rng.gen_range(0.0..spec.image_height),
        );
        let (Ok(p1), Ok(p2), Ok(p3)) = (p1, p2, p3) else {
            continue;
        };
        let p1n = p1 + j1;
        let p2n = p2 + j2; // shared by both correspondence sets
        let p3n = p3 + j3;
        if in_f1.z > 0.5 && in_f2.z > 0.5 && in_image(p1) && in_image(p2) {
            let b = if out12 < spec.noise.corr_outlier_rate {
                ou
            } else {
                p2n
            };
            m12.push(PointMatch {
                a: p1n,
                b,
                label: *label,
            });
        }
        if in_f2.z > 0.5 && in_f3.z > 0.5 && in_image(p2) && in_image(p3) {
            let b = if out23 < spec.noise.corr_outlier_rate {
                ou2
            } else {
                p3n
            };
            m23.push(PointMatch {
                a: p2n,
                b,
                label: *label,
            });
        }
    }

    let frame = FrameInput {
        frame_id: 2,
        detections,
        corr_prev1: Some(CorrespondenceSet {
            frame_a: 2,
            frame_b: 1,
            matches: m12,
        }),
        corr_prev2: Some(CorrespondenceSet {
            frame_a: 1,
            frame_b: 0,
            matches: m23,
        }),
        rig: spec.rig,
    };

    Ok(GeneratedScene {
        spec: spec.clone(),
        frame,
        truth: SceneTruth {
            states,
            patches,
            camera_centers: [Vec3::zeros(), c2, c3],
            road_points: world
                .iter()
                .filter(|(_, l)| *l == PointLabel::Road)
                .map(|(p, _)| *p)
                .collect(),
        },
    })
}

/// A random shape prior for derivative fuzzing: arbitrary mean geometry and
/// a dense orthonormal basis that moves every keypoint, wheels included.
pub fn random_prior(seed: u64, basis_size: usize) -> ShapePrior {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean: Vec<Vec3> = Vec::with_capacity(KEYPOINT_COUNT);
    // Wheels first: a jittered rectangle, guaranteed non-collinear.
    for (sx, sz) in [(-1.0, 1.0), (1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
        mean.push(Vec3::new(
            sx * 0.8 + rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            sz * 1.4 + rng.gen_range(-0.1..0.1),
        ));
    }
    for _ in 4..KEYPOINT_COUNT {
        mean.push(Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.5..0.2),
            rng.gen_range(-2.2..2.2),
        ));
    }
    let centroid = mean.iter().fold(Vec3::zeros(), |a, p| a + p) / KEYPOINT_COUNT as f64;
    for p in &mut mean {
        *p -= centroid;
    }
    let mut basis = Vec::with_capacity(basis_size);
    for _ in 0..basis_size {
        let col: Vec<Vec3> = (0..KEYPOINT_COUNT)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        basis.push(col);
    }
    // Gram-Schmidt under the 3K inner product.
    let mut ortho: Vec<Vec<Vec3>> = Vec::with_capacity(basis_size);
    for mut col in basis {
        for prev in &ortho {
            let dot: f64 = col.iter().zip(prev).map(|(a, b)| a.dot(b)).sum();
            for (c, p) in col.iter_mut().zip(prev) {
                *c -= p * dot;
            }
        }
        let norm: f64 = col.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        for c in &mut col {
            *c /= norm;
        }
        ortho.push(col);
    }
    let prior = ShapePrior {
        names: (0..KEYPOINT_COUNT).map(|i| format!("kp_{i:02}")).collect(),
        mean,
        basis: ortho,
        base_indices: (0..8).collect(),
        wheel_indices: [0, 1, 2, 3],
        lambda_bound: 3.0,
    };
    prior.validate().expect("random prior invariants");
    prior
}

/// One benchmark variant: a named pipeline configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub coplanar_baseline: bool,
}

impl VariantSpec {
    pub fn joint() -> Self {
        VariantSpec {
            name: "joint".into(),
            coplanar_baseline: false,
        }
    }

    pub fn coplanar() -> Self {
        VariantSpec {
            name: "coplanar".into(),
            coplanar_baseline: true,
        }
    }
}

/// Depth buckets mirroring the evaluation tables: overall plus cumulative
/// <=15 m, <=30 m and the > 30 m tail, by ground-truth forward depth.
pub const BUCKET_LABELS: [&str; 4] = ["overall", "<=15m", "<=30m", ">30m"];

pub fn bucket_of(depth: f64) -> [bool; 4] {
    [true, depth <= 15.0, depth <= 30.0, depth > 30.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub scene_id: String,
    pub variant: String,
    /// Per vehicle: detection index, translational error, ground-truth depth.
    pub vehicle_errors: Vec<(usize, f64, f64)>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketStats {
    pub label: String,
    pub count: usize,
    pub mean: f64,
    pub std_dev: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub buckets: Vec<BucketStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<SceneOutcome>,
    pub summary: Vec<VariantSummary>,
}

impl BenchReport {
    /// Aligned human-readable table of the per-variant bucket means.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12}{:>14}{:>14}{:>14}{:>14}\n",
            "variant", "overall", "<=15m", "<=30m", ">30m"
        ));
        for v in &self.summary {
            out.push_str(&format!("{:<12}", v.variant));
            for b in &v.buckets {
                if b.count == 0 {
                    out.push_str(&format!("{:>14}", "-"));
                } else {
                    out.push_str(&format!("{:>14}", format!("{:.3} ({:.3})", b.mean, b.std_dev)));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every scene under every variant and aggregates bucketed ATE.
pub fn run_benchmark(
    suite: &[SceneSpec],
    variants: &[VariantSpec],
    prior: &ShapePrior,
    base_config: &PipelineConfig,
) -> Result<BenchReport, SynthbenchError> {
    let mut rows = Vec::new();
    for spec in suite {
        let scene = generate(spec)?;
        for variant in variants {
            let mut config = base_config.clone();
            config.coplanar_baseline = variant.coplanar_baseline;
            let outcome = run_scene(&scene, variant, prior, &config);
            rows.push(outcome);
        }
    }
    let summary = summarize(&rows, variants);
    Ok(BenchReport { rows, summary })
}

/// Localizes one generated scene under one variant.
pub fn run_scene(
    scene: &GeneratedScene,
    variant: &VariantSpec,
    prior: &ShapePrior,
    config: &PipelineConfig,
) -> SceneOutcome {
    match localize_frame(&scene.frame, prior, config) {
        Ok(result) => {
            let gt: Vec<(usize, Vec3)> = scene
                .truth
                .states
                .iter()
                .enumerate()
                .map(|(i, s)| (i, s.translation))
                .collect();
            match ate(&result, &gt) {
                Ok(report) => SceneOutcome {
                    scene_id: scene.spec.id.clone(),
                    variant: variant.name.clone(),
                    vehicle_errors: report
                        .per_vehicle
                        .iter()
                        .map(|(id, err)| (*id, *err, scene.truth.states[*id].translation.z))
                        .collect(),
                    failure: None,
                },
                Err(e) => SceneOutcome {
                    scene_id: scene.spec.id.clone(),
                    variant: variant.name.clone(),
                    vehicle_errors: Vec::new(),
                    failure: Some(e.to_string()),
                },
            }
        }
        Err(e) => SceneOutcome {
            scene_id: scene.spec.id.clone(),
            variant: variant.name.clone(),
            vehicle_errors: Vec::new(),
            failure: Some(e.to_string()),
        },
    }
}

pub fn summarize(rows: &[SceneOutcome], variants: &[VariantSpec]) -> Vec<VariantSummary> {
    variants
        .iter()
        .map(|variant| {
            let mut buckets = Vec::new();
            for (b, label) in BUCKET_LABELS.iter().enumerate() {
                let errors: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.variant == variant.name)
                    .flat_map(|r| r.vehicle_errors.iter())
                    .filter(|(_, _, depth)| bucket_of(*depth)[b])
                    .map(|(_, err, _)| *err)
                    .collect();
                let count = errors.len();
                let mean = if count == 0 {
                    0.0
                } else {
                    errors.iter().sum::<f64>() / count as f64
                };
                let var = if count == 0 {
                    0.0
                } else {
                    errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / count as f64
                };
                buckets.push(BucketStats {
                    label: label.to_string(),
                    count,
                    mean,
                    std_dev: var.sqrt(),
                });
            }
            VariantSummary {
                variant: variant.name.clone(),
                buckets,
            }
        })
        .collect()
}

/// The 100-scene default suite: five profiles, five depths, four seeds,
/// noiseless.
pub fn default_suite() -> Vec<SceneSpec> {
    suite_with_seeds(4)
}

pub fn suite_with_seeds(seed_count: u64) -> Vec<SceneSpec> {
    let mut suite = Vec::new();
    let depths: [f64; 5] = [8.0, 12.0, 18.0, 25.0, 35.0];
    let yaws = [0.0, 30.0, 180.0, -45.0, 90.0];
    for (pi, profile_name) in ["flat", "pitch8", "pitch15", "bank10", "piecewise"]
        .iter()
        .enumerate()
    {
        for (di, &depth) in depths.iter().enumerate() {
            for seed in 0..seed_count {
                let z_break = (depth - 6.0).max(4.0);
                let profile = match pi {
                    0 => RoadProfile::Flat,
                    1 => RoadProfile::Pitched {
                        angle_deg: 8.0,
                        z_break,
                    },
                    2 => RoadProfile::Pitched {
                        angle_deg: 15.0,
                        z_break,
                    },
                    3 => RoadProfile::Banked {
                        angle_deg: 10.0,
                        z_break,
                    },
                    _ => RoadProfile::Piecewise {
                        segments: vec![
                            Segment {
                                z_start: 0.0,
                                pitch_deg: 0.0,
                                bank_deg: 0.0,
                            },
                            Segment {
                                z_start: (z_break - 2.0).max(3.0),
                                pitch_deg: 10.0,
                                bank_deg: 0.0,
                            },
                            Segment {
                                z_start: z_break,
                                pitch_deg: 20.0,
                                bank_deg: 0.0,
                            },
                        ],
                    },
                };
                let mut spec = SceneSpec::default_scene(
                    &format!("{profile_name}_d{depth:.0}_s{seed}"),
                    seed * 7919 + (pi as u64) * 131 + di as u64,
                );
                spec.profile = profile;
                spec.vehicles = vec![VehicleSpec {
                    lambda: vec![0.0; 5],
                    yaw_deg: yaws[di],
                    lateral_x: if pi == 3 { 1.5 } else { 0.0 },
                    depth_z: depth,
                }];
                // Two-vehicle flat scenes exercise the consistency coupling.
                if pi == 0 && di == 2 {
                    spec.vehicles.push(VehicleSpec {
                        lambda: vec![0.0; 5],
                        yaw_deg: 0.0,
                        lateral_x: 4.0,
                        depth_z: depth + 1.0,
                    });
                }
                suite.push(spec);
            }
        }
    }
    suite
}

/// Sloped ablation suite: pitch 10-25 degrees, sigma = 2 px keypoints.
pub fn sloped_suite(seed_count: u64) -> Vec<SceneSpec> {
    let mut suite = Vec::new();
    for &angle in &[10.0f64, 15.0, 20.0, 25.0] {
        for &depth in &[10.0f64, 20.0, 35.0] {
            for seed in 0..seed_count {
                let mut spec = SceneSpec::default_scene(
                    &format!("slope{angle:.0}_d{depth:.0}_s{seed}"),
                    seed * 6151 + angle as u64 * 37 + depth as u64,
                );
                spec.profile = RoadProfile::Pitched {
                    angle_deg: angle,
                    z_break: (depth - 3.0).max(3.0),
                };
                spec.vehicles = vec![VehicleSpec {
                    lambda: vec![0.0; 5],
                    yaw_deg: 0.0,
                    lateral_x: 0.0,
                    depth_z: depth,
                }];
                spec.noise = NoiseSpec {
                    keypoint_sigma_px: 2.0,
                    keypoint_dropout: 0.0,
                    keypoint_outlier_rate: 0.0,
                    corr_sigma_px: 1.0,
                    corr_outlier_rate: 0.0,
                };
                suite.push(spec);
            }
        }
    }
    suite
}

/// Slope-catastrophe suite: one depth, increasing grade.
pub fn catastrophe_suite(angles_deg: &[f64], depth: f64, seed_count: u64) -> Vec<SceneSpec> {
    let mut suite = Vec::new();
    for &angle in angles_deg {
        for seed in 0..seed_count {
            let mut spec = SceneSpec::default_scene(
                &format!("cat{angle:.0}_d{depth:.0}_s{seed}"),
                seed * 4447 + angle as u64,
            );
            spec.profile = RoadProfile::Pitched {
                angle_deg: angle,
                z_break: depth - 3.0,
            };
            spec.vehicles = vec![VehicleSpec {
                lambda: vec![0.0; 5],
                yaw_deg: 0.0,
                lateral_x: 0.0,
                depth_z: depth,
            }];
            spec.noise = NoiseSpec {
                keypoint_sigma_px: 1.0,
                keypoint_dropout: 0.0,
                keypoint_outlier_rate: 0.0,
                corr_sigma_px: 0.5,
                corr_outlier_rate: 0.0,
            };
            suite.push(spec);
        }
    }
    suite
}
