use monoloc::pipeline::*;
use monoloc::shape_model::synthetic_prior;
use monoloc::synthbench::*;

#[test]
#[ignore]
fn diag_joint_degradation() {
    let prior = synthetic_prior();
    let config = PipelineConfig::default();
    for &(angle, depth) in &[(25.0, 35.0), (20.0, 20.0), (15.0, 10.0)] {
        for seed in 0..4u64 {
            let mut spec = SceneSpec::default_scene(&format!("d{depth}a{angle}s{seed}"), seed * 6151 + angle as u64 * 37 + depth as u64);
            spec.profile = RoadProfile::Pitched { angle_deg: angle, z_break: (depth - 3.0f64).max(3.0) };
            spec.vehicles = vec![VehicleSpec { lambda: vec![0.0; 5], yaw_deg: 0.0, lateral_x: 0.0, depth_z: depth }];
            spec.noise = NoiseSpec {
                keypoint_sigma_px: 2.0, keypoint_dropout: 0.3, keypoint_outlier_rate: 0.1,
                corr_sigma_px: 1.0, corr_outlier_rate: 0.0,
            };
            let scene = generate(&spec).unwrap();
            let gt_patch = scene.truth.patches[0];
            let result = localize_frame(&scene.frame, &prior, &config).unwrap();
            if result.vehicles.is_empty() {
                println!("a{angle} d{depth} s{seed}: UNLOCALIZED {:?}", result.unlocalized);
                continue;
            }
            let v = &result.vehicles[0];
            let err = (v.state.translation - scene.truth.states[0].translation).norm();
            let plane_angle = v.plane.normal.dot(&gt_patch.normal).clamp(-1.0,1.0).acos().to_degrees();
            // also initial plane (before solve): re-estimate
            let (init_plane, src) = estimate_local_plane(&scene.frame, 0, &config).unwrap();
            let init_angle = init_plane.normal.dot(&gt_patch.normal).clamp(-1.0,1.0).acos().to_degrees();
            println!(
                "a{angle} d{depth} s{seed}: ate {err:.3} | patch init {init_angle:.2}deg d{:.3} ({src:?}) final {plane_angle:.2}deg d{:.3} | init {:?} vis {}",
                (init_plane.offset - gt_patch.offset).abs(),
                (v.plane.offset - gt_patch.offset).abs(),
                v.init_method,
                scene.frame.detections[0].confidences.iter().filter(|&&c| c > 0.0).count(),
            );
        }
    }
}
