use monoloc::multiview::*;
use monoloc::pipeline::*;
use monoloc::synthbench::*;

#[test]
#[ignore]
fn diag_third_view() {
    let config = PipelineConfig::default();
    let mut spec = SceneSpec::default_scene("d35a25", 1 * 6151 + 25 * 37 + 35);
    spec.profile = RoadProfile::Pitched { angle_deg: 25.0, z_break: 32.0 };
    spec.vehicles = vec![VehicleSpec { lambda: vec![0.0; 5], yaw_deg: 0.0, lateral_x: 0.0, depth_z: 35.0 }];
    spec.noise = NoiseSpec { keypoint_sigma_px: 2.0, keypoint_dropout: 0.3, keypoint_outlier_rate: 0.1, corr_sigma_px: 1.0, corr_outlier_rate: 0.0 };
    let scene = generate(&spec).unwrap();
    let corr12 = scene.frame.corr_prev1.as_ref().unwrap();
    let corr23 = scene.frame.corr_prev2.as_ref().unwrap();
    println!("corr12 {} matches, corr23 {}", corr12.matches.len(), corr23.matches.len());
    let mut recon = build_two_view(corr12, &scene.frame.rig.intr, &config.multiview).unwrap();
    println!("two view points: {}", recon.points.len());
    let r = add_third_view(corr23, &mut recon, &scene.frame.rig.intr, &config.multiview);
    println!("third view: {:?}", r.map(|_| recon.points.len()));
    let geom = build_frame_geometry(&scene.frame, &config).unwrap();
    println!("geom scale {} third {}", geom.scale, geom.used_third_view);
    // how noisy is the near-car cloud vs the GT patch?
    let gt = scene.truth.patches[0];
    let near: Vec<_> = geom.road_points.iter().filter(|(_, p)| (p.z - 35.0).abs() < 6.0).collect();
    let mut dists: Vec<f64> = near.iter().map(|(_, p)| gt.signed_distance(*p).abs()).collect();
    dists.sort_by(|a,b| a.partial_cmp(b).unwrap());
    println!("near-car pts {} | dist to GT patch: med {:.3} p90 {:.3}", near.len(), dists[dists.len()/2], dists[dists.len()*9/10]);
}
