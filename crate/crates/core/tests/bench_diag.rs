use monoloc::pipeline::PipelineConfig;
use monoloc::shape_model::synthetic_prior;
use monoloc::synthbench::{default_suite, run_benchmark, VariantSpec};

#[test]
#[ignore]
fn diag_default_suite() {
    let prior = synthetic_prior();
    let config = PipelineConfig::default();
    let suite = default_suite();
    let report = run_benchmark(
        &suite,
        &[VariantSpec::joint(), VariantSpec::coplanar()],
        &prior,
        &config,
    )
    .unwrap();
    println!("{}", report.render_table());
    let mut worst: Vec<(&str, f64)> = report
        .rows
        .iter()
        .filter(|r| r.variant == "joint")
        .flat_map(|r| r.vehicle_errors.iter().map(move |(_, e, _)| (r.scene_id.as_str(), *e)))
        .collect();
    worst.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for (id, e) in worst.iter().take(12) {
        println!("worst joint: {id} {e:.4}");
    }
    for r in report.rows.iter().filter(|r| r.failure.is_some()) {
        println!("failure: {} {} {:?}", r.scene_id, r.variant, r.failure);
    }
}
