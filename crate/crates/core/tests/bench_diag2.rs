use monoloc::pipeline::PipelineConfig;
use monoloc::shape_model::synthetic_prior;
use monoloc::synthbench::{catastrophe_suite, run_benchmark, sloped_suite, VariantSpec};

#[test]
#[ignore]
fn diag_sloped_suite() {
    let prior = synthetic_prior();
    let config = PipelineConfig::default();
    let suite = sloped_suite(5);
    let report = run_benchmark(
        &suite,
        &[VariantSpec::joint(), VariantSpec::coplanar()],
        &prior,
        &config,
    )
    .unwrap();
    println!("{}", report.render_table());
    for v in &report.summary {
        for b in &v.buckets {
            println!("{} {}: mean {:.3} n {}", v.variant, b.label, b.mean, b.count);
        }
    }
    for r in report.rows.iter().filter(|r| r.failure.is_some()) {
        println!("failure: {} {} {:?}", r.scene_id, r.variant, r.failure);
    }
}

#[test]
#[ignore]
fn diag_catastrophe() {
    let prior = synthetic_prior();
    let config = PipelineConfig::default();
    for angle in [5.0, 10.0, 15.0, 20.0, 25.0] {
        let suite = catastrophe_suite(&[angle], 40.0, 4);
        let report = run_benchmark(
            &suite,
            &[VariantSpec::joint(), VariantSpec::coplanar()],
            &prior,
            &config,
        )
        .unwrap();
        let joint = &report.summary[0].buckets[0];
        let base = &report.summary[1].buckets[0];
        let failures = report.rows.iter().filter(|r| r.failure.is_some()).count();
        println!(
            "angle {angle:>4}: joint {:.3} (n {})  coplanar {:.3} (n {})  failures {}",
            joint.mean, joint.count, base.mean, base.count, failures
        );
    }
}
