use evctx_core::gradcheck::run_suite;

#[test]
fn every_op_and_the_composed_model_pass() {
    for seed in 0..3 {
        let entries = run_suite(seed, 1e-3, 1e-4).unwrap();
        assert!(entries.len() > 40);
        for e in &entries {
            assert!(e.report.passed, "{} seed {}: {:?}", e.name, e.seed, e.report);
        }
    }
}

#[test]
fn suite_is_deterministic() {
    assert_eq!(run_suite(5, 1e-3, 1e-4).unwrap(), run_suite(5, 1e-3, 1e-4).unwrap());
}
