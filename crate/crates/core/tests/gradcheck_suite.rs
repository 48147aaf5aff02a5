use finenet_core::checks::gradcheck_suite;

#[test]
fn every_operation_passes_at_step_1e3() {
    let suite = gradcheck_suite(1e-3, 1e-4);
    for c in &suite {
        println!("{:<16} max relative error {:.3e}", c.op, c.report.max_rel_error());
    }
    for c in &suite {
        assert!(c.passed(), "{}: {:?}", c.op, c.report);
        assert!(c.report.entries.iter().all(|e| e.elements > 0));
    }
}
