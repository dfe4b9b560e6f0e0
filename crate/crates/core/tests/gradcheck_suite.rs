use std::time::Instant;

use hime_core::training::{gradcheck::corrupted_conv2d_check, run_suite, GradOp};

#[test]
fn every_operator_matches_finite_differences() {
    let start = Instant::now();
    let reports = run_suite().unwrap();
    assert_eq!(reports.len(), GradOp::ALL.len());
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    for r in &reports {
        println!("{r}");
    }
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(start.elapsed().as_secs() < 60, "suite took {:?}", start.elapsed());
}

#[test]
fn corrupted_gradient_is_caught() {
    assert!(corrupted_conv2d_check(1.0).unwrap().passed());
    let bad = corrupted_conv2d_check(1.01).unwrap();
    assert!(!bad.passed());
    assert!(bad.max_rel_err() > 1e-3);
}
