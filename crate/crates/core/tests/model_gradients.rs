//! Central finite-difference checks through whole towers, heads and losses.

mod support;

#[test]
fn every_model_matches_finite_differences() {
    let suite = support::gradients::model_suite();
    for o in &suite.outcomes {
        println!("{:<24} {:.3e}", o.name, o.max_rel_err);
    }
    let failures = suite.failures();
    assert!(failures.is_empty(), "{failures:#?}");
}
