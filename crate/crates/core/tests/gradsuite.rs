use gaitgl::gradsuite::{run_suite, CHECKS, DEFAULT_EPS, DEFAULT_TOL};

#[test]
fn every_check_passes() {
    let results = run_suite(None, DEFAULT_EPS, DEFAULT_TOL, None).unwrap();
    assert_eq!(results.len(), CHECKS.len());
    for r in &results {
        assert!(r.passed, "{}: {:?}", r.name, r.report);
        assert!(r.report.coordinates > 0, "{}", r.name);
    }
}

#[test]
fn broken_backward_rule_is_caught() {
    let results = run_suite(Some("gem"), DEFAULT_EPS, DEFAULT_TOL, Some("gem")).unwrap();
    assert_eq!(results.len(), 1);
    assert!(!results[0].passed);
}

#[test]
fn gem_check_covers_exponent() {
    let results = run_suite(Some("gem"), DEFAULT_EPS, DEFAULT_TOL, None).unwrap();
    // 2x3x4x5 inputs plus the learnable exponent
    assert_eq!(results[0].report.coordinates, 2 * 3 * 4 * 5 + 1);
    assert!(results[0].passed);
}

#[test]
fn unknown_filter_is_a_config_error() {
    assert!(run_suite(Some("nonsense"), DEFAULT_EPS, DEFAULT_TOL, None).is_err());
}

// The fixtures are chosen so the default step never crosses a non-smooth point;
// a much smaller step must agree far more tightly, whatever the fixture.
#[test]
fn small_step_agrees_tightly() {
    for r in run_suite(None, 1e-6, 1e-6, None).unwrap() {
        assert!(r.passed, "{}: {:?}", r.name, r.report);
    }
}
