mod common;

use common::{primitive_suite, student_grad_error};

#[test]
fn every_primitive_matches_central_differences() {
    for (name, err) in primitive_suite(10) {
        assert!(err <= 1e-6, "{name}: {err:e}");
    }
}

#[test]
fn full_student_loss_matches_central_differences() {
    for alpha in [1.0, 0.7, 0.0] {
        let err = student_grad_error(alpha);
        assert!(err <= 1e-3, "alpha {alpha}: {err:e}");
    }
}
