mod common;

use common::{composite_gradients, gradient_integrity, operation_gradients, GRAD_TOL};

#[test]
fn every_operation_matches_central_differences() {
    for f in operation_gradients(3) {
        assert!(f.worst < GRAD_TOL, "{} worst relative error {:e}", f.name, f.worst);
    }
}

#[test]
fn full_composite_matches_central_differences() {
    let fams = composite_gradients(2);
    assert!(fams.iter().any(|f| f.name == "composite.backbone3d"));
    assert!(fams.iter().any(|f| f.name == "composite.backbone2d"));
    assert!(fams.iter().any(|f| f.name == "composite.cfam"));
    for f in fams {
        assert!(f.worst < GRAD_TOL, "{} worst relative error {:e}", f.name, f.worst);
    }
}

#[test]
fn gradient_integrity_over_a_hundred_instances() {
    let summary = gradient_integrity(2, 1, 100).unwrap();
    println!("{summary}");
}
