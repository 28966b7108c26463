//! Analytic gradients against central finite differences in 64-bit mode.

mod support;

use support::{check_embeddings, check_parameters, GRAD_TOL};

#[test]
fn every_parameter_matches_finite_differences() {
    let r = check_parameters();
    println!("checked {} parameters, worst relative error {:.3e} at {}", r.checked, r.worst, r.worst_at);
    assert!(r.worst < GRAD_TOL, "worst {:.3e} at {}", r.worst, r.worst_at);
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let worst = check_embeddings(10);
    println!("embedding gradient worst relative error {worst:.3e}");
    assert!(worst < GRAD_TOL);
}
