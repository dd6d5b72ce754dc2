//! Finite-difference verification of every differentiable op kind:
//! 20 random instances per op, central differences with h = 1e-5,
//! worst error below 1e-6.

use std::time::Instant;

use metaopt_core::check;

#[test]
fn all_ops_match_central_finite_differences() {
    let started = Instant::now();
    let results = check::gradcheck_all_ops(0x5eed, 20, 1e-5).expect("gradcheck harness failed");
    assert!(results.len() >= 20, "expected every op kind covered");
    for r in &results {
        assert!(
            r.max_err < 1e-6,
            "op {} exceeded tolerance: max err {:.3e}",
            r.op,
            r.max_err
        );
    }
    assert!(
        started.elapsed().as_secs() < 60,
        "gradient checks took too long: {:?}",
        started.elapsed()
    );
}

#[test]
fn meta_gradient_matches_frozen_input_finite_differences() {
    // A 3-step unroll on the 2-parameter quadratic: the tape's first-order
    // gradient w.r.t. the shared update-rule weights against central
    // differences of the frozen-gradient-sequence objective.
    let worst = check::meta_gradient_check(0xfeed, 3, 1e-5).expect("meta gradcheck harness");
    assert!(worst < 1e-4, "max rel err {worst:.3e}");
}

#[test]
fn stop_gradient_confines_theta_gradient_to_the_update_path() {
    // With a zero projection the update is identically zero, so theta never
    // moves and the only path from the meta-loss to the initial parameters
    // is the direct one: d/d(theta) sum_t loss(theta_0) = steps * 2 (theta - c).
    // Any leak through the stopped gradient inputs would break this equality.
    use metaopt_core::lstm::LstmPhi;
    let phi = LstmPhi::init(4); // projection zero by construction
    let theta0 = [0.3, -0.1];
    let steps = 3;
    let run = check::run_toy_unroll(&phi, &theta0, steps, None).expect("toy run");
    let expect = [
        steps as f64 * 2.0 * (theta0[0] - 0.7),
        steps as f64 * 2.0 * (theta0[1] + 0.4),
    ];
    for (g, w) in run.theta_grad.data().iter().zip(expect) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}
