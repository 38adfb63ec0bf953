mod common;

use common::gradient_case;

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..12 {
        let case = gradient_case(seed, 1e-4, 1e-5, 1e-8);
        assert!(case.checked > 0);
        assert!(
            case.failures.is_empty(),
            "seed {seed} ({}x{}x{}, n={}): {:?}",
            case.width,
            case.height,
            case.channels,
            case.n,
            &case.failures[..case.failures.len().min(5)]
        );
    }
}

#[test]
fn mse_gradient_matches_central_differences() {
    for seed in 0..20 {
        common::mse_gradient_ok(seed).unwrap();
    }
}
