mod common;

use common::{oracle_calibrate, oracle_epsilon, quad_rdp};
use distildp::accountant::{calibrate_sigma, epsilon_for, rdp_step, DEFAULT_ORDERS};
use distildp::PrivacyBudget;

#[test]
fn quadrature_oracle_recovers_the_full_batch_closed_form() {
    for (sigma, alpha) in [(1.0, 2.0), (0.7, 5.0), (2.0, 16.0), (1.3, 1.5)] {
        let exact = alpha / (2.0 * sigma * sigma);
        let quad = quad_rdp(1.0, sigma, alpha);
        assert!(
            (quad - exact).abs() <= 1e-9 * exact,
            "σ={sigma} α={alpha}: {quad} vs {exact}"
        );
    }
}

#[test]
fn rdp_step_matches_quadrature_at_the_reference_point() {
    let rdp = rdp_step(0.01, 1.0, &[16.0]).unwrap()[0];
    let oracle = quad_rdp(0.01, 1.0, 16.0);
    assert!((rdp - oracle).abs() <= 1e-6 * oracle, "{rdp} vs {oracle}");
}

#[test]
fn rdp_step_matches_quadrature_across_orders() {
    for (q, sigma) in [(0.01, 1.0), (0.05, 1.1), (0.2, 2.0), (0.001, 0.8)] {
        let rdp = rdp_step(q, sigma, &DEFAULT_ORDERS).unwrap();
        for (&a, &r) in DEFAULT_ORDERS.iter().zip(&rdp) {
            let oracle = quad_rdp(q, sigma, a);
            assert!(
                (r - oracle).abs() <= 1e-6 * oracle.abs().max(1e-300),
                "q={q} σ={sigma} α={a}: {r} vs {oracle}"
            );
        }
    }
}

#[test]
fn epsilon_matches_quadrature_at_the_reference_point() {
    let eps = epsilon_for(0.05, 1.0, 500, 1e-4).unwrap();
    let oracle = oracle_epsilon(0.05, 1.0, 500, 1e-4);
    assert!((eps - oracle).abs() <= 0.02 * oracle, "{eps} vs {oracle}");
}

#[test]
fn calibration_matches_the_oracle_bisection() {
    let budget = PrivacyBudget::new(2.0, 1.0 / 2000.0).unwrap();
    let sigma = calibrate_sigma(budget, 0.05, 600).unwrap();
    let oracle = oracle_calibrate(2.0, 1.0 / 2000.0, 0.05, 600);
    assert!(
        (sigma - oracle).abs() <= 0.02 * oracle,
        "{sigma} vs {oracle}"
    );
}
