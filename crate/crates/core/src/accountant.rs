//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step RDP follows the log-domain series for the subsampled Gaussian
//! (integer orders by binomial expansion, fractional orders by the two-sided
//! erfc series). Steps compose additively per order, and the ledger converts
//! to `(ε, δ)` with the tight conversion
//! `ε = rdp + ln((α−1)/α) − (ln δ + ln α)/(α−1)`, minimized over orders.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// RDP orders tracked by default; dense at low orders.
pub const DEFAULT_ORDERS: [f64; 15] = [
    1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0,
];

pub const CALIBRATION_SIGMA_MIN: f64 = 0.3;
pub const CALIBRATION_SIGMA_MAX: f64 = 50.0;
pub const CALIBRATION_TOLERANCE: f64 = 1e-3;
/// Calibrated ε must land in `[target·(1 − slack), target]`.
pub const CALIBRATION_SLACK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::config(
                "epsilon",
                format!("must be positive and finite, got {epsilon}"),
            ));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config(
                "delta",
                format!("must lie in (0, 1), got {delta}"),
            ));
        }
        Ok(PrivacyBudget { epsilon, delta })
    }

    /// `δ = 1/n` for a dataset of `n` records.
    pub fn for_dataset(epsilon: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("delta", "δ = 1/N needs at least two records"));
        }
        Self::new(epsilon, 1.0 / n as f64)
    }

    pub fn halved(&self) -> Self {
        PrivacyBudget {
            epsilon: self.epsilon / 2.0,
            delta: self.delta / 2.0,
        }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if b >= a {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln erfc(x)`, accurate in the far right tail.
fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        statrs::function::erf::erfc(x).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2);
        -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
    }
}

fn log_a_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let a = alpha as f64;
    let mut log_a = f64::NEG_INFINITY;
    let mut log_binom = 0.0;
    for i in 0..=alpha {
        let fi = i as f64;
        if i > 0 {
            log_binom += (a - fi + 1.0).ln() - fi.ln();
        }
        let term = log_binom + fi * lq + (a - fi) * l1q + (fi * fi - fi) / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    log_a
}

fn log_a_fractional(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2s = std::f64::consts::SQRT_2 * sigma;
    let mut log_a0 = f64::NEG_INFINITY;
    let mut log_a1 = f64::NEG_INFINITY;
    let mut coef = 1.0f64;
    let mut i = 0u64;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let log_coef = coef.abs().ln();
        let log_t0 = log_coef + fi * lq + j * l1q;
        let log_t1 = log_coef + j * lq + fi * l1q;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / sqrt2s);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / sqrt2s);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if coef > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 || i > 10_000 {
            break;
        }
        coef *= (alpha - fi) / (fi + 1.0);
        i += 1;
    }
    log_add(log_a0, log_a1)
}

fn rdp_at_order(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_integer(q, sigma, alpha as u64)
    } else {
        log_a_fractional(q, sigma, alpha)
    };
    (log_a / (alpha - 1.0)).max(0.0)
}

fn check_orders(orders: &[f64]) -> Result<()> {
    if orders.is_empty() || orders.iter().any(|&a| !(a > 1.0 && a.is_finite())) {
        return Err(Error::InvalidArgument(
            "RDP orders must be finite and > 1".into(),
        ));
    }
    Ok(())
}

/// RDP of one step of the subsampled Gaussian mechanism with sampling rate
/// `q` and noise multiplier `sigma`, at each order. `sigma = 0` yields
/// `f64::INFINITY` at every order: the mechanism offers no privacy.
pub fn rdp_step(q: f64, sigma: f64, orders: &[f64]) -> Result<Vec<f64>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sampling rate {q} outside (0, 1]"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise multiplier {sigma} must be finite and non-negative"
        )));
    }
    check_orders(orders)?;
    if sigma == 0.0 {
        return Ok(vec![f64::INFINITY; orders.len()]);
    }
    Ok(orders.iter().map(|&a| rdp_at_order(q, sigma, a)).collect())
}

/// Converts an RDP curve to the smallest ε at `delta`. Returns `(ε, order)`.
pub fn rdp_to_epsilon(orders: &[f64], rdp: &[f64], delta: f64) -> (f64, f64) {
    let mut best = (f64::INFINITY, orders[0]);
    for (&a, &r) in orders.iter().zip(rdp) {
        let eps = epsilon_at_order(a, r, delta);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    best
}

/// The tight per-order conversion, clamped at zero.
pub fn epsilon_at_order(alpha: f64, rdp: f64, delta: f64) -> f64 {
    if !rdp.is_finite() {
        return f64::INFINITY;
    }
    let eps = rdp + ((alpha - 1.0) / alpha).ln() - (delta.ln() + alpha.ln()) / (alpha - 1.0);
    eps.max(0.0)
}

/// The classical conversion `ε = rdp + ln(1/δ)/(α−1)`; an upper bound on the
/// tight one.
pub fn classical_epsilon_at_order(alpha: f64, rdp: f64, delta: f64) -> f64 {
    rdp + (1.0 / delta).ln() / (alpha - 1.0)
}

/// Running RDP totals for one budget-consuming phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub target: PrivacyBudget,
    pub orders: Vec<f64>,
    pub accumulated_rdp: Vec<f64>,
    pub steps_recorded: u64,
}

impl PrivacyLedger {
    pub fn new(target: PrivacyBudget) -> Self {
        Self::with_orders(target, DEFAULT_ORDERS.to_vec()).expect("default orders are valid")
    }

    pub fn with_orders(target: PrivacyBudget, orders: Vec<f64>) -> Result<Self> {
        check_orders(&orders)?;
        Ok(PrivacyLedger {
            target,
            accumulated_rdp: vec![0.0; orders.len()],
            orders,
            steps_recorded: 0,
        })
    }

    /// Adds `n_steps · step_rdp` to every order.
    pub fn compose(&mut self, step_rdp: &[f64], n_steps: u64) -> Result<()> {
        if step_rdp.len() != self.orders.len() {
            return Err(Error::InvalidArgument(format!(
                "RDP curve has {} orders, ledger tracks {}",
                step_rdp.len(),
                self.orders.len()
            )));
        }
        if step_rdp.iter().any(|r| r.is_nan() || *r < 0.0) {
            return Err(Error::InvalidArgument(
                "step RDP must be non-negative".into(),
            ));
        }
        if n_steps == 0 {
            return Ok(());
        }
        for (acc, r) in self.accumulated_rdp.iter_mut().zip(step_rdp) {
            *acc += n_steps as f64 * r;
        }
        self.steps_recorded += n_steps;
        Ok(())
    }

    /// ε spent at the ledger's own δ, zero before any step.
    pub fn spent_epsilon(&self) -> f64 {
        if self.steps_recorded == 0 {
            return 0.0;
        }
        rdp_to_epsilon(&self.orders, &self.accumulated_rdp, self.target.delta).0
    }
}

/// Functional form of [`PrivacyLedger::compose`].
pub fn compose(ledger: &PrivacyLedger, step_rdp: &[f64], n_steps: u64) -> Result<PrivacyLedger> {
    let mut next = ledger.clone();
    next.compose(step_rdp, n_steps)?;
    Ok(next)
}

/// Smallest ε over the ledger's orders at `delta`, with the minimizing order.
pub fn epsilon_at(ledger: &PrivacyLedger, delta: f64) -> Result<(f64, f64)> {
    if ledger.steps_recorded == 0 {
        return Err(Error::InvalidArgument(
            "ledger has no recorded steps".into(),
        ));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "δ = {delta} outside (0, 1)"
        )));
    }
    Ok(rdp_to_epsilon(
        &ledger.orders,
        &ledger.accumulated_rdp,
        delta,
    ))
}

/// ε after `n_steps` of the subsampled Gaussian at `(q, sigma)`.
pub fn epsilon_for(q: f64, sigma: f64, n_steps: u64, delta: f64) -> Result<f64> {
    if n_steps == 0 {
        return Ok(0.0);
    }
    let step = rdp_step(q, sigma, &DEFAULT_ORDERS)?;
    let total: Vec<f64> = step.iter().map(|r| r * n_steps as f64).collect();
    Ok(rdp_to_epsilon(&DEFAULT_ORDERS, &total, delta).0)
}

/// Bisection for the noise multiplier whose ε after `n_steps` lands within
/// 1% below `target.epsilon`. Returns the (larger, hence safe) upper end.
pub fn calibrate_sigma(target: PrivacyBudget, q: f64, n_steps: u64) -> Result<f64> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument(
            "cannot calibrate for zero steps".into(),
        ));
    }
    let eps = |s: f64| epsilon_for(q, s, n_steps, target.delta);
    let unreachable = Error::CalibrationUnreachable {
        epsilon: target.epsilon,
        delta: target.delta,
        lo: CALIBRATION_SIGMA_MIN,
        hi: CALIBRATION_SIGMA_MAX,
    };
    let (mut lo, mut hi) = (CALIBRATION_SIGMA_MIN, CALIBRATION_SIGMA_MAX);
    if eps(hi)? > target.epsilon {
        return Err(unreachable);
    }
    let floor = target.epsilon * (1.0 - CALIBRATION_SLACK);
    if eps(lo)? <= target.epsilon {
        // Even the smallest noise in the bracket fits the budget.
        return if eps(lo)? >= floor {
            Ok(lo)
        } else {
            Err(unreachable)
        };
    }
    for _ in 0..200 {
        if hi - lo <= CALIBRATION_TOLERANCE && eps(hi)? >= floor {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if eps(mid)? > target.epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_is_plain_gaussian() {
        for &sigma in &[0.5, 1.0, 3.7] {
            let r = rdp_step(1.0, sigma, &DEFAULT_ORDERS).unwrap();
            for (a, v) in DEFAULT_ORDERS.iter().zip(r) {
                assert!((v - a / (2.0 * sigma * sigma)).abs() <= 1e-12);
            }
        }
        assert_eq!(rdp_step(1.0, 1.0, &[2.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_noise_means_no_privacy() {
        let r = rdp_step(0.1, 0.0, &DEFAULT_ORDERS).unwrap();
        assert!(r.iter().all(|v| v.is_infinite()));
        assert!(rdp_step(0.0, 1.0, &DEFAULT_ORDERS).is_err());
        assert!(rdp_step(0.5, 1.0, &[1.0]).is_err());
    }

    #[test]
    fn rdp_shrinks_with_sampling_rate() {
        let qs = [0.5, 0.1, 0.01, 0.001, 1e-5];
        let curves: Vec<Vec<f64>> = qs
            .iter()
            .map(|&q| rdp_step(q, 1.0, &DEFAULT_ORDERS).unwrap())
            .collect();
        for w in curves.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                assert!(b < a || (*a == 0.0 && *b == 0.0), "{a} -> {b}");
            }
        }
        assert!(curves.last().unwrap()[..8].iter().all(|&v| v < 1e-8));
    }

    #[test]
    fn fractional_and_integer_orders_interleave() {
        let r = rdp_step(0.05, 1.1, &DEFAULT_ORDERS).unwrap();
        for w in r.windows(2) {
            assert!(w[0] <= w[1] + 1e-15, "{r:?}");
        }
    }

    #[test]
    fn compose_is_additive() {
        let budget = PrivacyBudget::new(1.0, 1e-5).unwrap();
        let step = rdp_step(0.02, 1.0, &DEFAULT_ORDERS).unwrap();
        let once = compose(&PrivacyLedger::new(budget), &step, 10).unwrap();
        let mut many = PrivacyLedger::new(budget);
        for _ in 0..10 {
            many.compose(&step, 1).unwrap();
        }
        assert_eq!(once.steps_recorded, many.steps_recorded);
        for (a, b) in once.accumulated_rdp.iter().zip(&many.accumulated_rdp) {
            assert!((a - b).abs() <= 1e-12 * a.abs());
        }
        let unchanged = compose(&once, &step, 0).unwrap();
        assert_eq!(unchanged, once);
        let more = compose(&once, &step, 1).unwrap();
        assert!(more
            .accumulated_rdp
            .iter()
            .zip(&once.accumulated_rdp)
            .all(|(a, b)| a > b));
        assert!(compose(&once, &step[..3], 1).is_err());
    }

    #[test]
    fn epsilon_monotonicity() {
        let budget = PrivacyBudget::new(1.0, 1e-5).unwrap();
        let step = rdp_step(0.05, 1.0, &DEFAULT_ORDERS).unwrap();
        let l1 = compose(&PrivacyLedger::new(budget), &step, 100).unwrap();
        let l2 = compose(&l1, &step, 100).unwrap();
        let (e1, _) = epsilon_at(&l1, 1e-5).unwrap();
        let (e2, _) = epsilon_at(&l2, 1e-5).unwrap();
        assert!(e2 > e1);
        let (e_loose, _) = epsilon_at(&l1, 1e-3).unwrap();
        assert!(e_loose <= e1);
        assert!(epsilon_at(&PrivacyLedger::new(budget), 1e-5).is_err());
    }

    #[test]
    fn tight_conversion_beats_classical() {
        let step = rdp_step(0.05, 1.0, &DEFAULT_ORDERS).unwrap();
        for (a, r) in DEFAULT_ORDERS.iter().zip(&step) {
            let r = r * 300.0;
            assert!(epsilon_at_order(*a, r, 1e-5) <= classical_epsilon_at_order(*a, r, 1e-5));
        }
    }

    #[test]
    fn calibration_round_trip() {
        let target = PrivacyBudget::new(2.0, 1.0 / 2000.0).unwrap();
        let sigma = calibrate_sigma(target, 0.05, 600).unwrap();
        let eps = epsilon_for(0.05, sigma, 600, target.delta).unwrap();
        assert!((2.0 * 0.99..=2.0).contains(&eps), "ε = {eps}");
        let halved =
            calibrate_sigma(PrivacyBudget::new(1.0, target.delta).unwrap(), 0.05, 600).unwrap();
        assert!(halved > sigma);
    }

    #[test]
    fn calibration_unreachable() {
        let target = PrivacyBudget::new(1e-4, 1e-5).unwrap();
        assert!(matches!(
            calibrate_sigma(target, 1.0, 10_000),
            Err(Error::CalibrationUnreachable { .. })
        ));
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(0.0, 1e-5).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert_eq!(
            PrivacyBudget::for_dataset(2.0, 2000).unwrap().delta,
            1.0 / 2000.0
        );
    }
}
