use distildp::accountant::PrivacyBudget;
use distildp::dpsgd::{clip_gradient, dp_sgd_step, l2_norm, train_dp};
use distildp::model::{batch_gradient, init_params, per_example_gradients, NextTokenLoss};
use distildp::rng::rng_from_seed;
use distildp::{DpSgdConfig, Error, ModelConfig, PreparedExample, PrivacyLedger};
use proptest::prelude::*;

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 12,
        max_seq_len: 10,
    }
}

fn data() -> Vec<PreparedExample> {
    (0..6)
        .map(|i| {
            let mut tokens: Vec<u32> = (0..(5 + i % 4))
                .map(|t| ((t * 5 + i * 3) % 9 + 3) as u32)
                .collect();
            tokens[1] = 2;
            PreparedExample {
                tokens,
                boundary: 2,
            }
        })
        .collect()
}

#[test]
fn noiseless_unclipped_dp_sgd_is_plain_sgd() {
    let batch = data();
    let lr = 0.3;
    let mut dp = init_params(config(), 4).unwrap();
    let mut plain = dp.clone();
    let mut rng = rng_from_seed(0);
    for _ in 0..50 {
        let largest = per_example_gradients(&dp, &batch, &NextTokenLoss)
            .unwrap()
            .iter()
            .map(|g| l2_norm(&g.grad))
            .fold(0.0, f64::max);
        let clip = 10.0 * largest + 1.0;
        dp_sgd_step(
            &mut dp,
            &batch,
            &NextTokenLoss,
            clip,
            0.0,
            lr,
            batch.len() as f64,
            &mut rng,
        )
        .unwrap();
        let (_, g) = batch_gradient(&plain, &batch, &NextTokenLoss).unwrap();
        for (p, gi) in plain.values.iter_mut().zip(&g) {
            *p -= lr * gi;
        }
    }
    let worst = dp
        .values
        .iter()
        .zip(&plain.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-12, "max coordinate difference {worst}");
}

#[test]
fn training_stops_before_overspending() {
    let budget = PrivacyBudget::new(0.5, 1e-3).unwrap();
    let mut ledger = PrivacyLedger::new(budget);
    let cfg = DpSgdConfig {
        clip_norm: 1.0,
        noise_multiplier: Some(0.6),
        sampling_rate: 0.5,
        epochs: 20.0,
        learning_rate: 0.1,
    };
    let init = init_params(config(), 1).unwrap();
    let err = train_dp(
        init,
        &data(),
        &NextTokenLoss,
        &cfg,
        &mut ledger,
        &mut rng_from_seed(3),
    )
    .unwrap_err();
    let Error::BudgetExhausted { step, .. } = err else {
        panic!("unexpected error {err}")
    };
    assert_eq!(ledger.steps_recorded, step as u64);
    assert!(ledger.spent_epsilon() <= budget.epsilon + 1e-6);
}

#[test]
fn dp_training_respects_the_clip_bound_and_the_ledger() {
    let budget = PrivacyBudget::new(20.0, 1e-3).unwrap();
    let mut ledger = PrivacyLedger::new(budget);
    let cfg = DpSgdConfig {
        clip_norm: 0.05,
        noise_multiplier: Some(1.0),
        sampling_rate: 0.5,
        epochs: 5.0,
        learning_rate: 0.5,
    };
    let report = train_dp(
        init_params(config(), 2).unwrap(),
        &data(),
        &NextTokenLoss,
        &cfg,
        &mut ledger,
        &mut rng_from_seed(8),
    )
    .unwrap();
    assert_eq!(report.steps, 10);
    assert!(report
        .history
        .iter()
        .all(|s| s.max_clipped_norm <= cfg.clip_norm + 1e-9));
    assert!(report.epsilon_curve.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(report.spent_epsilon, ledger.spent_epsilon());
}

proptest! {
    #[test]
    fn clipping_bounds_norm_and_keeps_direction(g in prop::collection::vec(-5.0f64..5.0, 1..40), c in 0.01f64..10.0) {
        let clipped = clip_gradient(&g, c);
        let (n0, n1) = (l2_norm(&g), l2_norm(&clipped));
        prop_assert!(n1 <= c + 1e-9);
        if n0 <= c {
            prop_assert_eq!(&clipped, &g);
        } else {
            for (a, b) in g.iter().zip(&clipped) {
                prop_assert!((a * n1 - b * n0).abs() <= 1e-9 * n0 * n1.max(1.0));
            }
        }
    }
}
