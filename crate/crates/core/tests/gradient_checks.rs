mod common;

use common::{central_differences, max_relative_error};
use distildp::distill::{kd_loss_with_grad, KdConfig, KdObjective, SkipPrefix};
use distildp::model::{batch_loss, init_params, per_example_gradients, NextTokenLoss, Objective};
use distildp::{ModelConfig, ParameterSet, PreparedExample};

fn small_config(d_model: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model,
        d_ff: 2 * d_model,
        vocab_size: 13,
        max_seq_len: 10,
    }
}

fn examples() -> Vec<PreparedExample> {
    vec![
        PreparedExample {
            tokens: vec![5, 7, 2, 9, 3, 11, 4, 1],
            boundary: 3,
        },
        PreparedExample {
            tokens: vec![6, 2, 12, 8, 8, 10, 1],
            boundary: 2,
        },
    ]
}

fn check(params: &ParameterSet, objective: &dyn Objective) {
    let batch = examples();
    let grads = per_example_gradients(params, &batch, objective).unwrap();
    for (ex, g) in batch.iter().zip(&grads) {
        let single = std::slice::from_ref(ex);
        let fd = central_differences(&params.values, 1e-4, |x| {
            let p = ParameterSet {
                config: params.config,
                values: x.to_vec(),
            };
            batch_loss(&p, single, objective).unwrap()
        });
        let err = max_relative_error(&g.grad, &fd, 1e-6);
        assert!(err <= 1e-4, "max relative error {err}");
    }
}

#[test]
fn next_token_gradient_matches_finite_differences() {
    let params = init_params(small_config(8), 11).unwrap();
    assert!(params.total_count() <= 10_000);
    check(&params, &NextTokenLoss);
}

#[test]
fn distillation_gradient_matches_finite_differences() {
    let teacher = init_params(small_config(8), 5).unwrap();
    let student = init_params(small_config(8), 6).unwrap();
    for (lambda, temperature, alpha) in [(0.4, 1.0, 0.0), (0.7, 2.5, 0.4), (1.0, 0.5, 0.0)] {
        let config = KdConfig {
            lambda,
            temperature,
            alpha,
            ..KdConfig::default()
        };
        check(
            &student,
            &KdObjective {
                teacher: &teacher,
                config: &config,
            },
        );
    }
}

#[test]
fn kd_loss_gradient_wrt_student_logits_matches_finite_differences() {
    let v = 7;
    let rows = 5;
    let teacher: Vec<f64> = (0..rows * v)
        .map(|i| (i as f64 * 0.37).cos() * 2.0)
        .collect();
    let student: Vec<f64> = (0..rows * v)
        .map(|i| (i as f64 * 0.91).sin() * 1.5)
        .collect();
    let targets = [1, 4, 0, 6, 2];
    let mask = [0.0, 1.0, 1.0, 0.0, 1.0];
    for (lambda, t) in [(0.0, 1.0), (0.4, 1.0), (0.4, 3.0), (1.0, 0.7)] {
        let config = KdConfig {
            lambda,
            temperature: t,
            skip_prefix: SkipPrefix::ControlCode,
            ..KdConfig::default()
        };
        let (_, grad) =
            kd_loss_with_grad(Some(&teacher), &student, v, &targets, &mask, &config).unwrap();
        let fd = central_differences(&student, 1e-4, |z| {
            kd_loss_with_grad(Some(&teacher), z, v, &targets, &mask, &config)
                .unwrap()
                .0
                .total
        });
        let err = max_relative_error(&grad, &fd, 1e-6);
        assert!(err <= 1e-4, "λ={lambda} t={t}: {err}");
    }
}
