//! Test oracles that share no code with the library: numerical integration
//! of the subsampled-Gaussian Rényi moment, and central finite differences.

#![allow(dead_code)]

use distildp::accountant::DEFAULT_ORDERS;

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln E_{z~N(0,σ²)}[((1−q) + q·exp((2z−1)/(2σ²)))^α]` by the trapezoid rule
/// on a grid wide enough to hold both the origin and the shifted peak at
/// `z = α`.
pub fn quad_log_moment(q: f64, sigma: f64, alpha: f64) -> f64 {
    let lo = -14.0 * sigma - 1.0;
    let hi = alpha + 14.0 * sigma + 1.0;
    let h = sigma / 400.0;
    let n = ((hi - lo) / h).ceil() as usize;
    let h = (hi - lo) / n as f64;
    let (lq, l1q) = (q.ln(), (1.0 - q).ln());
    let s2 = sigma * sigma;
    let log_density =
        |z: f64| -z * z / (2.0 * s2) - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let log_f = |z: f64| {
        let inner = if q == 1.0 {
            (2.0 * z - 1.0) / (2.0 * s2)
        } else {
            log_add_exp(l1q, lq + (2.0 * z - 1.0) / (2.0 * s2))
        };
        log_density(z) + alpha * inner
    };
    let values: Vec<f64> = (0..=n).map(|i| log_f(lo + i as f64 * h)).collect();
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values
        .iter()
        .enumerate()
        .map(|(i, v)| if i == 0 || i == n { 0.5 } else { 1.0 } * (v - m).exp())
        .sum();
    m + (sum * h).ln()
}

pub fn quad_rdp(q: f64, sigma: f64, alpha: f64) -> f64 {
    quad_log_moment(q, sigma, alpha) / (alpha - 1.0)
}

pub fn oracle_epsilon(q: f64, sigma: f64, steps: u64, delta: f64) -> f64 {
    DEFAULT_ORDERS
        .iter()
        .map(|&a| {
            let rdp = steps as f64 * quad_rdp(q, sigma, a);
            let eps = rdp + ((a - 1.0) / a).ln() - (delta.ln() + a.ln()) / (a - 1.0);
            eps.max(0.0)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Bisection for the smallest noise multiplier meeting `epsilon`.
pub fn oracle_calibrate(epsilon: f64, delta: f64, q: f64, steps: u64) -> f64 {
    let (mut lo, mut hi) = (0.3, 50.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if oracle_epsilon(q, mid, steps, delta) > epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Fourth-order central differences of `f` at `x` along every coordinate.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut at = |offset: f64| {
                probe[i] = orig + offset;
                f(&probe)
            };
            let d = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            probe[i] = orig;
            d
        })
        .collect()
}

/// Largest `|a − b| / max(|a|, |b|, scale_floor)`. The floor keeps
/// coordinates whose true derivative is near zero from being judged against
/// the differencing round-off alone.
pub fn max_relative_error(a: &[f64], b: &[f64], scale_floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(scale_floor))
        .fold(0.0, f64::max)
}

use distildp::pipeline::{
    ArchConfig, BudgetConfig, CorpusConfig, StudentConfig, SyntheticConfig, TeacherConfig,
};
use distildp::{DpSgdConfig, ExperimentConfig, KdConfig, Method, SamplerConfig};

/// Seconds-scale experiment for structural checks.
pub fn smoke_config(method: Method) -> ExperimentConfig {
    let dp = DpSgdConfig {
        clip_norm: 1.0,
        noise_multiplier: None,
        sampling_rate: 0.1,
        epochs: 1.0,
        learning_rate: 1.0,
    };
    ExperimentConfig {
        seed: 3,
        method,
        corpus: CorpusConfig {
            toy_size: Some(200),
            records: None,
            schema: None,
            split: [0.8, 0.1, 0.1],
            max_len: 48,
        },
        budget: BudgetConfig {
            epsilon: 4.0,
            delta: None,
        },
        teacher: Some(TeacherConfig {
            arch: ArchConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 16,
                d_ff: 32,
            },
            dp: dp.clone(),
        }),
        sampler: SamplerConfig::default(),
        synthetic: Some(SyntheticConfig {
            count: 120,
            validation_count: 20,
        }),
        student: StudentConfig {
            arch: ArchConfig {
                n_layers: 1,
                n_heads: 1,
                d_model: 8,
                d_ff: 16,
            },
            kd: KdConfig {
                epochs: 1,
                ..KdConfig::default()
            },
            dp: Some(dp),
        },
    }
}

/// The desk-scale setting of the end-to-end criteria: 2,000 training
/// reviews, ε = 2, δ = 1/2000, 20,000 synthetic examples, λ = 0.4, t = 1.
pub fn toy_config(method: Method) -> ExperimentConfig {
    let dp = DpSgdConfig {
        clip_norm: 1.0,
        noise_multiplier: None,
        sampling_rate: 0.05,
        epochs: 3.0,
        learning_rate: 2.0,
    };
    ExperimentConfig {
        seed: 7,
        method,
        corpus: CorpusConfig {
            toy_size: Some(2500),
            records: None,
            schema: None,
            split: [0.8, 0.1, 0.1],
            max_len: 64,
        },
        budget: BudgetConfig {
            epsilon: 2.0,
            delta: None,
        },
        teacher: Some(TeacherConfig {
            arch: ArchConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 32,
                d_ff: 128,
            },
            dp: dp.clone(),
        }),
        sampler: SamplerConfig::default(),
        synthetic: Some(SyntheticConfig {
            count: 20_000,
            validation_count: 200,
        }),
        student: StudentConfig {
            arch: ArchConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 16,
                d_ff: 64,
            },
            kd: KdConfig {
                lambda: 0.4,
                temperature: 1.0,
                alpha: 0.0,
                epochs: 2,
                learning_rate: 0.5,
                batch_size: 16,
                ..KdConfig::default()
            },
            dp: Some(dp),
        },
    }
}
