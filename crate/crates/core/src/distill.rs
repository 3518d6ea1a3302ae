//! Distillation losses and the (non-private) student training loop.
//!
//! Per example, over the unmasked next-token rows:
//!
//! ```text
//! total = (1 − λ)·CE(y, softmax(z_S))
//!       + λ·t²·KL(softmax(z_T / t) ‖ softmax(z_S / t))
//!       + α·MSE(h_T, h_S)
//! ```
//!
//! with every term a mean over unmasked rows. Rows that predict control-code
//! tokens are masked: the teacher was trained on code-prefixed text, so its
//! predictions there reflect the code distribution, not content.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{PreparedExample, TokenId};
use crate::model::{
    batch_gradient, forward, log_softmax, softmax, ForwardOutput, Objective, ObjectiveTerms,
    ParameterSet,
};
use crate::pipeline::evaluate_ppl;
use crate::rng::Rng;
use crate::{Error, Result};

/// Direction of the KL term: `KL(teacher ‖ student)`. Echoed in reports.
pub const KL_TEACHER_FIRST: bool = true;

/// Which prediction rows are excluded from every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkipPrefix {
    /// Skip rows predicting control-code tokens (everything before the
    /// content boundary).
    #[default]
    ControlCode,
    /// Use every row.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub lambda: f64,
    pub temperature: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub skip_prefix: SkipPrefix,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            lambda: 0.4,
            temperature: 1.0,
            alpha: 0.0,
            skip_prefix: SkipPrefix::ControlCode,
            epochs: 2,
            learning_rate: 0.5,
            batch_size: 16,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", "must lie in [0, 1]"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be non-negative"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Whether any term needs the teacher's outputs.
    pub fn needs_teacher(&self) -> bool {
        self.lambda > 0.0 || self.alpha > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillBatchOutput {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    pub mse: f64,
    pub positions: usize,
}

/// Row-wise `softmax(logits / t)`.
pub fn soft_targets(logits: &[f64], vocab_size: usize, t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(
            "temperature must be positive".into(),
        ));
    }
    Ok(logits
        .chunks(vocab_size)
        .flat_map(|row| softmax(&row.iter().map(|z| z / t).collect::<Vec<_>>()))
        .collect())
}

/// Mask over token positions: `0` before the content boundary, `1` from it.
pub fn distill_prefix_mask(example: &PreparedExample) -> Result<Vec<f64>> {
    if example.boundary == 0 || example.boundary >= example.len() {
        return Err(Error::InvalidArgument(format!(
            "boundary {} leaves no content in a sequence of length {}",
            example.boundary,
            example.len()
        )));
    }
    Ok((0..example.len())
        .map(|i| if i < example.boundary { 0.0 } else { 1.0 })
        .collect())
}

/// Per-row mask for the model's next-token rows (row `r` predicts token
/// `r + 1`).
pub fn loss_rows_mask(example: &PreparedExample, policy: SkipPrefix) -> Result<Vec<f64>> {
    match policy {
        SkipPrefix::ControlCode => Ok(distill_prefix_mask(example)?[1..].to_vec()),
        SkipPrefix::None => Ok(vec![1.0; example.len().saturating_sub(1)]),
    }
}

fn check_rows(
    logits_len: usize,
    vocab_size: usize,
    targets: &[TokenId],
    mask: &[f64],
) -> Result<f64> {
    if logits_len != targets.len() * vocab_size || mask.len() != targets.len() {
        return Err(Error::InvalidArgument(
            "misaligned distillation inputs".into(),
        ));
    }
    let m: f64 = mask.iter().sum();
    if m <= 0.0 {
        return Err(Error::InvalidArgument("all positions are masked".into()));
    }
    Ok(m)
}

/// Mixed hard/soft loss and its gradient with respect to the student logits.
/// `teacher_logits` may be `None` only when λ = 0.
pub fn kd_loss_with_grad(
    teacher_logits: Option<&[f64]>,
    student_logits: &[f64],
    vocab_size: usize,
    targets: &[TokenId],
    mask: &[f64],
    config: &KdConfig,
) -> Result<(DistillBatchOutput, Vec<f64>)> {
    let m = check_rows(student_logits.len(), vocab_size, targets, mask)?;
    if config.lambda > 0.0 && teacher_logits.is_none() {
        return Err(Error::InvalidArgument("λ > 0 needs teacher logits".into()));
    }
    if let Some(t) = teacher_logits {
        if t.len() != student_logits.len() {
            return Err(Error::InvalidArgument(
                "teacher and student logits differ in shape".into(),
            ));
        }
    }
    let (lambda, t) = (config.lambda, config.temperature);
    let mut ce = 0.0;
    let mut kl = 0.0;
    let mut grad = vec![0.0; student_logits.len()];
    for (r, (&y, &w)) in targets.iter().zip(mask).enumerate() {
        if w == 0.0 {
            continue;
        }
        if y as usize >= vocab_size {
            return Err(Error::TokenOutOfRange { id: y, vocab_size });
        }
        let zs = &student_logits[r * vocab_size..(r + 1) * vocab_size];
        let g = &mut grad[r * vocab_size..(r + 1) * vocab_size];
        let p = softmax(zs);
        ce -= w * log_softmax(zs)[y as usize];
        for (gi, pi) in g.iter_mut().zip(&p) {
            *gi = (1.0 - lambda) * w * pi / m;
        }
        g[y as usize] -= (1.0 - lambda) * w / m;

        if let Some(teacher) = teacher_logits {
            let zt = &teacher[r * vocab_size..(r + 1) * vocab_size];
            let st: Vec<f64> = zs.iter().map(|z| z / t).collect();
            let tt: Vec<f64> = zt.iter().map(|z| z / t).collect();
            let (lps, lpt) = (log_softmax(&st), log_softmax(&tt));
            let mut row_kl = 0.0;
            for (a, b) in lpt.iter().zip(&lps) {
                let pt = a.exp();
                if pt > 0.0 {
                    row_kl += pt * (a - b);
                }
            }
            kl += w * row_kl;
            // d/dz_S of t²·KL(p_T ‖ p_S) = t·(p_S − p_T)
            for ((gi, a), b) in g.iter_mut().zip(&lpt).zip(&lps) {
                *gi += lambda * t * w * (b.exp() - a.exp()) / m;
            }
        }
    }
    let ce = ce / m;
    let kl = kl / m;
    let total = (1.0 - lambda) * ce + lambda * t * t * kl;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: "distillation loss".into(),
        });
    }
    Ok((
        DistillBatchOutput {
            total,
            ce,
            kl,
            mse: 0.0,
            positions: m as usize,
        },
        grad,
    ))
}

pub fn kd_loss(
    teacher_logits: &[f64],
    student_logits: &[f64],
    vocab_size: usize,
    targets: &[TokenId],
    mask: &[f64],
    config: &KdConfig,
) -> Result<DistillBatchOutput> {
    Ok(kd_loss_with_grad(
        Some(teacher_logits),
        student_logits,
        vocab_size,
        targets,
        mask,
        config,
    )?
    .0)
}

fn width_mismatch(teacher: usize, student: usize) -> Error {
    Error::config(
        "alpha",
        format!("hidden widths differ (teacher {teacher}, student {student}); set alpha = 0 or use equal d_model"),
    )
}

/// Mean squared difference of final hidden states over unmasked rows and
/// all channels, with its gradient with respect to the student states.
pub fn mse_hidden_loss_with_grad(
    teacher_hidden: &[f64],
    student_hidden: &[f64],
    d_teacher: usize,
    d_student: usize,
    mask: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if d_teacher != d_student {
        return Err(width_mismatch(d_teacher, d_student));
    }
    let d = d_student;
    if teacher_hidden.len() != student_hidden.len() || student_hidden.len() != mask.len() * d {
        return Err(Error::InvalidArgument("misaligned hidden states".into()));
    }
    let m: f64 = mask.iter().sum();
    if m <= 0.0 {
        return Err(Error::InvalidArgument("all positions are masked".into()));
    }
    let denom = m * d as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; student_hidden.len()];
    for (r, &w) in mask.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for c in 0..d {
            let diff = teacher_hidden[r * d + c] - student_hidden[r * d + c];
            loss += w * diff * diff;
            grad[r * d + c] = -2.0 * w * diff / denom;
        }
    }
    Ok((loss / denom, grad))
}

pub fn mse_hidden_loss(
    teacher_hidden: &[f64],
    student_hidden: &[f64],
    d_teacher: usize,
    d_student: usize,
    mask: &[f64],
) -> Result<f64> {
    Ok(mse_hidden_loss_with_grad(teacher_hidden, student_hidden, d_teacher, d_student, mask)?.0)
}

/// Full distillation objective for one example against a frozen teacher.
pub struct KdObjective<'a> {
    pub teacher: &'a ParameterSet,
    pub config: &'a KdConfig,
}

impl KdObjective<'_> {
    pub fn components(
        &self,
        example: &PreparedExample,
        student: &ForwardOutput,
    ) -> Result<(DistillBatchOutput, ObjectiveTerms)> {
        let mask = loss_rows_mask(example, self.config.skip_prefix)?;
        let teacher_out = if self.config.needs_teacher() {
            Some(forward(self.teacher, example.inputs())?)
        } else {
            None
        };
        let (mut parts, dlogits) = kd_loss_with_grad(
            teacher_out
                .as_ref()
                .filter(|_| self.config.lambda > 0.0)
                .map(|o| o.logits.as_slice()),
            &student.logits,
            student.vocab_size,
            example.targets(),
            &mask,
            self.config,
        )?;
        let mut dhidden = None;
        if self.config.alpha > 0.0 {
            let t = teacher_out
                .as_ref()
                .expect("teacher evaluated when alpha > 0");
            let (mse, mut g) = mse_hidden_loss_with_grad(
                &t.hidden_last,
                &student.hidden_last,
                t.d_model,
                student.d_model,
                &mask,
            )?;
            g.iter_mut().for_each(|x| *x *= self.config.alpha);
            parts.mse = mse;
            parts.total += self.config.alpha * mse;
            dhidden = Some(g);
        }
        let terms = ObjectiveTerms {
            loss: parts.total,
            dlogits,
            dhidden,
        };
        Ok((parts, terms))
    }
}

impl Objective for KdObjective<'_> {
    fn evaluate(
        &self,
        example: &PreparedExample,
        output: &ForwardOutput,
    ) -> Result<ObjectiveTerms> {
        Ok(self.components(example, output)?.1)
    }
}

/// Mean loss components over `examples` (each example weighted equally).
pub fn evaluate_components(
    teacher: &ParameterSet,
    student: &ParameterSet,
    examples: &[PreparedExample],
    config: &KdConfig,
) -> Result<DistillBatchOutput> {
    let objective = KdObjective { teacher, config };
    let mut acc = DistillBatchOutput {
        total: 0.0,
        ce: 0.0,
        kl: 0.0,
        mse: 0.0,
        positions: 0,
    };
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no examples to evaluate".into()));
    }
    for ex in examples {
        let out = forward(student, ex.inputs())?;
        let (p, _) = objective.components(ex, &out)?;
        acc.total += p.total;
        acc.ce += p.ce;
        acc.kl += p.kl;
        acc.mse += p.mse;
        acc.positions += p.positions;
    }
    let n = examples.len() as f64;
    acc.total /= n;
    acc.ce /= n;
    acc.kl /= n;
    acc.mse /= n;
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: DistillBatchOutput,
    pub validation_ppl: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudentReport {
    pub initial_validation_ppl: f64,
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    #[serde(skip)]
    pub params: ParameterSet,
}

/// Mini-batch SGD of the student on synthetic data. No privacy ledger is
/// involved: the teacher and its samples are already DP.
pub fn train_student(
    teacher: &ParameterSet,
    student: ParameterSet,
    synthetic: &[PreparedExample],
    validation: &[PreparedExample],
    config: &KdConfig,
    rng: &mut Rng,
) -> Result<StudentReport> {
    config.validate()?;
    if synthetic.is_empty() {
        return Err(Error::InvalidArgument("no synthetic examples".into()));
    }
    if config.alpha > 0.0 && teacher.config.d_model != student.config.d_model {
        return Err(width_mismatch(
            teacher.config.d_model,
            student.config.d_model,
        ));
    }
    let objective = KdObjective { teacher, config };
    let mut params = student;
    let initial_validation_ppl = if validation.is_empty() {
        f64::NAN
    } else {
        evaluate_ppl(&params, validation)?
    };
    let mut order: Vec<usize> = (0..synthetic.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PreparedExample> = chunk.iter().map(|&i| synthetic[i].clone()).collect();
            let (loss, grad) =
                batch_gradient(&params, &batch, &objective).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { step },
                    e => e,
                })?;
            for (p, g) in params.values.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
            if !params.all_finite() {
                return Err(Error::Diverged { step });
            }
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let (validation_stats, validation_ppl) = if validation.is_empty() {
            let nan = DistillBatchOutput {
                total: f64::NAN,
                ce: f64::NAN,
                kl: f64::NAN,
                mse: f64::NAN,
                positions: 0,
            };
            (nan, f64::NAN)
        } else {
            (
                evaluate_components(teacher, &params, validation, config)?,
                evaluate_ppl(&params, validation)?,
            )
        };
        epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            validation: validation_stats,
            validation_ppl,
        });
    }
    Ok(StudentReport {
        initial_validation_ppl,
        epochs,
        steps: step,
        params,
    })
}
