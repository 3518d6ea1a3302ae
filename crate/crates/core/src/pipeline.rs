//! End-to-end experiments: DistilDP, its baselines, perplexity evaluation and
//! ablation sweeps.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, PrivacyBudget, PrivacyLedger};
use crate::corpus::{
    generate_toy_corpus, load_records, prepend_and_tokenize, render_control_code, split_dataset,
    subsample_control_codes, ControlCode, PreparedExample, Record, Schema, Splits, Vocabulary,
};
use crate::distill::{train_student, KdConfig, KdObjective, StudentReport, KL_TEACHER_FIRST};
use crate::dpsgd::{train_dp, DpSgdConfig, TrainReport};
use crate::model::{
    content_row_mask, forward, init_params, log_softmax, ModelConfig, NextTokenLoss, ParameterSet,
};
use crate::rng::{derive_seed, labelled_rng, sha256_hex};
use crate::sampler::{generate_synthetic, params_fingerprint, SamplerConfig, SyntheticDataset};
use crate::{Error, Result};

/// Token-weighted NLL totals over content positions. Shards evaluated
/// separately merge to the single-pass result.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PplAccumulator {
    pub nll_sum: f64,
    pub positions: u64,
}

impl PplAccumulator {
    pub fn add(&mut self, params: &ParameterSet, examples: &[PreparedExample]) -> Result<()> {
        let parts = examples
            .par_iter()
            .map(|ex| example_nll(params, ex))
            .collect::<Result<Vec<_>>>()?;
        for (sum, n) in parts {
            self.nll_sum += sum;
            self.positions += n;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PplAccumulator) {
        self.nll_sum += other.nll_sum;
        self.positions += other.positions;
    }

    pub fn ppl(&self) -> Result<f64> {
        if self.positions == 0 {
            return Err(Error::InvalidArgument(
                "no content positions to evaluate".into(),
            ));
        }
        Ok((self.nll_sum / self.positions as f64).exp())
    }
}

fn example_nll(params: &ParameterSet, ex: &PreparedExample) -> Result<(f64, u64)> {
    if ex.len() < 2 {
        return Ok((0.0, 0));
    }
    let out = forward(params, ex.inputs())?;
    let mut sum = 0.0;
    let mut n = 0;
    for (r, (&y, &m)) in ex.targets().iter().zip(&content_row_mask(ex)).enumerate() {
        if m > 0.0 {
            sum -= log_softmax(out.logit_row(r))[y as usize];
            n += 1;
        }
    }
    Ok((sum, n))
}

/// `exp` of the mean next-token NLL over content positions of `examples`.
pub fn evaluate_ppl(params: &ParameterSet, examples: &[PreparedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut acc = PplAccumulator::default();
    acc.add(params, examples)?;
    acc.ppl()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Distildp,
    DpsgdStudent,
    Dpkd,
    Dpsyn,
    ZeroShot,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Distildp => "distildp",
            Method::DpsgdStudent => "dpsgd_student",
            Method::Dpkd => "dpkd",
            Method::Dpsyn => "dpsyn",
            Method::ZeroShot => "zero_shot",
        }
    }

    fn uses_synthetic(&self) -> bool {
        matches!(self, Method::Distildp | Method::Dpsyn)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture without the data-dependent vocabulary size and length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl ArchConfig {
    pub fn model_config(&self, vocab_size: usize, max_seq_len: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len,
        }
    }
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_max_len() -> usize {
    64
}

/// Either a generated toy corpus (`toy_size` records) or a JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<PathBuf>,
    /// JSON schema file; defaults to the toy schema for toy corpora and the
    /// review schema otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub epsilon: f64,
    /// Defaults to `1 / |train|`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub arch: ArchConfig,
    pub dp: DpSgdConfig,
}

fn default_validation_count() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    /// Held-out synthetic examples for the student's validation curve.
    #[serde(default = "default_validation_count")]
    pub validation_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub arch: ArchConfig,
    #[serde(default)]
    pub kd: KdConfig,
    /// DP-SGD settings for the `dpsgd_student` and `dpkd` student phases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpSgdConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub corpus: CorpusConfig,
    pub budget: BudgetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherConfig>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    pub student: StudentConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        match (c.toy_size, &c.records) {
            (Some(0), None) => return Err(Error::config("corpus.toy_size", "must be at least 1")),
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::config(
                    "corpus",
                    "set exactly one of `toy_size` and `records`",
                ))
            }
        }
        if c.max_len < 2 {
            return Err(Error::config("corpus.max_len", "must be at least 2"));
        }
        if !(self.budget.epsilon > 0.0 && self.budget.epsilon.is_finite()) {
            return Err(Error::config("budget.epsilon", "must be positive"));
        }
        if let Some(d) = self.budget.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::config("budget.delta", "must lie in (0, 1)"));
            }
        }
        let needs_teacher = matches!(self.method, Method::Distildp | Method::Dpsyn | Method::Dpkd);
        if needs_teacher {
            let t = self.teacher.as_ref().ok_or_else(|| {
                Error::config("teacher", format!("required for method {}", self.method))
            })?;
            t.dp.validate().map_err(|e| prefix_field(e, "teacher.dp"))?;
        }
        if self.method.uses_synthetic() {
            let s = self.synthetic.ok_or_else(|| {
                Error::config("synthetic", format!("required for method {}", self.method))
            })?;
            if s.count == 0 {
                return Err(Error::config("synthetic.count", "must be at least 1"));
            }
            if s.validation_count == 0 {
                return Err(Error::config(
                    "synthetic.validation_count",
                    "must be at least 1",
                ));
            }
            self.sampler
                .validate()
                .map_err(|e| prefix_field(e, "sampler"))?;
        }
        if matches!(self.method, Method::DpsgdStudent | Method::Dpkd) {
            let dp = self.student.dp.as_ref().ok_or_else(|| {
                Error::config("student.dp", format!("required for method {}", self.method))
            })?;
            dp.validate().map_err(|e| prefix_field(e, "student.dp"))?;
        }
        self.student
            .kd
            .validate()
            .map_err(|e| prefix_field(e, "student.kd"))?;
        Ok(())
    }

    /// The same experiment with one ablation axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        match axis {
            SweepAxis::Lambda => cfg.student.kd.lambda = value,
            SweepAxis::Temperature => cfg.student.kd.temperature = value,
            SweepAxis::Alpha => cfg.student.kd.alpha = value,
            SweepAxis::SyntheticCount => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::config(
                        "synthetic.count",
                        format!("sweep value {value} is not a positive integer"),
                    ));
                }
                let s = cfg.synthetic.get_or_insert(SyntheticConfig {
                    count: 0,
                    validation_count: default_validation_count(),
                });
                s.count = value as usize;
            }
        }
        Ok(cfg)
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { field, message } => Error::Config {
            field: format!("{prefix}.{field}"),
            message,
        },
        e => e,
    }
}

/// Data shared by every method: the split records and their tokenization.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub schema: Schema,
    pub vocab: Vocabulary,
    pub records: Splits<Record>,
    pub examples: Splits<PreparedExample>,
    /// Control codes of the training records, in order.
    pub train_codes: Vec<ControlCode>,
}

impl PreparedCorpus {
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for split in [
            &self.examples.train,
            &self.examples.validation,
            &self.examples.test,
        ] {
            bytes.extend((split.len() as u64).to_le_bytes());
            for ex in split {
                bytes.extend((ex.boundary as u64).to_le_bytes());
                bytes.extend((ex.tokens.len() as u64).to_le_bytes());
                for t in &ex.tokens {
                    bytes.extend(t.to_le_bytes());
                }
            }
        }
        sha256_hex(&bytes)
    }
}

pub fn load_schema(path: &std::path::Path) -> Result<Schema> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    let schema: Schema = serde_json::from_str(&text)?;
    schema.validate()?;
    Ok(schema)
}

/// Loads or generates the corpus, splits it and prepends control codes.
pub fn prepare_corpus(config: &CorpusConfig, seed: u64) -> Result<PreparedCorpus> {
    let schema = match (&config.schema, config.toy_size) {
        (Some(p), _) => load_schema(p)?,
        (None, Some(_)) => Schema::toy(),
        (None, None) => Schema::reviews(),
    };
    let records = match (config.toy_size, &config.records) {
        (Some(n), None) => generate_toy_corpus(derive_seed(seed, "corpus"), n, &schema)?,
        (None, Some(path)) => load_records(path, &schema)?,
        _ => {
            return Err(Error::config(
                "corpus",
                "set exactly one of `toy_size` and `records`",
            ))
        }
    };
    let vocab = Vocabulary::default();
    let splits = split_dataset(&records, config.split, derive_seed(seed, "split"))?;
    let tokenize = |r: &[Record]| prepend_and_tokenize(r, &schema, &vocab, config.max_len);
    let examples = Splits {
        train: tokenize(&splits.train)?,
        validation: tokenize(&splits.validation)?,
        test: tokenize(&splits.test)?,
    };
    let train_codes = splits
        .train
        .iter()
        .map(|r| render_control_code(r, &schema, &vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedCorpus {
        schema,
        vocab,
        records: splits,
        examples,
        train_codes,
    })
}

/// Budget accounting for one phase, read off ledger snapshots taken before
/// and after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    /// The share of the budget this phase may spend, if it spends any.
    pub allocation: Option<PrivacyBudget>,
    pub ledger_steps_before: u64,
    pub ledger_steps_after: u64,
    pub spent_epsilon: f64,
}

impl PhaseRecord {
    fn from_snapshots(
        phase: &str,
        allocation: Option<PrivacyBudget>,
        before: &PrivacyLedger,
        after: &PrivacyLedger,
    ) -> Self {
        let spent_epsilon = if before.accumulated_rdp == after.accumulated_rdp {
            0.0
        } else {
            after.spent_epsilon()
        };
        PhaseRecord {
            phase: phase.to_string(),
            allocation,
            ledger_steps_before: before.steps_recorded,
            ledger_steps_after: after.steps_recorded,
            spent_epsilon,
        }
    }

    fn free(phase: &str) -> Self {
        PhaseRecord {
            phase: phase.to_string(),
            allocation: None,
            ledger_steps_before: 0,
            ledger_steps_after: 0,
            spent_epsilon: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub count: usize,
    pub validation_count: usize,
    pub sha256: String,
    pub mean_content_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Fingerprints {
    pub corpus_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_sha256: Option<String>,
    pub student_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_sha256: Option<String>,
}

/// Everything a run reports. Wall-clock time is deliberately absent so that
/// fixed seeds give byte-identical JSON; callers time runs themselves.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub method: Method,
    pub seed: u64,
    pub budget: PrivacyBudget,
    pub test_ppl: f64,
    pub total_spent_epsilon: f64,
    pub phases: Vec<PhaseRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TrainReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student_distillation: Option<StudentReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student_dp: Option<TrainReport>,
    pub kl_direction: String,
    pub fingerprints: Fingerprints,
    pub config: ExperimentConfig,
}

impl ExperimentReport {
    pub fn phase(&self, name: &str) -> Option<&PhaseRecord> {
        self.phases.iter().find(|p| p.phase == name)
    }

    /// Checks the method's budget structure against the ledger snapshots.
    pub fn check_budget(&self) -> Result<()> {
        let eps = self.budget.epsilon;
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.total_spent_epsilon > eps + 1e-6 {
            return fail(format!(
                "spent ε {} exceeds budget {eps}",
                self.total_spent_epsilon
            ));
        }
        for p in &self.phases {
            let cap = p.allocation.map_or(0.0, |a| a.epsilon);
            if p.allocation.is_none() && p.spent_epsilon != 0.0 {
                return fail(format!(
                    "phase {} spent ε {} without an allocation",
                    p.phase, p.spent_epsilon
                ));
            }
            if p.spent_epsilon > cap + 1e-6 {
                return fail(format!(
                    "phase {} spent ε {} over its allocation {cap}",
                    p.phase, p.spent_epsilon
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_row(&self, seconds: f64) -> RunRow {
        let kd = &self.config.student.kd;
        RunRow {
            method: self.method,
            epsilon: self.budget.epsilon,
            delta: self.budget.delta,
            lambda: kd.lambda,
            temperature: kd.temperature,
            alpha: kd.alpha,
            synthetic_count: self.synthetic.as_ref().map(|s| s.count),
            test_ppl: self.test_ppl,
            seconds,
        }
    }
}

/// Flat per-run metrics row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub method: Method,
    pub epsilon: f64,
    pub delta: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub synthetic_count: Option<usize>,
    pub test_ppl: f64,
    pub seconds: f64,
}

/// Model weights produced by a run, for checkpointing.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub teacher: Option<ParameterSet>,
    pub student: ParameterSet,
    pub synthetic: Option<SyntheticDataset>,
}

/// A trained teacher plus the ledger it was charged to.
#[derive(Debug, Clone)]
pub struct TeacherStage {
    pub params: ParameterSet,
    pub report: TrainReport,
    pub allocation: PrivacyBudget,
    pub before: PrivacyLedger,
    pub after: PrivacyLedger,
}

impl TeacherStage {
    pub fn fingerprint(&self) -> String {
        params_fingerprint(&self.params)
    }
}

/// Resolves the noise multiplier, calibrating it to `budget` when unset.
pub fn resolve_dp(config: &DpSgdConfig, budget: PrivacyBudget) -> Result<DpSgdConfig> {
    let mut cfg = config.clone();
    if cfg.noise_multiplier.is_none() {
        cfg.noise_multiplier = Some(calibrate_sigma(budget, cfg.sampling_rate, cfg.steps())?);
    }
    Ok(cfg)
}

pub fn resolve_budget(config: &ExperimentConfig, corpus: &PreparedCorpus) -> Result<PrivacyBudget> {
    match config.budget.delta {
        Some(d) => PrivacyBudget::new(config.budget.epsilon, d),
        None => PrivacyBudget::for_dataset(config.budget.epsilon, corpus.examples.train.len()),
    }
}

/// Trains the teacher with DP-SGD on code-prefixed training data, charging
/// a fresh ledger with `allocation`.
pub fn teacher_stage(
    config: &ExperimentConfig,
    corpus: &PreparedCorpus,
    allocation: PrivacyBudget,
) -> Result<TeacherStage> {
    let tc = config
        .teacher
        .as_ref()
        .ok_or_else(|| Error::config("teacher", "missing"))?;
    let model = tc
        .arch
        .model_config(corpus.vocab.len(), config.corpus.max_len);
    let init = init_params(model, derive_seed(config.seed, "teacher-init"))?;
    let dp = resolve_dp(&tc.dp, allocation)?;
    let mut ledger = PrivacyLedger::new(allocation);
    let before = ledger.clone();
    let mut rng = labelled_rng(config.seed, "teacher");
    let report = train_dp(
        init,
        &corpus.examples.train,
        &NextTokenLoss,
        &dp,
        &mut ledger,
        &mut rng,
    )?;
    Ok(TeacherStage {
        params: report.params.clone(),
        report,
        allocation,
        before,
        after: ledger,
    })
}

/// Training and validation pools sampled from the teacher. Codes are drawn
/// from the training split's code distribution; a pool of `count` examples
/// is a prefix of any larger pool with the same seed.
pub fn generation_stage(
    config: &ExperimentConfig,
    corpus: &PreparedCorpus,
    teacher: &ParameterSet,
    count: usize,
) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let sc = config
        .synthetic
        .ok_or_else(|| Error::config("synthetic", "missing"))?;
    let gen = |n: usize, label: &str| -> Result<SyntheticDataset> {
        let codes = subsample_control_codes(
            &corpus.train_codes,
            n,
            derive_seed(config.seed, &format!("{label}-codes")),
        )?;
        generate_synthetic(
            teacher,
            &codes,
            &corpus.vocab,
            &config.sampler,
            derive_seed(config.seed, label),
        )
    };
    Ok((
        gen(count, "generation")?,
        gen(sc.validation_count, "generation-val")?,
    ))
}

fn student_model(config: &ExperimentConfig, corpus: &PreparedCorpus) -> ModelConfig {
    config
        .student
        .arch
        .model_config(corpus.vocab.len(), config.corpus.max_len)
}

fn init_student(config: &ExperimentConfig, corpus: &PreparedCorpus) -> Result<ParameterSet> {
    init_params(
        student_model(config, corpus),
        derive_seed(config.seed, "student-init"),
    )
}

fn synthetic_summary(train: &SyntheticDataset, validation: &SyntheticDataset) -> SyntheticSummary {
    let total: usize = train
        .examples
        .iter()
        .map(|e| e.tokens.len() - e.boundary())
        .sum();
    SyntheticSummary {
        count: train.len(),
        validation_count: validation.len(),
        sha256: train.digest(),
        mean_content_tokens: total as f64 / train.len().max(1) as f64,
    }
}

/// DistilDP (and DP-Syn) from a trained teacher and a synthetic pool. The
/// pool may be larger than the configured count; its prefix is used.
pub fn distill_from(
    config: &ExperimentConfig,
    corpus: &PreparedCorpus,
    teacher: &TeacherStage,
    pool: &SyntheticDataset,
    validation: &SyntheticDataset,
) -> Result<ExperimentOutcome> {
    let mut kd = config.student.kd.clone();
    if config.method == Method::Dpsyn {
        kd.lambda = 0.0;
        kd.alpha = 0.0;
    }
    let count = config.synthetic.map_or(pool.len(), |s| s.count);
    if count > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "synthetic count {count} exceeds pool of {}",
            pool.len()
        )));
    }
    let synthetic = pool.prefix(count);
    let budget = teacher.allocation;
    let generation =
        PhaseRecord::from_snapshots("generation", None, &teacher.after, &teacher.after);

    let ledger = teacher.after.clone();
    let student = init_student(config, corpus)?;
    let mut rng = labelled_rng(config.seed, "student");
    let trained = train_student(
        &teacher.params,
        student,
        &synthetic.prepared(),
        &validation.prepared(),
        &kd,
        &mut rng,
    )
    .map_err(|e| e.in_phase("student"))?;
    let student_phase = PhaseRecord::from_snapshots("student", None, &teacher.after, &ledger);

    let test_ppl = evaluate_ppl(&trained.params, &corpus.examples.test)
        .map_err(|e| e.in_phase("evaluation"))?;
    let mut echoed = config.clone();
    echoed.student.kd = kd;
    let report = ExperimentReport {
        method: config.method,
        seed: config.seed,
        budget,
        test_ppl,
        total_spent_epsilon: ledger.spent_epsilon(),
        phases: vec![
            PhaseRecord::from_snapshots("teacher", Some(budget), &teacher.before, &teacher.after),
            generation,
            student_phase,
        ],
        teacher: Some(teacher.report.clone()),
        synthetic: Some(synthetic_summary(&synthetic, validation)),
        kl_direction: kl_direction(),
        fingerprints: Fingerprints {
            corpus_sha256: corpus.fingerprint(),
            teacher_sha256: Some(teacher.fingerprint()),
            student_sha256: params_fingerprint(&trained.params),
            synthetic_sha256: Some(synthetic.digest()),
        },
        student_distillation: Some(trained.clone()),
        student_dp: None,
        config: echoed,
    };
    Ok(ExperimentOutcome {
        report,
        teacher: Some(teacher.params.clone()),
        student: trained.params,
        synthetic: Some(synthetic),
    })
}

fn kl_direction() -> String {
    if KL_TEACHER_FIRST {
        "teacher_first"
    } else {
        "student_first"
    }
    .to_string()
}

/// Algorithm 1: DP teacher on the whole budget, synthetic generation, then
/// non-private distillation.
pub fn run_distildp(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    if !config.method.uses_synthetic() {
        return Err(Error::config(
            "method",
            format!("{} is not a synthetic-data method", config.method),
        ));
    }
    config.validate()?;
    let corpus = prepare_corpus(&config.corpus, config.seed).map_err(|e| e.in_phase("prepare"))?;
    let budget = resolve_budget(config, &corpus)?;
    let teacher = teacher_stage(config, &corpus, budget).map_err(|e| e.in_phase("teacher"))?;
    let count = config.synthetic.expect("validated").count;
    let (pool, validation) = generation_stage(config, &corpus, &teacher.params, count)
        .map_err(|e| e.in_phase("generation"))?;
    distill_from(config, &corpus, &teacher, &pool, &validation)
}

/// The non-DistilDP methods: DP-SGD student, DPKD, and zero-shot.
pub fn run_baseline(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    if config.method == Method::Dpsyn {
        return run_distildp(config);
    }
    if config.method == Method::Distildp {
        return Err(Error::config("method", "distildp is not a baseline"));
    }
    config.validate()?;
    let corpus = prepare_corpus(&config.corpus, config.seed).map_err(|e| e.in_phase("prepare"))?;
    let budget = resolve_budget(config, &corpus)?;
    match config.method {
        Method::Dpsyn | Method::Distildp => unreachable!("handled above"),
        Method::ZeroShot => {
            let student = init_student(config, &corpus)?;
            let test_ppl = evaluate_ppl(&student, &corpus.examples.test)
                .map_err(|e| e.in_phase("evaluation"))?;
            let report = ExperimentReport {
                method: config.method,
                seed: config.seed,
                budget,
                test_ppl,
                total_spent_epsilon: 0.0,
                phases: vec![PhaseRecord::free("student")],
                teacher: None,
                synthetic: None,
                student_distillation: None,
                student_dp: None,
                kl_direction: kl_direction(),
                fingerprints: Fingerprints {
                    corpus_sha256: corpus.fingerprint(),
                    student_sha256: params_fingerprint(&student),
                    ..Fingerprints::default()
                },
                config: config.clone(),
            };
            Ok(ExperimentOutcome {
                report,
                teacher: None,
                student,
                synthetic: None,
            })
        }
        Method::DpsgdStudent => {
            let dp = resolve_dp(config.student.dp.as_ref().expect("validated"), budget)
                .map_err(|e| e.in_phase("student"))?;
            let mut ledger = PrivacyLedger::new(budget);
            let before = ledger.clone();
            let mut rng = labelled_rng(config.seed, "student");
            let report = train_dp(
                init_student(config, &corpus)?,
                &corpus.examples.train,
                &NextTokenLoss,
                &dp,
                &mut ledger,
                &mut rng,
            )
            .map_err(|e| e.in_phase("student"))?;
            let student = report.params.clone();
            let test_ppl = evaluate_ppl(&student, &corpus.examples.test)
                .map_err(|e| e.in_phase("evaluation"))?;
            let report = ExperimentReport {
                method: config.method,
                seed: config.seed,
                budget,
                test_ppl,
                total_spent_epsilon: ledger.spent_epsilon(),
                phases: vec![PhaseRecord::from_snapshots(
                    "student",
                    Some(budget),
                    &before,
                    &ledger,
                )],
                teacher: None,
                synthetic: None,
                student_distillation: None,
                student_dp: Some(report),
                kl_direction: kl_direction(),
                fingerprints: Fingerprints {
                    corpus_sha256: corpus.fingerprint(),
                    student_sha256: params_fingerprint(&student),
                    ..Fingerprints::default()
                },
                config: config.clone(),
            };
            Ok(ExperimentOutcome {
                report,
                teacher: None,
                student,
                synthetic: None,
            })
        }
        Method::Dpkd => {
            // Two phases on the same private data, each with half of ε and
            // half of δ; they compose to at most the full budget.
            let half = budget.halved();
            let teacher =
                teacher_stage(config, &corpus, half).map_err(|e| e.in_phase("teacher"))?;
            let dp = resolve_dp(config.student.dp.as_ref().expect("validated"), half)
                .map_err(|e| e.in_phase("student"))?;
            let mut ledger = PrivacyLedger::new(half);
            let before = ledger.clone();
            let mut rng = labelled_rng(config.seed, "student");
            let objective = KdObjective {
                teacher: &teacher.params,
                config: &config.student.kd,
            };
            let report = train_dp(
                init_student(config, &corpus)?,
                &corpus.examples.train,
                &objective,
                &dp,
                &mut ledger,
                &mut rng,
            )
            .map_err(|e| e.in_phase("student"))?;
            let student = report.params.clone();
            let test_ppl = evaluate_ppl(&student, &corpus.examples.test)
                .map_err(|e| e.in_phase("evaluation"))?;
            let phases = vec![
                PhaseRecord::from_snapshots("teacher", Some(half), &teacher.before, &teacher.after),
                PhaseRecord::from_snapshots("student", Some(half), &before, &ledger),
            ];
            let report = ExperimentReport {
                method: config.method,
                seed: config.seed,
                budget,
                test_ppl,
                total_spent_epsilon: phases.iter().map(|p| p.spent_epsilon).sum(),
                phases,
                teacher: Some(teacher.report.clone()),
                synthetic: None,
                student_distillation: None,
                student_dp: Some(report),
                kl_direction: kl_direction(),
                fingerprints: Fingerprints {
                    corpus_sha256: corpus.fingerprint(),
                    teacher_sha256: Some(teacher.fingerprint()),
                    student_sha256: params_fingerprint(&student),
                    synthetic_sha256: None,
                },
                config: config.clone(),
            };
            Ok(ExperimentOutcome {
                report,
                teacher: Some(teacher.params),
                student,
                synthetic: None,
            })
        }
    }
}

/// Dispatches on `config.method`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    if config.method.uses_synthetic() {
        run_distildp(config)
    } else {
        run_baseline(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    Temperature,
    SyntheticCount,
    Alpha,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Temperature => "temperature",
            SweepAxis::SyntheticCount => "synthetic_count",
            SweepAxis::Alpha => "alpha",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "temperature" => Ok(SweepAxis::Temperature),
            "synthetic_count" => Ok(SweepAxis::SyntheticCount),
            "alpha" => Ok(SweepAxis::Alpha),
            other => Err(Error::config("axis", format!("unknown axis `{other}`"))),
        }
    }
}

/// One sweep value: the run's metrics, or the error that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub method: Method,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub lambda: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub synthetic_count: Option<usize>,
    pub test_ppl: Option<f64>,
    pub seconds: f64,
    pub teacher_sha256: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<Option<ExperimentReport>>,
}

impl SweepResult {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)
                .map_err(|e| Error::InvalidArgument(format!("writing CSV: {e}")))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One run per value with everything else fixed. Synthetic-data methods
/// train the teacher once and sample one pool (sized for the largest
/// count), which every row reuses; other methods rerun in full. A failing
/// row records its error and the sweep moves on.
pub fn ablation_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::config("values", "sweep needs at least one value"));
    }
    base.validate()?;
    let configs: Vec<Result<ExperimentConfig>> = values
        .iter()
        .map(|&v| {
            base.with_axis(axis, v)
                .and_then(|c| c.validate().map(|_| c))
        })
        .collect();

    let shared = if base.method.uses_synthetic() {
        let corpus = prepare_corpus(&base.corpus, base.seed).map_err(|e| e.in_phase("prepare"))?;
        let budget = resolve_budget(base, &corpus)?;
        let teacher = teacher_stage(base, &corpus, budget).map_err(|e| e.in_phase("teacher"))?;
        let largest = configs
            .iter()
            .filter_map(|c| c.as_ref().ok())
            .filter_map(|c| c.synthetic.map(|s| s.count))
            .max()
            .unwrap_or(base.synthetic.expect("validated").count);
        let (pool, validation) = generation_stage(base, &corpus, &teacher.params, largest)
            .map_err(|e| e.in_phase("generation"))?;
        Some((corpus, teacher, pool, validation))
    } else {
        None
    };

    let mut rows = Vec::with_capacity(values.len());
    let mut reports = Vec::with_capacity(values.len());
    for (&value, cfg) in values.iter().zip(configs) {
        let start = Instant::now();
        let result = match (&cfg, &shared) {
            (Err(e), _) => Err(Error::config(
                "values",
                format!("{}={value}: {e}", axis.as_str()),
            )),
            (Ok(cfg), Some((corpus, teacher, pool, validation))) => {
                distill_from(cfg, corpus, teacher, pool, validation)
            }
            (Ok(cfg), None) => run_experiment(cfg),
        };
        let seconds = start.elapsed().as_secs_f64();
        let echo = cfg.as_ref().unwrap_or(base);
        let kd = &echo.student.kd;
        let mut row = SweepRow {
            axis,
            value,
            method: base.method,
            epsilon: base.budget.epsilon,
            delta: base.budget.delta,
            lambda: kd.lambda,
            temperature: kd.temperature,
            alpha: kd.alpha,
            synthetic_count: echo
                .synthetic
                .map(|s| s.count)
                .filter(|_| echo.method.uses_synthetic()),
            test_ppl: None,
            seconds,
            teacher_sha256: None,
            error: None,
        };
        match result {
            Ok(outcome) => {
                let r = outcome.report;
                row.delta = Some(r.budget.delta);
                row.lambda = r.config.student.kd.lambda;
                row.alpha = r.config.student.kd.alpha;
                row.test_ppl = Some(r.test_ppl);
                row.teacher_sha256 = r.fingerprints.teacher_sha256.clone();
                reports.push(Some(r));
            }
            Err(e) => {
                row.error = Some(e.to_string());
                reports.push(None);
            }
        }
        rows.push(row);
    }
    Ok(SweepResult { rows, reports })
}

/// Writes `rows` as CSV with a header.
pub fn write_run_rows<W: std::io::Write>(w: W, rows: &[RunRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)
            .map_err(|e| Error::InvalidArgument(format!("writing CSV: {e}")))?;
    }
    out.flush()?;
    Ok(())
}
