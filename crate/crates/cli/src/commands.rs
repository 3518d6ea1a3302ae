use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use distildp::accountant::{epsilon_at_order, rdp_step, DEFAULT_ORDERS};
use distildp::corpus::{generate_toy_corpus, write_records, Record};
use distildp::model::checkpoint_bytes;
use distildp::pipeline::{
    ablation_sweep, prepare_corpus, run_experiment, write_run_rows, SweepAxis,
};
use distildp::{PreparedExample, Schema};
use serde::Serialize;

use crate::config;
use crate::manifest::ManifestBuilder;

fn flag_error(field: &str, message: impl Into<String>) -> anyhow::Error {
    distildp::Error::Config {
        field: field.into(),
        message: message.into(),
    }
    .into()
}

#[derive(Serialize)]
struct PreparedLine<'a> {
    text: &'a str,
    attributes: &'a std::collections::BTreeMap<String, String>,
    tokens: &'a [u32],
    boundary: usize,
}

fn prepared_jsonl(records: &[Record], examples: &[PreparedExample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (r, ex) in records.iter().zip(examples) {
        let line = PreparedLine {
            text: &r.text,
            attributes: &r.attributes,
            tokens: &ex.tokens,
            boundary: ex.boundary,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn prepare(config_path: &Path, out_dir: &Path) -> Result<()> {
    let loaded = config::load(config_path)?;
    let cfg = &loaded.config;
    let corpus = prepare_corpus(&cfg.corpus, cfg.seed)?;

    let mut m = ManifestBuilder::new("prepare", out_dir, &loaded.bytes, Some(cfg.seed));
    for p in &loaded.inputs {
        m.input(p)?;
    }
    m.write(
        "train.jsonl",
        &prepared_jsonl(&corpus.records.train, &corpus.examples.train)?,
    )?;
    m.write(
        "validation.jsonl",
        &prepared_jsonl(&corpus.records.validation, &corpus.examples.validation)?,
    )?;
    m.write(
        "test.jsonl",
        &prepared_jsonl(&corpus.records.test, &corpus.examples.test)?,
    )?;
    m.write("vocab.json", &pretty(&corpus.vocab)?)?;
    m.write("schema.json", &pretty(&corpus.schema)?)?;
    m.finish()?;
    println!(
        "prepared {} train / {} validation / {} test examples in {}",
        corpus.examples.train.len(),
        corpus.examples.validation.len(),
        corpus.examples.test.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn run(config_path: &Path, out_dir: &Path) -> Result<()> {
    let loaded = config::load(config_path)?;
    let cfg = &loaded.config;
    let start = Instant::now();
    let outcome = run_experiment(cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let report = &outcome.report;
    report.check_budget().context("budget accounting check")?;

    let mut m = ManifestBuilder::new("run", out_dir, &loaded.bytes, Some(cfg.seed));
    for p in &loaded.inputs {
        m.input(p)?;
    }
    m.write("report.json", (report.to_json()? + "\n").as_bytes())?;
    let mut csv = Vec::new();
    write_run_rows(&mut csv, &[report.csv_row(seconds)])?;
    m.write("metrics.csv", &csv)?;
    m.write("student.ckpt", &checkpoint_bytes(&outcome.student))?;
    if let Some(teacher) = &outcome.teacher {
        m.write("teacher.ckpt", &checkpoint_bytes(teacher))?;
    }
    if let Some(synthetic) = &outcome.synthetic {
        // Experiments always tokenize with the default vocabulary.
        let mut buf = Vec::new();
        synthetic.write_jsonl(&mut buf, &distildp::Vocabulary::default())?;
        m.write("synthetic.jsonl", &buf)?;
    }
    m.finish()?;
    println!(
        "{}: test PPL {:.4}, spent ε {:.4} of {} (δ = {:.3e}) in {:.1}s",
        report.method,
        report.test_ppl,
        report.total_spent_epsilon,
        report.budget.epsilon,
        report.budget.delta,
        seconds
    );
    Ok(())
}

pub fn sweep(config_path: &Path, axis: &str, values: &[f64], out_dir: &Path) -> Result<()> {
    let axis: SweepAxis = axis.parse()?;
    if values.is_empty() {
        return Err(flag_error("values", "sweep needs at least one value"));
    }
    let loaded = config::load(config_path)?;
    let result = ablation_sweep(&loaded.config, axis, values)?;
    let mut m = ManifestBuilder::new("sweep", out_dir, &loaded.bytes, Some(loaded.config.seed));
    for p in &loaded.inputs {
        m.input(p)?;
    }
    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    m.write("sweep.csv", &csv)?;
    m.finish()?;
    print!("{}", String::from_utf8_lossy(&csv));
    let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!(
            "{failed} of {} sweep rows failed; see the error column",
            result.rows.len()
        );
    }
    Ok(())
}

pub fn account(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(flag_error("q", "must lie in (0, 1]"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(flag_error("sigma", "must be finite and non-negative"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(flag_error("delta", "must lie in (0, 1)"));
    }
    let step = rdp_step(q, sigma, &DEFAULT_ORDERS)?;
    println!("order,rdp,epsilon");
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for (&order, &r) in DEFAULT_ORDERS.iter().zip(&step) {
        // Zero steps release nothing, whatever the per-step curve.
        let (rdp, eps) = if steps == 0 {
            (0.0, 0.0)
        } else {
            let rdp = r * steps as f64;
            (rdp, epsilon_at_order(order, rdp, delta))
        };
        println!("{order},{rdp},{eps}");
        if eps < best.0 {
            best = (eps, order, rdp);
        }
    }
    println!();
    println!(
        "minimum at order {}: rdp {}, epsilon {}",
        best.1, best.2, best.0
    );
    Ok(())
}

pub fn generate_toy(seed: u64, n: usize, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(flag_error("n", "must be at least 1"));
    }
    let records = generate_toy_corpus(seed, n, &Schema::toy())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let file = std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = std::io::BufWriter::new(file);
    write_records(&mut w, &records)?;
    std::io::Write::flush(&mut w)?;
    println!("wrote {n} records to {}", out.display());
    Ok(())
}
