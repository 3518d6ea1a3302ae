//! Truncated autoregressive sampling and bulk synthetic-data generation.
//!
//! Each step takes the next-token distribution, drops reserved tokens that
//! may not appear in content (padding and the control separator), applies
//! top-k then top-p truncation, and samples. Generation is prompted only by
//! a control code.

use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ControlCode, PreparedExample, TokenId, Vocabulary};
use crate::model::{checkpoint_bytes, softmax, DecoderState, ParameterSet};
use crate::rng::{indexed_rng, sha256_hex, Rng};
use crate::{Error, Result};

fn default_true() -> bool {
    true
}

fn default_top_k() -> Option<usize> {
    Some(50)
}

fn default_top_p() -> Option<f64> {
    Some(0.9)
}

fn default_max_new_tokens() -> usize {
    64
}

/// Truncation settings. Omitted fields take the defaults `k = 50`,
/// `p = 0.9`; `top_p = 1.0` or a `top_k` at least the vocabulary size turns
/// the respective truncation off.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_top_k")]
    pub top_k: Option<usize>,
    #[serde(default = "default_top_p")]
    pub top_p: Option<f64>,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_true")]
    pub stop_at_eos: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_k: default_top_k(),
            top_p: default_top_p(),
            max_new_tokens: default_max_new_tokens(),
            stop_at_eos: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == Some(0) {
            return Err(Error::config("top_k", "must be at least 1"));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config("top_p", "must lie in (0, 1]"));
            }
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens", "must be at least 1"));
        }
        Ok(())
    }
}

/// Token ids sorted by descending probability, ties broken by lower id.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.is_empty()
        || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0))
        || (sum - 1.0).abs() > 1e-6
    {
        return Err(Error::InvalidArgument(format!(
            "not a probability distribution (sum {sum})"
        )));
    }
    Ok(())
}

fn keep_and_renormalize(probs: &[f64], keep: &[usize]) -> Vec<f64> {
    let mass: f64 = keep.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in keep {
        out[i] = probs[i] / mass;
    }
    out
}

/// Keeps the `k` most probable tokens and renormalizes.
pub fn truncate_top_k(probs: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("top-k needs k >= 1".into()));
    }
    check_distribution(probs)?;
    if k >= probs.len() {
        return Ok(probs.to_vec());
    }
    let order = ranked(probs);
    Ok(keep_and_renormalize(probs, &order[..k]))
}

/// Keeps the shortest descending-probability prefix whose mass reaches `p`
/// (the token that crosses `p` is kept) and renormalizes.
pub fn truncate_top_p(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "top-p needs p in (0, 1], got {p}"
        )));
    }
    check_distribution(probs)?;
    if p >= 1.0 {
        return Ok(probs.to_vec());
    }
    let order = ranked(probs);
    let mut cum = 0.0;
    let mut cut = order.len();
    for (n, &i) in order.iter().enumerate() {
        cum += probs[i];
        if cum >= p {
            cut = n + 1;
            break;
        }
    }
    Ok(keep_and_renormalize(probs, &order[..cut]))
}

/// Top-k followed by top-p, per `config`.
pub fn truncate(probs: &[f64], config: &SamplerConfig) -> Result<Vec<f64>> {
    let mut out = probs.to_vec();
    if let Some(k) = config.top_k {
        out = truncate_top_k(&out, k)?;
    }
    if let Some(p) = config.top_p {
        out = truncate_top_p(&out, p)?;
    }
    Ok(out)
}

/// Inverse-CDF draw from `probs`.
pub fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Anything that yields next-token logits one token at a time.
pub trait Autoregressive {
    fn max_len(&self) -> usize;
    fn prefill(&mut self, tokens: &[TokenId]) -> Result<Vec<f64>>;
    fn step(&mut self, token: TokenId) -> Result<Vec<f64>>;
}

impl Autoregressive for DecoderState<'_> {
    fn max_len(&self) -> usize {
        self.params_config().max_seq_len
    }

    fn prefill(&mut self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        DecoderState::prefill(self, tokens)
    }

    fn step(&mut self, token: TokenId) -> Result<Vec<f64>> {
        DecoderState::step(self, token)
    }
}

/// Samples a continuation of `code` from `model`. Returns the full sequence
/// (code tokens first), at most `code.len() + max_new_tokens` long and never
/// longer than the model context.
pub fn sample_with<M: Autoregressive>(
    model: &mut M,
    code: &ControlCode,
    vocab: &Vocabulary,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<TokenId>> {
    config.validate()?;
    let boundary = code.boundary();
    if boundary == 0 || boundary >= model.max_len() {
        return Err(Error::InvalidArgument(format!(
            "control code of {boundary} tokens leaves no room in a {}-token context",
            model.max_len()
        )));
    }
    let budget = config.max_new_tokens.min(model.max_len() - boundary);
    let mut tokens = code.rendered.clone();
    let mut logits = model.prefill(&code.rendered)?;
    for n in 0..budget {
        let mut probs = softmax(&logits);
        probs[vocab.pad_id() as usize] = 0.0;
        probs[vocab.sep_id() as usize] = 0.0;
        let mass: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= mass);
        let probs = truncate(&probs, config)?;
        let next = sample_index(&probs, rng) as TokenId;
        tokens.push(next);
        if (config.stop_at_eos && next == vocab.eos_id()) || n + 1 == budget {
            break;
        }
        logits = model.step(next)?;
    }
    Ok(tokens)
}

pub fn sample_sequence(
    params: &ParameterSet,
    code: &ControlCode,
    vocab: &Vocabulary,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<TokenId>> {
    sample_with(&mut DecoderState::new(params), code, vocab, config, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub code: ControlCode,
    /// Code tokens followed by generated tokens.
    pub tokens: Vec<TokenId>,
}

impl SyntheticExample {
    pub fn boundary(&self) -> usize {
        self.code.boundary()
    }

    pub fn to_prepared(&self) -> PreparedExample {
        PreparedExample {
            tokens: self.tokens.clone(),
            boundary: self.boundary(),
        }
    }

    /// Generated content, without a trailing EOS.
    pub fn content(&self, vocab: &Vocabulary) -> Result<String> {
        let mut body = &self.tokens[self.boundary()..];
        if body.last() == Some(&vocab.eos_id()) {
            body = &body[..body.len() - 1];
        }
        vocab.decode(body)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorFingerprint {
    /// SHA-256 of the generator's checkpoint bytes.
    pub checkpoint_sha256: String,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub examples: Vec<SyntheticExample>,
    pub fingerprint: GeneratorFingerprint,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// The first `n` examples; equal to a fresh generation over the first `n`
    /// codes with the same seed.
    pub fn prefix(&self, n: usize) -> SyntheticDataset {
        SyntheticDataset {
            examples: self.examples[..n.min(self.examples.len())].to_vec(),
            fingerprint: self.fingerprint.clone(),
        }
    }

    pub fn prepared(&self) -> Vec<PreparedExample> {
        self.examples
            .iter()
            .map(SyntheticExample::to_prepared)
            .collect()
    }

    /// JSON-lines, one `{"control": {...}, "text": ...}` object per example.
    pub fn write_jsonl<W: Write>(&self, mut w: W, vocab: &Vocabulary) -> Result<()> {
        for ex in &self.examples {
            let line = serde_json::json!({
                "control": ex.code.attributes,
                "text": ex.content(vocab)?,
            });
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "count": self.examples.len(),
            "fingerprint": self.fingerprint,
        })
    }

    /// SHA-256 over every example's tokens and the generator fingerprint.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend(serde_json::to_vec(&self.fingerprint).expect("fingerprint serializes"));
        for ex in &self.examples {
            bytes.extend((ex.tokens.len() as u64).to_le_bytes());
            for t in &ex.tokens {
                bytes.extend(t.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

pub fn params_fingerprint(params: &ParameterSet) -> String {
    sha256_hex(&checkpoint_bytes(params))
}

/// One sequence per code, in order. Sequence `i` uses its own stream
/// `(seed, i)`, so the result does not depend on worker scheduling and a
/// prefix of the codes yields a prefix of the dataset.
pub fn generate_synthetic(
    params: &ParameterSet,
    codes: &[ControlCode],
    vocab: &Vocabulary,
    config: &SamplerConfig,
    seed: u64,
) -> Result<SyntheticDataset> {
    if codes.is_empty() {
        return Err(Error::InvalidArgument(
            "no control codes to generate from".into(),
        ));
    }
    config.validate()?;
    let examples = codes
        .par_iter()
        .enumerate()
        .map(|(i, code)| {
            let mut rng = indexed_rng(seed, i as u64);
            sample_sequence(params, code, vocab, config, &mut rng)
                .map(|tokens| SyntheticExample {
                    code: code.clone(),
                    tokens,
                })
                .map_err(|e| Error::Generation {
                    index: i,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        examples,
        fingerprint: GeneratorFingerprint {
            checkpoint_sha256: params_fingerprint(params),
            sampler: config.clone(),
            seed,
        },
    })
}
