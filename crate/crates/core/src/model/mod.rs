//! A minimal decoder-only transformer language model.
//!
//! Pre-norm blocks (layer norm → causal multi-head attention → residual,
//! layer norm → GELU MLP → residual), learned positional embeddings, a final
//! layer norm and an untied output projection. All parameters live in one
//! flat `Vec<f64>`; gradients share that layout, which makes per-example
//! clipping and noising plain vector arithmetic.

mod checkpoint;
mod decode;
pub(crate) mod ops;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{PreparedExample, TokenId};
use crate::rng::rng_from_seed;
use crate::{Error, Result};

pub use checkpoint::{
    checkpoint_bytes, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use decode::DecoderState;
pub use ops::{log_softmax, softmax};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config("d_model", "must be divisible by n_heads"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Output projections on the residual path get a depth-scaled init.
    residual: bool,
    kind: InitKind,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Weight,
    Gain,
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Names, shapes and offsets of every parameter array.
#[derive(Debug, Clone)]
pub struct Layout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut entries = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>, kind: InitKind, residual: bool| {
            let offset = total;
            total += shape.iter().product::<usize>();
            entries.push(ParamEntry {
                name,
                shape,
                offset,
                residual,
                kind,
            });
            offset
        };
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let tok = push("tok_emb".into(), vec![v, d], InitKind::Weight, false);
        let pos = push(
            "pos_emb".into(),
            vec![c.max_seq_len, d],
            InitKind::Weight,
            false,
        );
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.gain"), vec![d], InitKind::Gain, false),
                ln1_b: push(p("ln1.bias"), vec![d], InitKind::Weight, false),
                wq: push(p("attn.wq"), vec![d, d], InitKind::Weight, false),
                bq: push(p("attn.bq"), vec![d], InitKind::Weight, false),
                wk: push(p("attn.wk"), vec![d, d], InitKind::Weight, false),
                bk: push(p("attn.bk"), vec![d], InitKind::Weight, false),
                wv: push(p("attn.wv"), vec![d, d], InitKind::Weight, false),
                bv: push(p("attn.bv"), vec![d], InitKind::Weight, false),
                wo: push(p("attn.wo"), vec![d, d], InitKind::Weight, true),
                bo: push(p("attn.bo"), vec![d], InitKind::Weight, false),
                ln2_g: push(p("ln2.gain"), vec![d], InitKind::Gain, false),
                ln2_b: push(p("ln2.bias"), vec![d], InitKind::Weight, false),
                w1: push(p("mlp.w1"), vec![d, f], InitKind::Weight, false),
                b1: push(p("mlp.b1"), vec![f], InitKind::Weight, false),
                w2: push(p("mlp.w2"), vec![f, d], InitKind::Weight, true),
                b2: push(p("mlp.b2"), vec![d], InitKind::Weight, false),
            });
        }
        let lnf_g = push("ln_f.gain".into(), vec![d], InitKind::Gain, false);
        let lnf_b = push("ln_f.bias".into(), vec![d], InitKind::Weight, false);
        let head_w = push("head.w".into(), vec![d, v], InitKind::Weight, false);
        let head_b = push("head.b".into(), vec![v], InitKind::Weight, false);
        Layout {
            entries,
            total,
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub config: ModelConfig,
    pub values: Vec<f64>,
}

impl ParameterSet {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ParameterSet {
            config,
            values: vec![0.0; config.parameter_count()],
        })
    }

    pub fn total_count(&self) -> usize {
        self.values.len()
    }

    pub fn layout(&self) -> Layout {
        self.config.layout()
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.layout()
            .entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.values[e.range()])
    }

    pub fn array_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self
            .layout()
            .entries
            .iter()
            .find(|e| e.name == name)?
            .range();
        Some(&mut self.values[range])
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Draws every array from N(0, 0.02²), with residual output projections
/// scaled by 1/√(2·n_layers) and layer-norm gains centred on 1.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ParameterSet> {
    let mut params = ParameterSet::zeros(config)?;
    let layout = params.layout();
    let mut rng = rng_from_seed(seed);
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    for entry in &layout.entries {
        let std = if entry.residual {
            INIT_STD * residual_scale
        } else {
            INIT_STD
        };
        let base = if entry.kind == InitKind::Gain {
            1.0
        } else {
            0.0
        };
        for v in &mut params.values[entry.range()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = base + std * z;
        }
    }
    Ok(params)
}

/// Per-position logits (`len × vocab_size`) and final hidden states
/// (`len × d_model`, the output of the final layer norm).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub len: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub logits: Vec<f64>,
    pub hidden_last: Vec<f64>,
}

impl ForwardOutput {
    pub fn logit_row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn hidden_row(&self, i: usize) -> &[f64] {
        &self.hidden_last[i * self.d_model..(i + 1) * self.d_model]
    }
}

struct LayerCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `n_heads × n × n`, zero above the diagonal.
    att: Vec<f64>,
    o: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    h2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

pub(crate) struct ForwardCache {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
}

fn check_tokens(config: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(
            "forward needs at least one token".into(),
        ));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

pub fn forward(params: &ParameterSet, tokens: &[TokenId]) -> Result<ForwardOutput> {
    Ok(forward_cached(params, tokens)?.0)
}

pub(crate) fn forward_cached(
    params: &ParameterSet,
    tokens: &[TokenId],
) -> Result<(ForwardOutput, ForwardCache)> {
    let c = &params.config;
    check_tokens(c, tokens)?;
    let lay = params.layout();
    let w = &params.values;
    let (n, d, f, vs, nh, dh) = (
        tokens.len(),
        c.d_model,
        c.d_ff,
        c.vocab_size,
        c.n_heads,
        c.head_dim(),
    );

    let mut x = vec![0.0; n * d];
    for (i, &t) in tokens.iter().enumerate() {
        let te = &w[lay.tok + t as usize * d..lay.tok + (t as usize + 1) * d];
        let pe = &w[lay.pos + i * d..lay.pos + (i + 1) * d];
        for j in 0..d {
            x[i * d + j] = te[j] + pe[j];
        }
    }

    let mut layers = Vec::with_capacity(c.n_layers);
    for lo in &lay.layers {
        let x_in = x;
        let mut ln1_xhat = vec![0.0; n * d];
        let mut ln1_rstd = vec![0.0; n];
        let mut h1 = vec![0.0; n * d];
        ops::layer_norm(
            &mut h1,
            &mut ln1_xhat,
            &mut ln1_rstd,
            &x_in,
            &w[lo.ln1_g..lo.ln1_g + d],
            &w[lo.ln1_b..lo.ln1_b + d],
            n,
            d,
        );
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        ops::linear(
            &mut q,
            &h1,
            &w[lo.wq..lo.wq + d * d],
            &w[lo.bq..lo.bq + d],
            n,
            d,
            d,
        );
        ops::linear(
            &mut k,
            &h1,
            &w[lo.wk..lo.wk + d * d],
            &w[lo.bk..lo.bk + d],
            n,
            d,
            d,
        );
        ops::linear(
            &mut v,
            &h1,
            &w[lo.wv..lo.wv + d * d],
            &w[lo.bv..lo.bv + d],
            n,
            d,
            d,
        );
        let mut att = vec![0.0; nh * n * n];
        let mut o = vec![0.0; n * d];
        for h in 0..nh {
            for i in 0..n {
                let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
                let scores = &mut att[(h * n + i) * n..(h * n + i + 1) * n];
                ops::attend_row(
                    qi,
                    &k,
                    &v,
                    i,
                    d,
                    h * dh,
                    dh,
                    scores,
                    &mut o[i * d + h * dh..i * d + (h + 1) * dh],
                );
            }
        }
        let mut attn_out = vec![0.0; n * d];
        ops::linear(
            &mut attn_out,
            &o,
            &w[lo.wo..lo.wo + d * d],
            &w[lo.bo..lo.bo + d],
            n,
            d,
            d,
        );
        let x_mid: Vec<f64> = x_in.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

        let mut ln2_xhat = vec![0.0; n * d];
        let mut ln2_rstd = vec![0.0; n];
        let mut h2 = vec![0.0; n * d];
        ops::layer_norm(
            &mut h2,
            &mut ln2_xhat,
            &mut ln2_rstd,
            &x_mid,
            &w[lo.ln2_g..lo.ln2_g + d],
            &w[lo.ln2_b..lo.ln2_b + d],
            n,
            d,
        );
        let mut u = vec![0.0; n * f];
        ops::linear(
            &mut u,
            &h2,
            &w[lo.w1..lo.w1 + d * f],
            &w[lo.b1..lo.b1 + f],
            n,
            d,
            f,
        );
        let g: Vec<f64> = u.iter().map(|&z| ops::gelu(z)).collect();
        let mut mlp_out = vec![0.0; n * d];
        ops::linear(
            &mut mlp_out,
            &g,
            &w[lo.w2..lo.w2 + f * d],
            &w[lo.b2..lo.b2 + d],
            n,
            f,
            d,
        );
        x = x_mid.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();

        layers.push(LayerCache {
            ln1_xhat,
            ln1_rstd,
            h1,
            q,
            k,
            v,
            att,
            o,
            ln2_xhat,
            ln2_rstd,
            h2,
            u,
            g,
        });
    }

    let mut lnf_xhat = vec![0.0; n * d];
    let mut lnf_rstd = vec![0.0; n];
    let mut hidden = vec![0.0; n * d];
    ops::layer_norm(
        &mut hidden,
        &mut lnf_xhat,
        &mut lnf_rstd,
        &x,
        &w[lay.lnf_g..lay.lnf_g + d],
        &w[lay.lnf_b..lay.lnf_b + d],
        n,
        d,
    );
    let mut logits = vec![0.0; n * vs];
    ops::linear(
        &mut logits,
        &hidden,
        &w[lay.head_w..lay.head_w + d * vs],
        &w[lay.head_b..lay.head_b + vs],
        n,
        d,
        vs,
    );

    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "forward logits".into(),
        });
    }
    let out = ForwardOutput {
        len: n,
        vocab_size: vs,
        d_model: d,
        logits,
        hidden_last: hidden,
    };
    let cache = ForwardCache {
        tokens: tokens.to_vec(),
        layers,
        lnf_xhat,
        lnf_rstd,
    };
    Ok((out, cache))
}

/// Accumulates into `grad` the gradient of a scalar loss whose partial
/// derivatives with respect to the logits (and optionally the final hidden
/// states) are `dlogits` / `dhidden`.
pub(crate) fn backward(
    params: &ParameterSet,
    cache: &ForwardCache,
    dlogits: &[f64],
    dhidden: Option<&[f64]>,
    grad: &mut [f64],
) {
    let c = &params.config;
    let lay = params.layout();
    let w = &params.values;
    let n = cache.tokens.len();
    let (d, f, vs, nh, dh) = (c.d_model, c.d_ff, c.vocab_size, c.n_heads, c.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    // Output head. The final hidden states are recomputed from the cached
    // normalized values rather than stored twice.
    let mut hidden = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            hidden[i * d + j] = w[lay.lnf_g + j] * cache.lnf_xhat[i * d + j] + w[lay.lnf_b + j];
        }
    }
    let mut dh_total = match dhidden {
        Some(dhid) => dhid.to_vec(),
        None => vec![0.0; n * d],
    };
    {
        let (head_w_grad, rest) = grad[lay.head_w..].split_at_mut(d * vs);
        ops::linear_backward(
            dlogits,
            &hidden,
            &w[lay.head_w..lay.head_w + d * vs],
            n,
            d,
            vs,
            head_w_grad,
            &mut rest[..vs],
            Some(&mut dh_total),
        );
    }
    let mut dx = vec![0.0; n * d];
    {
        let (gg, gb) = grad[lay.lnf_g..lay.lnf_g + 2 * d].split_at_mut(d);
        ops::layer_norm_backward(
            &dh_total,
            &cache.lnf_xhat,
            &cache.lnf_rstd,
            &w[lay.lnf_g..lay.lnf_g + d],
            n,
            d,
            gg,
            gb,
            &mut dx,
        );
    }

    for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        // MLP branch: x_out = x_mid + gelu(h2·W1 + b1)·W2 + b2
        let mut dg = vec![0.0; n * f];
        {
            let (w2g, rest) = grad[lo.w2..].split_at_mut(f * d);
            ops::linear_backward(
                &dx,
                &lc.g,
                &w[lo.w2..lo.w2 + f * d],
                n,
                f,
                d,
                w2g,
                &mut rest[..d],
                Some(&mut dg),
            );
        }
        let du: Vec<f64> = dg
            .iter()
            .zip(&lc.u)
            .map(|(g, &u)| g * ops::gelu_grad(u))
            .collect();
        let mut dh2 = vec![0.0; n * d];
        {
            let (w1g, rest) = grad[lo.w1..].split_at_mut(d * f);
            ops::linear_backward(
                &du,
                &lc.h2,
                &w[lo.w1..lo.w1 + d * f],
                n,
                d,
                f,
                w1g,
                &mut rest[..f],
                Some(&mut dh2),
            );
        }
        let mut dx_mid = dx.clone();
        {
            let (gg, gb) = grad[lo.ln2_g..lo.ln2_g + 2 * d].split_at_mut(d);
            ops::layer_norm_backward(
                &dh2,
                &lc.ln2_xhat,
                &lc.ln2_rstd,
                &w[lo.ln2_g..lo.ln2_g + d],
                n,
                d,
                gg,
                gb,
                &mut dx_mid,
            );
        }

        // Attention branch: x_mid = x_in + attn(h1)·Wo + bo
        let mut d_o = vec![0.0; n * d];
        {
            let (wog, rest) = grad[lo.wo..].split_at_mut(d * d);
            ops::linear_backward(
                &dx_mid,
                &lc.o,
                &w[lo.wo..lo.wo + d * d],
                n,
                d,
                d,
                wog,
                &mut rest[..d],
                Some(&mut d_o),
            );
        }
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut da = vec![0.0; n];
        for h in 0..nh {
            let off = h * dh;
            for i in 0..n {
                let a = &lc.att[(h * n + i) * n..(h * n + i + 1) * n];
                let doi = &d_o[i * d + off..i * d + off + dh];
                let mut weighted = 0.0;
                for j in 0..=i {
                    let vj = &lc.v[j * d + off..j * d + off + dh];
                    da[j] = ops::dot(doi, vj);
                    weighted += a[j] * da[j];
                    for (t, &g) in doi.iter().enumerate() {
                        dv[j * d + off + t] += a[j] * g;
                    }
                }
                for j in 0..=i {
                    let ds = a[j] * (da[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..dh {
                        dq[i * d + off + t] += ds * lc.k[j * d + off + t];
                        dk[j * d + off + t] += ds * lc.q[i * d + off + t];
                    }
                }
            }
        }
        let mut dh1 = vec![0.0; n * d];
        for (wo_, bo_, dproj) in [
            (lo.wq, lo.bq, &dq),
            (lo.wk, lo.bk, &dk),
            (lo.wv, lo.bv, &dv),
        ] {
            let (wg, rest) = grad[wo_..].split_at_mut(d * d);
            let bias_off = bo_ - wo_ - d * d;
            ops::linear_backward(
                dproj,
                &lc.h1,
                &w[wo_..wo_ + d * d],
                n,
                d,
                d,
                wg,
                &mut rest[bias_off..bias_off + d],
                Some(&mut dh1),
            );
        }
        let mut dx_in = dx_mid;
        {
            let (gg, gb) = grad[lo.ln1_g..lo.ln1_g + 2 * d].split_at_mut(d);
            ops::layer_norm_backward(
                &dh1,
                &lc.ln1_xhat,
                &lc.ln1_rstd,
                &w[lo.ln1_g..lo.ln1_g + d],
                n,
                d,
                gg,
                gb,
                &mut dx_in,
            );
        }
        dx = dx_in;
    }

    for (i, &t) in cache.tokens.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        let te = lay.tok + t as usize * d;
        let pe = lay.pos + i * d;
        for j in 0..d {
            grad[te + j] += row[j];
            grad[pe + j] += row[j];
        }
    }
}

/// Loss value and its partial derivatives with respect to the model outputs
/// for one example.
#[derive(Debug, Clone)]
pub struct ObjectiveTerms {
    pub loss: f64,
    pub dlogits: Vec<f64>,
    pub dhidden: Option<Vec<f64>>,
}

/// A per-example training objective over the model's outputs on
/// `example.inputs()`.
pub trait Objective: Sync {
    fn evaluate(&self, example: &PreparedExample, output: &ForwardOutput)
        -> Result<ObjectiveTerms>;
}

/// Per-row weights selecting next-token predictions of content tokens: row
/// `r` predicts token `r + 1` and counts iff `r + 1 >= boundary`.
pub fn content_row_mask(example: &PreparedExample) -> Vec<f64> {
    (0..example.inputs().len())
        .map(|r| if r + 1 >= example.boundary { 1.0 } else { 0.0 })
        .collect()
}

/// Mean over unmasked rows of `-log softmax(logits)[target]`.
pub fn nll_loss(
    logits: &[f64],
    vocab_size: usize,
    targets: &[TokenId],
    mask: &[f64],
) -> Result<f64> {
    Ok(masked_cross_entropy(logits, vocab_size, targets, mask)?.0)
}

/// Masked mean cross-entropy and its gradient with respect to the logits.
pub fn masked_cross_entropy(
    logits: &[f64],
    vocab_size: usize,
    targets: &[TokenId],
    mask: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() * vocab_size || mask.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "misaligned loss inputs: {} logits, {} targets, {} mask entries",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    let total: f64 = mask.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(
            "loss mask selects no positions".into(),
        ));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m == 0.0 {
            continue;
        }
        if t as usize >= vocab_size {
            return Err(Error::TokenOutOfRange { id: t, vocab_size });
        }
        let row = &logits[r * vocab_size..(r + 1) * vocab_size];
        let p = softmax(row);
        let lp = log_softmax(row);
        loss -= m * lp[t as usize];
        let g = &mut grad[r * vocab_size..(r + 1) * vocab_size];
        for (gi, pi) in g.iter_mut().zip(&p) {
            *gi = m * pi / total;
        }
        g[t as usize] -= m / total;
    }
    let loss = loss / total;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "cross-entropy loss".into(),
        });
    }
    Ok((loss, grad))
}

/// Next-token cross-entropy over content positions.
#[derive(Debug, Clone, Copy, Default)]
pub struct NextTokenLoss;

impl Objective for NextTokenLoss {
    fn evaluate(
        &self,
        example: &PreparedExample,
        output: &ForwardOutput,
    ) -> Result<ObjectiveTerms> {
        let mask = content_row_mask(example);
        let (loss, dlogits) =
            masked_cross_entropy(&output.logits, output.vocab_size, example.targets(), &mask)?;
        Ok(ObjectiveTerms {
            loss,
            dlogits,
            dhidden: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn example_inputs(example: &PreparedExample) -> Result<&[TokenId]> {
    let inputs = example.inputs();
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(
            "example has no next-token targets".into(),
        ));
    }
    Ok(inputs)
}

/// Adds `weight · ∇loss(example)` into `grad`; returns the loss.
fn accumulate_gradient(
    params: &ParameterSet,
    example: &PreparedExample,
    objective: &dyn Objective,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let (out, cache) = forward_cached(params, example_inputs(example)?)?;
    let mut terms = objective.evaluate(example, &out)?;
    if !terms.loss.is_finite() {
        return Err(Error::NonFinite {
            context: "example loss".into(),
        });
    }
    if weight != 1.0 {
        terms.dlogits.iter_mut().for_each(|g| *g *= weight);
        if let Some(dh) = terms.dhidden.as_mut() {
            dh.iter_mut().for_each(|g| *g *= weight);
        }
    }
    backward(
        params,
        &cache,
        &terms.dlogits,
        terms.dhidden.as_deref(),
        grad,
    );
    Ok(terms.loss)
}

pub fn example_gradient(
    params: &ParameterSet,
    example: &PreparedExample,
    objective: &dyn Objective,
) -> Result<ExampleGradient> {
    let mut grad = vec![0.0; params.total_count()];
    let loss = accumulate_gradient(params, example, objective, 1.0, &mut grad)?;
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite {
            context: "per-example gradient".into(),
        });
    }
    Ok(ExampleGradient { loss, grad })
}

/// One full gradient vector per example, computed independently (and in
/// parallel) over shared read-only parameters.
pub fn per_example_gradients(
    params: &ParameterSet,
    batch: &[PreparedExample],
    objective: &dyn Objective,
) -> Result<Vec<ExampleGradient>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    batch
        .par_iter()
        .map(|ex| example_gradient(params, ex, objective))
        .collect()
}

/// Mean loss over the batch and its gradient, accumulated into a single
/// buffer without materializing per-example vectors.
pub fn batch_gradient(
    params: &ParameterSet,
    batch: &[PreparedExample],
    objective: &dyn Objective,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let weight = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.total_count()];
    let mut loss = 0.0;
    for ex in batch {
        loss += weight * accumulate_gradient(params, ex, objective, weight, &mut grad)?;
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite {
            context: "batch gradient".into(),
        });
    }
    Ok((loss, grad))
}

/// Mean objective value over the batch, without gradients.
pub fn batch_loss(
    params: &ParameterSet,
    batch: &[PreparedExample],
    objective: &dyn Objective,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        let out = forward(params, example_inputs(ex)?)?;
        total += objective.evaluate(ex, &out)?.loss;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 12,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 2;
        c.vocab_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_spread() {
        let a = init_params(tiny_config(), 3).unwrap();
        let b = init_params(tiny_config(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(tiny_config(), 4).unwrap());
        assert!(a.all_finite());
        for e in &a.layout().entries {
            let xs = &a.values[e.range()];
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!(var > 0.0, "{} has zero variance", e.name);
        }
    }

    #[test]
    fn teacher_student_size_ratio() {
        let teacher = ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 81,
            max_seq_len: 64,
        };
        let student = ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            ..teacher
        };
        // Shape arithmetic, independent of the layout code.
        let count = |c: &ModelConfig| {
            let (d, f, v, l) = (c.d_model, c.d_ff, c.vocab_size, c.max_seq_len);
            let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
            v * d + l * d + c.n_layers * block + 2 * d + d * v + v
        };
        assert_eq!(teacher.parameter_count(), count(&teacher));
        assert_eq!(student.parameter_count(), count(&student));
        let ratio = teacher.parameter_count() as f64 / student.parameter_count() as f64;
        assert!((8.0..=12.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn forward_shapes_and_normalization() {
        let p = init_params(tiny_config(), 1).unwrap();
        let out = forward(&p, &[3]).unwrap();
        assert_eq!(out.len, 1);
        assert_eq!(out.logits.len(), 11);
        let out = forward(&p, &[1, 2, 3, 4, 5]).unwrap();
        for i in 0..out.len {
            let s: f64 = softmax(out.logit_row(i)).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = init_params(tiny_config(), 1).unwrap();
        assert!(matches!(
            forward(&p, &[11]),
            Err(Error::TokenOutOfRange { id: 11, .. })
        ));
        assert!(forward(&p, &[1; 13]).is_err());
        assert!(forward(&p, &[]).is_err());
    }

    #[test]
    fn appending_a_token_keeps_earlier_logits() {
        let p = init_params(tiny_config(), 2).unwrap();
        let full = forward(&p, &[4, 1, 7, 7, 2, 9]).unwrap();
        for len in 1..6 {
            let prefix = forward(&p, &[4, 1, 7, 7, 2, 9][..len]).unwrap();
            for (a, b) in prefix.logits.iter().zip(&full.logits) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn nll_uniform_and_limits() {
        let v = 64;
        let logits = vec![0.0; 3 * v];
        let loss = nll_loss(&logits, v, &[1, 2, 3], &[1.0, 1.0, 1.0]).unwrap();
        assert!((loss - (64f64).ln()).abs() < 1e-12);

        let mut peaked = vec![0.0; v];
        peaked[5] = 1e3;
        assert!(nll_loss(&peaked, v, &[5], &[1.0]).unwrap() < 1e-12);

        assert!(nll_loss(&logits, v, &[1, 2, 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn masked_target_is_ignored() {
        let v = 5;
        let logits: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = nll_loss(&logits, v, &[1, 2], &[1.0, 0.0]).unwrap();
        let b = nll_loss(&logits, v, &[1, 4], &[1.0, 0.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_example_gradient_basics() {
        let p = init_params(tiny_config(), 5).unwrap();
        let ex = PreparedExample {
            tokens: vec![3, 2, 5, 6, 1],
            boundary: 2,
        };
        let single = per_example_gradients(&p, std::slice::from_ref(&ex), &NextTokenLoss).unwrap();
        let (_, batch) = batch_gradient(&p, std::slice::from_ref(&ex), &NextTokenLoss).unwrap();
        assert_eq!(single.len(), 1);
        for (a, b) in single[0].grad.iter().zip(&batch) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()));
        }
        let dup = per_example_gradients(&p, &[ex.clone(), ex], &NextTokenLoss).unwrap();
        assert_eq!(dup[0], dup[1]);
        assert!(per_example_gradients(&p, &[], &NextTokenLoss).is_err());
    }
}
