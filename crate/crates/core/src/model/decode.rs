use super::{check_tokens, ops, ModelConfig, ParameterSet};
use crate::corpus::TokenId;
use crate::{Error, Result};

/// Incremental decoder with a per-layer key/value cache. Feeding tokens one
/// at a time yields exactly the logit rows of a full forward pass.
pub struct DecoderState<'a> {
    params: &'a ParameterSet,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl<'a> DecoderState<'a> {
    pub fn new(params: &'a ParameterSet) -> Self {
        let c = &params.config;
        let size = c.max_seq_len * c.d_model;
        DecoderState {
            params,
            keys: vec![vec![0.0; size]; c.n_layers],
            values: vec![vec![0.0; size]; c.n_layers],
            pos: 0,
        }
    }

    pub fn params_config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds a prompt and returns the logits after its last token.
    pub fn prefill(&mut self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        check_tokens(&self.params.config, tokens)?;
        let mut last = Vec::new();
        for &t in tokens {
            last = self.step(t)?;
        }
        Ok(last)
    }

    /// Consumes one token and returns the next-token logits.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let p = self.params;
        let c = &p.config;
        if self.pos >= c.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "decoder context full at {} tokens",
                c.max_seq_len
            )));
        }
        check_tokens(c, &[token])?;
        let lay = p.layout();
        let w = &p.values;
        let (d, f, vs, nh, dh) = (c.d_model, c.d_ff, c.vocab_size, c.n_heads, c.head_dim());
        let i = self.pos;
        let t = token as usize;

        let mut x: Vec<f64> = (0..d)
            .map(|j| w[lay.tok + t * d + j] + w[lay.pos + i * d + j])
            .collect();
        let mut xhat = vec![0.0; d];
        let mut rstd = [0.0];
        let mut h = vec![0.0; d];
        let mut scores = vec![0.0; c.max_seq_len];
        for (l, lo) in lay.layers.iter().enumerate() {
            ops::layer_norm(
                &mut h,
                &mut xhat,
                &mut rstd,
                &x,
                &w[lo.ln1_g..lo.ln1_g + d],
                &w[lo.ln1_b..lo.ln1_b + d],
                1,
                d,
            );
            let mut q = vec![0.0; d];
            ops::linear(
                &mut q,
                &h,
                &w[lo.wq..lo.wq + d * d],
                &w[lo.bq..lo.bq + d],
                1,
                d,
                d,
            );
            ops::linear(
                &mut self.keys[l][i * d..(i + 1) * d],
                &h,
                &w[lo.wk..lo.wk + d * d],
                &w[lo.bk..lo.bk + d],
                1,
                d,
                d,
            );
            ops::linear(
                &mut self.values[l][i * d..(i + 1) * d],
                &h,
                &w[lo.wv..lo.wv + d * d],
                &w[lo.bv..lo.bv + d],
                1,
                d,
                d,
            );
            let mut o = vec![0.0; d];
            for hd in 0..nh {
                let off = hd * dh;
                ops::attend_row(
                    &q[off..off + dh],
                    &self.keys[l],
                    &self.values[l],
                    i,
                    d,
                    off,
                    dh,
                    &mut scores,
                    &mut o[off..off + dh],
                );
            }
            let mut attn_out = vec![0.0; d];
            ops::linear(
                &mut attn_out,
                &o,
                &w[lo.wo..lo.wo + d * d],
                &w[lo.bo..lo.bo + d],
                1,
                d,
                d,
            );
            let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
            ops::layer_norm(
                &mut h,
                &mut xhat,
                &mut rstd,
                &x_mid,
                &w[lo.ln2_g..lo.ln2_g + d],
                &w[lo.ln2_b..lo.ln2_b + d],
                1,
                d,
            );
            let mut u = vec![0.0; f];
            ops::linear(
                &mut u,
                &h,
                &w[lo.w1..lo.w1 + d * f],
                &w[lo.b1..lo.b1 + f],
                1,
                d,
                f,
            );
            let g: Vec<f64> = u.iter().map(|&z| ops::gelu(z)).collect();
            let mut mlp_out = vec![0.0; d];
            ops::linear(
                &mut mlp_out,
                &g,
                &w[lo.w2..lo.w2 + f * d],
                &w[lo.b2..lo.b2 + d],
                1,
                f,
                d,
            );
            x = x_mid.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();
        }
        ops::layer_norm(
            &mut h,
            &mut xhat,
            &mut rstd,
            &x,
            &w[lay.lnf_g..lay.lnf_g + d],
            &w[lay.lnf_b..lay.lnf_b + d],
            1,
            d,
        );
        let mut logits = vec![0.0; vs];
        ops::linear(
            &mut logits,
            &h,
            &w[lay.head_w..lay.head_w + d * vs],
            &w[lay.head_b..lay.head_b + vs],
            1,
            d,
            vs,
        );
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "decoder logits".into(),
            });
        }
        self.pos += 1;
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{forward, init_params, tests::tiny_config};
    use super::*;

    #[test]
    fn incremental_matches_full_forward_exactly() {
        let p = init_params(tiny_config(), 9).unwrap();
        let tokens = [1, 4, 4, 9, 0, 10, 3];
        let full = forward(&p, &tokens).unwrap();
        let mut dec = DecoderState::new(&p);
        for (i, &t) in tokens.iter().enumerate() {
            let row = dec.step(t).unwrap();
            assert_eq!(row.as_slice(), full.logit_row(i));
        }
    }

    #[test]
    fn context_overflow_is_an_error() {
        let p = init_params(tiny_config(), 9).unwrap();
        let mut dec = DecoderState::new(&p);
        dec.prefill(&[1; 12]).unwrap();
        assert!(dec.step(1).is_err());
    }
}
