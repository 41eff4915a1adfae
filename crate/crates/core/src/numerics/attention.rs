//! Scaled dot-product multi-head attention with optional causal masking.

use rand_chacha::ChaCha8Rng;

use crate::error::StageError;
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::{Parameter, Tensor};

/// Q/K/V/output projections around per-head scaled dot-product attention.
///
/// `head_dim` may differ from `d_model / heads`, in which case the internal
/// attention width is `heads * head_dim` and the output projection maps back
/// to `d_model`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Parameter,
    pub bq: Parameter,
    pub wk: Parameter,
    pub bk: Parameter,
    pub wv: Parameter,
    pub bv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
    pub heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        prefix: &str,
        d_model: usize,
        heads: usize,
        head_dim: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, StageError> {
        if heads == 0 {
            return Err(StageError::Config("attention needs at least one head".into()));
        }
        let head_dim = match head_dim {
            Some(hd) => hd,
            None => {
                if d_model % heads != 0 {
                    return Err(StageError::Config(format!(
                        "attention width {d_model} not divisible by {heads} heads"
                    )));
                }
                d_model / heads
            }
        };
        let inner = heads * head_dim;
        let proj = |name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Parameter::new(format!("{prefix}.{name}"), Tensor::kaiming_uniform(&[rows, cols], rows, rng))
        };
        let bias = |name: &str, cols: usize| {
            Parameter::new(format!("{prefix}.{name}"), Tensor::zeros(&[cols]))
        };
        Ok(MultiHeadAttention {
            wq: proj("wq", d_model, inner, rng),
            bq: bias("bq", inner),
            wk: proj("wk", d_model, inner, rng),
            bk: bias("bk", inner),
            wv: proj("wv", d_model, inner, rng),
            bv: bias("bv", inner),
            wo: proj("wo", inner, d_model, rng),
            bo: bias("bo", d_model),
            heads,
            head_dim,
            d_model,
        })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]
    }

    /// Attention from `q_src` [s_q, d_model] over `kv_src` [s_k, d_model].
    /// With `causal` set, s_q must equal s_k and position i never reads
    /// positions j > i.
    pub fn forward(
        &self,
        tape: &mut Tape,
        q_src: ValueId,
        k_src: ValueId,
        v_src: ValueId,
        causal: bool,
    ) -> Result<ValueId, StageError> {
        let sq = tape.shape(q_src).first().copied().unwrap_or(0);
        let sk = tape.shape(k_src).first().copied().unwrap_or(0);
        if causal && sq != sk {
            return Err(StageError::Config(format!(
                "causal attention needs square scores, got {sq} queries over {sk} keys"
            )));
        }
        let wq = tape.param(&self.wq);
        let bq = tape.param(&self.bq);
        let wk = tape.param(&self.wk);
        let bk = tape.param(&self.bk);
        let wv = tape.param(&self.wv);
        let bv = tape.param(&self.bv);
        let wo = tape.param(&self.wo);
        let bo = tape.param(&self.bo);

        let q = tape.linear(q_src, wq, bq)?;
        let k = tape.linear(k_src, wk, bk)?;
        let v = tape.linear(v_src, wv, bv)?;

        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * self.head_dim, self.head_dim)?;
            let kh = tape.slice(k, 1, h * self.head_dim, self.head_dim)?;
            let vh = tape.slice(v, 1, h * self.head_dim, self.head_dim)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let weights = if causal {
                tape.causal_softmax(scaled)?
            } else {
                tape.softmax_last(scaled)?
            };
            head_outs.push(tape.matmul(weights, vh)?);
        }
        let merged = tape.concat(&head_outs, 1)?;
        tape.linear(merged, wo, bo)
    }
}
