//! Causal transformer decoder: learned temporal position embeddings,
//! pre-norm residual blocks of masked multi-head attention and an MLP, and
//! a final layer norm over the output sequence.

use rand_chacha::ChaCha8Rng;

use crate::error::StageError;
use crate::numerics::attention::MultiHeadAttention;
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::{Parameter, Tensor};

#[derive(Debug, Clone)]
struct Block {
    ln1_gamma: Parameter,
    ln1_beta: Parameter,
    mha: MultiHeadAttention,
    ln2_gamma: Parameter,
    ln2_beta: Parameter,
    fc1_w: Parameter,
    fc1_b: Parameter,
    fc2_w: Parameter,
    fc2_b: Parameter,
}

#[derive(Debug, Clone)]
pub struct TransformerTsm {
    in_w: Parameter,
    in_b: Parameter,
    pos: Parameter,
    blocks: Vec<Block>,
    final_gamma: Parameter,
    final_beta: Parameter,
    d_t: usize,
    max_seq_len: usize,
    zero_pos: bool,
}

impl TransformerTsm {
    pub fn new(
        prefix: &str,
        d_in: usize,
        d_t: usize,
        layers: usize,
        heads: usize,
        max_seq_len: usize,
        zero_pos: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, StageError> {
        if d_t % heads.max(1) != 0 {
            return Err(StageError::Config(format!(
                "TSM width {d_t} not divisible by {heads} heads"
            )));
        }
        if layers == 0 {
            return Err(StageError::Config("transformer TSM needs at least one layer".into()));
        }
        let mlp = 4 * d_t;
        let blocks = (0..layers)
            .map(|i| {
                Ok(Block {
                    ln1_gamma: Parameter::new(format!("{prefix}.block{i}.ln1.gamma"), Tensor::ones(&[d_t])),
                    ln1_beta: Parameter::new(format!("{prefix}.block{i}.ln1.beta"), Tensor::zeros(&[d_t])),
                    mha: MultiHeadAttention::new(&format!("{prefix}.block{i}.attn"), d_t, heads, None, rng)?,
                    ln2_gamma: Parameter::new(format!("{prefix}.block{i}.ln2.gamma"), Tensor::ones(&[d_t])),
                    ln2_beta: Parameter::new(format!("{prefix}.block{i}.ln2.beta"), Tensor::zeros(&[d_t])),
                    fc1_w: Parameter::new(
                        format!("{prefix}.block{i}.mlp.fc1.w"),
                        Tensor::kaiming_uniform(&[d_t, mlp], d_t, rng),
                    ),
                    fc1_b: Parameter::new(format!("{prefix}.block{i}.mlp.fc1.b"), Tensor::zeros(&[mlp])),
                    fc2_w: Parameter::new(
                        format!("{prefix}.block{i}.mlp.fc2.w"),
                        Tensor::kaiming_uniform(&[mlp, d_t], mlp, rng),
                    ),
                    fc2_b: Parameter::new(format!("{prefix}.block{i}.mlp.fc2.b"), Tensor::zeros(&[d_t])),
                })
            })
            .collect::<Result<Vec<_>, StageError>>()?;
        Ok(TransformerTsm {
            in_w: Parameter::new(format!("{prefix}.in.w"), Tensor::kaiming_uniform(&[d_in, d_t], d_in, rng)),
            in_b: Parameter::new(format!("{prefix}.in.b"), Tensor::zeros(&[d_t])),
            pos: Parameter::new(format!("{prefix}.pos"), Tensor::normal(&[max_seq_len, d_t], 0.02, rng)),
            blocks,
            final_gamma: Parameter::new(format!("{prefix}.final_ln.gamma"), Tensor::ones(&[d_t])),
            final_beta: Parameter::new(format!("{prefix}.final_ln.beta"), Tensor::zeros(&[d_t])),
            d_t,
            max_seq_len,
            zero_pos,
        })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.in_w, &self.in_b, &self.pos];
        for b in &self.blocks {
            out.extend([&b.ln1_gamma, &b.ln1_beta]);
            out.extend(b.mha.params());
            out.extend([&b.ln2_gamma, &b.ln2_beta, &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b]);
        }
        out.extend([&self.final_gamma, &self.final_beta]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.in_w, &mut self.in_b, &mut self.pos];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gamma);
            out.push(&mut b.ln1_beta);
            out.extend(b.mha.params_mut());
            out.push(&mut b.ln2_gamma);
            out.push(&mut b.ln2_beta);
            out.push(&mut b.fc1_w);
            out.push(&mut b.fc1_b);
            out.push(&mut b.fc2_w);
            out.push(&mut b.fc2_b);
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }

    /// [n, d_in] -> [n, d_t], strictly causal.
    pub fn forward(&self, tape: &mut Tape, z: ValueId) -> Result<ValueId, StageError> {
        let n = tape.shape(z)[0];
        if n > self.max_seq_len {
            return Err(StageError::Config(format!(
                "sequence of {n} frames exceeds max_seq_len {}",
                self.max_seq_len
            )));
        }
        let in_w = tape.param(&self.in_w);
        let in_b = tape.param(&self.in_b);
        let mut x = tape.linear(z, in_w, in_b)?;
        if !self.zero_pos {
            let pos = tape.param(&self.pos);
            let p = tape.slice(pos, 0, 0, n)?;
            x = tape.add(x, p)?;
        }
        for b in &self.blocks {
            let g1 = tape.param(&b.ln1_gamma);
            let b1 = tape.param(&b.ln1_beta);
            let normed = tape.layer_norm(x, g1, b1)?;
            let att = b.mha.forward(tape, normed, normed, normed, true)?;
            x = tape.add(x, att)?;
            let g2 = tape.param(&b.ln2_gamma);
            let b2 = tape.param(&b.ln2_beta);
            let normed = tape.layer_norm(x, g2, b2)?;
            let w1 = tape.param(&b.fc1_w);
            let bb1 = tape.param(&b.fc1_b);
            let w2 = tape.param(&b.fc2_w);
            let bb2 = tape.param(&b.fc2_b);
            let h = tape.linear(normed, w1, bb1)?;
            let h = tape.relu(h);
            let m = tape.linear(h, w2, bb2)?;
            x = tape.add(x, m)?;
        }
        let g = tape.param(&self.final_gamma);
        let b = tape.param(&self.final_beta);
        tape.layer_norm(x, g, b)
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn position_embedding_mut(&mut self) -> &mut Parameter {
        &mut self.pos
    }
}
