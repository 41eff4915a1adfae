//! Temporal sequence models (unidirectional LSTM and causal transformer),
//! the gaze prediction layer, the training objective, and gaze geometry.

pub mod geometry;
pub mod gpl;
pub mod loss;
pub mod lstm;
pub mod transformer;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::StageError;
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::Parameter;

pub use geometry::{angular_error_angles_deg, angular_error_deg, pitch_yaw_to_vec, vec_to_pitch_yaw};
pub use gpl::GazePredictionLayer;
pub use loss::{stage_loss, LossConfig, SequenceTerms};
pub use lstm::LstmStack;
pub use transformer::TransformerTsm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsmVariant {
    Lstm,
    Transformer,
}

impl TsmVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            TsmVariant::Lstm => "lstm",
            TsmVariant::Transformer => "tx",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TsmConfig {
    pub variant: TsmVariant,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    /// Debug flag: skip adding the learned temporal position embeddings.
    #[serde(default)]
    pub zero_position_embeddings: bool,
}

impl Default for TsmConfig {
    fn default() -> Self {
        TsmConfig {
            variant: TsmVariant::Lstm,
            hidden: 64,
            layers: 1,
            heads: 2,
            max_seq_len: 30,
            zero_position_embeddings: false,
        }
    }
}

impl TsmConfig {
    pub fn validate(&self) -> Result<(), StageError> {
        if self.hidden == 0 || self.layers == 0 {
            return Err(StageError::Config("TSM needs positive width and depth".into()));
        }
        if self.variant == TsmVariant::Transformer && self.hidden % self.heads.max(1) != 0 {
            return Err(StageError::Config(format!(
                "TSM width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum TsmInner {
    Lstm(LstmStack),
    Transformer(TransformerTsm),
}

/// The sequence model behind a per-timestep input layer norm. The SAM
/// embeddings are sums over h*w positions and land far outside the
/// recurrent gates' operating range; the norm is applied frame-locally, so
/// causality and the SAM output contracts are untouched.
#[derive(Debug, Clone)]
pub struct TsmModule {
    in_gamma: Parameter,
    in_beta: Parameter,
    inner: TsmInner,
}

impl TsmModule {
    pub fn new(cfg: &TsmConfig, d_in: usize, rng: &mut ChaCha8Rng) -> Result<Self, StageError> {
        cfg.validate()?;
        let inner = match cfg.variant {
            TsmVariant::Lstm => TsmInner::Lstm(LstmStack::new("tsm", d_in, cfg.hidden, cfg.layers, rng)?),
            TsmVariant::Transformer => TsmInner::Transformer(TransformerTsm::new(
                "tsm",
                d_in,
                cfg.hidden,
                cfg.layers,
                cfg.heads,
                cfg.max_seq_len,
                cfg.zero_position_embeddings,
                rng,
            )?),
        };
        Ok(TsmModule {
            in_gamma: Parameter::new("tsm.in_ln.gamma", crate::numerics::tensor::Tensor::ones(&[d_in])),
            in_beta: Parameter::new("tsm.in_ln.beta", crate::numerics::tensor::Tensor::zeros(&[d_in])),
            inner,
        })
    }

    pub fn forward(&self, tape: &mut Tape, z: ValueId) -> Result<ValueId, StageError> {
        let g = tape.param(&self.in_gamma);
        let b = tape.param(&self.in_beta);
        let zn = tape.layer_norm(z, g, b)?;
        match &self.inner {
            TsmInner::Lstm(l) => l.forward(tape, zn),
            TsmInner::Transformer(t) => t.forward(tape, zn),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.in_gamma, &self.in_beta];
        match &self.inner {
            TsmInner::Lstm(l) => out.extend(l.params()),
            TsmInner::Transformer(t) => out.extend(t.params()),
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut rest = match &mut self.inner {
            TsmInner::Lstm(l) => l.params_mut(),
            TsmInner::Transformer(t) => t.params_mut(),
        };
        let mut out = vec![&mut self.in_gamma, &mut self.in_beta];
        out.append(&mut rest);
        out
    }

    pub fn transformer_mut(&mut self) -> Option<&mut TransformerTsm> {
        match &mut self.inner {
            TsmInner::Transformer(t) => Some(t),
            TsmInner::Lstm(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fdcheck::{finite_diff_check, EvalResult, FD_EPS, FD_RTOL};
    use rand::{Rng, SeedableRng};

    #[test]
    fn transformer_width_must_split_across_heads() {
        let cfg = TsmConfig {
            variant: TsmVariant::Transformer,
            hidden: 6,
            heads: 4,
            ..TsmConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn both_variants_pass_fd_checks() {
        for variant in [TsmVariant::Lstm, TsmVariant::Transformer] {
            let cfg = TsmConfig { variant, hidden: 4, layers: 1, heads: 2, max_seq_len: 8, zero_position_embeddings: false };
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let tsm = TsmModule::new(&cfg, 3, &mut rng).unwrap();
            let z: Vec<f64> = (0..3 * 3).map(|_| rng.random::<f64>() - 0.5).collect();
            let params: Vec<Parameter> = tsm.params().into_iter().cloned().collect();
            let report = finite_diff_check(
                &params,
                |ps, want| {
                    let mut m = tsm.clone();
                    for (dst, src) in m.params_mut().into_iter().zip(ps.iter()) {
                        dst.tensor.data = src.tensor.data.clone();
                    }
                    let mut tape = Tape::new();
                    let zi = tape.constant(&[3, 3], z.clone()).unwrap();
                    let e = m.forward(&mut tape, zi).unwrap();
                    let sq = tape.mul(e, e).unwrap();
                    let loss = tape.sum_all(sq).unwrap();
                    let value = tape.data(loss)[0];
                    let grads = want.then(|| {
                        tape.backward(loss).unwrap();
                        tape.param_grads().into_iter().collect()
                    });
                    EvalResult { value, grads }
                },
                FD_EPS,
                FD_RTOL,
            );
            assert!(report.pass(), "{variant:?}: max rel err {}", report.max_rel_err);
        }
    }
}
