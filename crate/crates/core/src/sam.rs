//! Spatial attention over consecutive frame features: four attention
//! variants plus a concat baseline, each mapping a feature pair
//! (X_{t-1}, X_t) to a motion-informed embedding z_t = [v_prev; v_cur -
//! v_prev; v_cur].

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::StageError;
use crate::numerics::attention::MultiHeadAttention;
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamVariant {
    Dual,
    Cross,
    Hybrid,
    HybridDagger,
    ConcatResidual,
}

impl SamVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            SamVariant::Dual => "dual",
            SamVariant::Cross => "cross",
            SamVariant::Hybrid => "hybrid",
            SamVariant::HybridDagger => "hybrid_dagger",
            SamVariant::ConcatResidual => "concat_residual",
        }
    }

    /// Whether the variant exposes the pair of sigmoid attention maps.
    pub fn has_maps(&self) -> bool {
        matches!(self, SamVariant::Dual | SamVariant::Hybrid)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SamConfig {
    pub variant: SamVariant,
    /// Projection width for the token streams of cross/hybrid variants.
    pub d: usize,
    pub attn_heads: usize,
    /// Per-head width; defaults to d / attn_heads.
    pub attn_head_dim: Option<usize>,
    pub attn_layers: usize,
    pub dual_hidden: usize,
    /// Drop probability after the first dual conv (train mode only).
    pub dropout_p: f64,
    /// Group count for the group norm after the first dual conv.
    pub groups: usize,
    /// Debug flag: replace the sigmoid attention maps with ones, which
    /// reduces hybrid pooling to plain sum pooling.
    #[serde(default)]
    pub force_unit_attention: bool,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            variant: SamVariant::Hybrid,
            d: 64,
            attn_heads: 4,
            attn_head_dim: None,
            attn_layers: 2,
            dual_hidden: 64,
            dropout_p: 0.5,
            groups: 8,
            force_unit_attention: false,
        }
    }
}

impl SamConfig {
    pub fn validate(&self, k: usize) -> Result<(), StageError> {
        if k == 0 {
            return Err(StageError::Config("SAM input channel count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(StageError::Config(format!(
                "SAM dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        match self.variant {
            SamVariant::ConcatResidual => {}
            SamVariant::Dual => {
                if self.dual_hidden == 0 || self.groups == 0 || self.dual_hidden % self.groups != 0 {
                    return Err(StageError::Config(format!(
                        "dual hidden width {} must be divisible by {} groups",
                        self.dual_hidden, self.groups
                    )));
                }
            }
            SamVariant::Cross | SamVariant::Hybrid | SamVariant::HybridDagger => {
                if self.attn_head_dim.is_none() && self.d % self.attn_heads.max(1) != 0 {
                    return Err(StageError::Config(format!(
                        "SAM width {} not divisible by {} attention heads",
                        self.d, self.attn_heads
                    )));
                }
                if matches!(self.variant, SamVariant::Hybrid)
                    && (self.dual_hidden == 0 || self.groups == 0 || self.dual_hidden % self.groups != 0)
                {
                    return Err(StageError::Config(format!(
                        "dual hidden width {} must be divisible by {} groups",
                        self.dual_hidden, self.groups
                    )));
                }
            }
        }
        Ok(())
    }

    /// Width of z_t for backbone channel count k.
    pub fn out_width(&self, k: usize) -> usize {
        match self.variant {
            SamVariant::Dual => 3 * k,
            SamVariant::Cross | SamVariant::Hybrid | SamVariant::HybridDagger => 3 * self.d,
            SamVariant::ConcatResidual => 2 * k,
        }
    }
}

/// The two-conv sigmoid attention stack of the dual variant: group norm and
/// dropout sit after the first conv.
#[derive(Debug, Clone)]
pub(crate) struct DualAttention {
    conv1_w: Parameter,
    conv1_b: Parameter,
    gn_gamma: Parameter,
    gn_beta: Parameter,
    conv2_w: Parameter,
    conv2_b: Parameter,
    groups: usize,
    keep: f64,
    force_unit: bool,
}

impl DualAttention {
    fn new(prefix: &str, in_ch: usize, cfg: &SamConfig, rng: &mut ChaCha8Rng) -> Self {
        DualAttention {
            conv1_w: Parameter::new(
                format!("{prefix}.conv1.w"),
                Tensor::kaiming_uniform(&[1, 1, in_ch, cfg.dual_hidden], in_ch, rng),
            ),
            conv1_b: Parameter::new(format!("{prefix}.conv1.b"), Tensor::zeros(&[cfg.dual_hidden])),
            gn_gamma: Parameter::new(format!("{prefix}.gn.gamma"), Tensor::ones(&[cfg.dual_hidden])),
            gn_beta: Parameter::new(format!("{prefix}.gn.beta"), Tensor::zeros(&[cfg.dual_hidden])),
            conv2_w: Parameter::new(
                format!("{prefix}.conv2.w"),
                Tensor::kaiming_uniform(&[1, 1, cfg.dual_hidden, 1], cfg.dual_hidden, rng),
            ),
            conv2_b: Parameter::new(format!("{prefix}.conv2.b"), Tensor::zeros(&[1])),
            groups: cfg.groups,
            keep: 1.0 - cfg.dropout_p,
            force_unit: cfg.force_unit_attention,
        }
    }

    fn params(&self) -> Vec<&Parameter> {
        vec![&self.conv1_w, &self.conv1_b, &self.gn_gamma, &self.gn_beta, &self.conv2_w, &self.conv2_b]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.gn_gamma,
            &mut self.gn_beta,
            &mut self.conv2_w,
            &mut self.conv2_b,
        ]
    }

    /// [h, w, c_in] -> sigmoid map [h, w, 1].
    fn map(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId, StageError> {
        if self.force_unit {
            let (h, w) = (tape.shape(x)[0], tape.shape(x)[1]);
            return tape.constant(&[h, w, 1], vec![1.0; h * w]);
        }
        let w1 = tape.param(&self.conv1_w);
        let b1 = tape.param(&self.conv1_b);
        let g = tape.param(&self.gn_gamma);
        let be = tape.param(&self.gn_beta);
        let w2 = tape.param(&self.conv2_w);
        let b2 = tape.param(&self.conv2_b);
        let c1 = tape.conv2d(x, w1, 1, 0)?;
        let c1 = tape.add(c1, b1)?;
        let c1 = tape.group_norm(c1, g, be, self.groups)?;
        let c1 = tape.dropout(c1, self.keep)?;
        let r = tape.relu(c1);
        let c2 = tape.conv2d(r, w2, 1, 0)?;
        let c2 = tape.add(c2, b2)?;
        Ok(tape.sigmoid(c2))
    }
}

/// Conv projection to d channels plus learned 2-D position embeddings and a
/// stack of pre-norm residual cross-attention blocks.
#[derive(Debug, Clone)]
pub(crate) struct CrossStack {
    proj_w: Parameter,
    proj_b: Parameter,
    p2d: Parameter,
    blocks: Vec<CrossBlock>,
    h: usize,
    w: usize,
    d: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct CrossBlock {
    ln_q_gamma: Parameter,
    ln_q_beta: Parameter,
    ln_kv_gamma: Parameter,
    ln_kv_beta: Parameter,
    mha: MultiHeadAttention,
}

impl CrossStack {
    fn new(prefix: &str, k: usize, h: usize, w: usize, cfg: &SamConfig, rng: &mut ChaCha8Rng) -> Result<Self, StageError> {
        let d = cfg.d;
        let blocks = (0..cfg.attn_layers)
            .map(|i| {
                Ok(CrossBlock {
                    ln_q_gamma: Parameter::new(format!("{prefix}.block{i}.ln_q.gamma"), Tensor::ones(&[d])),
                    ln_q_beta: Parameter::new(format!("{prefix}.block{i}.ln_q.beta"), Tensor::zeros(&[d])),
                    ln_kv_gamma: Parameter::new(format!("{prefix}.block{i}.ln_kv.gamma"), Tensor::ones(&[d])),
                    ln_kv_beta: Parameter::new(format!("{prefix}.block{i}.ln_kv.beta"), Tensor::zeros(&[d])),
                    mha: MultiHeadAttention::new(
                        &format!("{prefix}.block{i}.attn"),
                        d,
                        cfg.attn_heads,
                        cfg.attn_head_dim,
                        rng,
                    )?,
                })
            })
            .collect::<Result<Vec<_>, StageError>>()?;
        Ok(CrossStack {
            proj_w: Parameter::new(
                format!("{prefix}.proj.w"),
                Tensor::kaiming_uniform(&[1, 1, k, d], k, rng),
            ),
            proj_b: Parameter::new(format!("{prefix}.proj.b"), Tensor::zeros(&[d])),
            p2d: Parameter::new(format!("{prefix}.p2d"), Tensor::normal(&[h, w, d], 0.02, rng)),
            blocks,
            h,
            w,
            d,
        })
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.proj_w, &self.proj_b, &self.p2d];
        for b in &self.blocks {
            out.extend([&b.ln_q_gamma, &b.ln_q_beta, &b.ln_kv_gamma, &b.ln_kv_beta]);
            out.extend(b.mha.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.proj_w, &mut self.proj_b, &mut self.p2d];
        for b in &mut self.blocks {
            out.push(&mut b.ln_q_gamma);
            out.push(&mut b.ln_q_beta);
            out.push(&mut b.ln_kv_gamma);
            out.push(&mut b.ln_kv_beta);
            out.extend(b.mha.params_mut());
        }
        out
    }

    /// Project a feature map to tokens: flatten(conv(X) + P_2d) of shape
    /// [h*w, d].
    fn tokens(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId, StageError> {
        let w = tape.param(&self.proj_w);
        let b = tape.param(&self.proj_b);
        let p = tape.param(&self.p2d);
        let c = tape.conv2d(x, w, 1, 0)?;
        let c = tape.add(c, b)?;
        let c = tape.add(c, p)?;
        tape.reshape(c, &[self.h * self.w, self.d])
    }

    /// Residual pre-norm cross-attention; keys/values stay fixed at `kv`
    /// (the pre-attention tokens) across all layers.
    fn attend(&self, tape: &mut Tape, x0: ValueId, kv: ValueId) -> Result<ValueId, StageError> {
        let mut x = x0;
        for b in &self.blocks {
            let gq = tape.param(&b.ln_q_gamma);
            let bq = tape.param(&b.ln_q_beta);
            let gkv = tape.param(&b.ln_kv_gamma);
            let bkv = tape.param(&b.ln_kv_beta);
            let qn = tape.layer_norm(x, gq, bq)?;
            let kvn = tape.layer_norm(kv, gkv, bkv)?;
            let att = b.mha.forward(tape, qn, kvn, kvn, false)?;
            x = tape.add(x, att)?;
        }
        Ok(x)
    }
}

/// Output of one pair step.
pub struct PairOutput {
    pub z: ValueId,
    /// (A_prev, A_cur), each [h, w, 1]; dual and hybrid only.
    pub maps: Option<(ValueId, ValueId)>,
}

/// Per-sequence SAM output.
pub struct SamSequenceOutput {
    /// [n, out_width]
    pub z: ValueId,
    /// Per-step sigmoid maps, length n.
    pub maps: Option<Vec<(ValueId, ValueId)>>,
}

#[derive(Debug, Clone)]
pub struct SamModule {
    pub cfg: SamConfig,
    k: usize,
    pub(crate) cross: Option<CrossStack>,
    pub(crate) dual: Option<DualAttention>,
}

impl SamModule {
    pub fn new(cfg: SamConfig, k: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Self, StageError> {
        cfg.validate(k)?;
        let (cross, dual) = match cfg.variant {
            SamVariant::Dual => (None, Some(DualAttention::new("sam.dual", 2 * k, &cfg, rng))),
            SamVariant::Cross => (Some(CrossStack::new("sam.cross", k, h, w, &cfg, rng)?), None),
            SamVariant::Hybrid => (
                Some(CrossStack::new("sam.cross", k, h, w, &cfg, rng)?),
                Some(DualAttention::new("sam.dual", 2 * cfg.d, &cfg, rng)),
            ),
            SamVariant::HybridDagger => (Some(CrossStack::new("sam.cross", k, h, w, &cfg, rng)?), None),
            SamVariant::ConcatResidual => (None, None),
        };
        Ok(SamModule { cfg, k, cross, dual })
    }

    pub fn out_width(&self) -> usize {
        self.cfg.out_width(self.k)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        if let Some(c) = &self.cross {
            out.extend(c.params());
        }
        if let Some(d) = &self.dual {
            out.extend(d.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        if let Some(c) = &mut self.cross {
            out.extend(c.params_mut());
        }
        if let Some(d) = &mut self.dual {
            out.extend(d.params_mut());
        }
        out
    }

    fn check_pair(&self, tape: &Tape, xp: ValueId, xc: ValueId) -> Result<(), StageError> {
        let (sp, sc) = (tape.shape(xp), tape.shape(xc));
        if sp != sc || sp.len() != 3 || sp[2] != self.k {
            return Err(StageError::ShapeMismatch {
                op: "sam_pair",
                lhs: sp.to_vec(),
                rhs: sc.to_vec(),
            });
        }
        Ok(())
    }

    /// z_t from one consecutive pair.
    pub fn forward_pair(&self, tape: &mut Tape, xp: ValueId, xc: ValueId) -> Result<PairOutput, StageError> {
        self.check_pair(tape, xp, xc)?;
        match self.cfg.variant {
            SamVariant::Dual => self.dual_pair(tape, xp, xc),
            SamVariant::Cross => self.cross_pair(tape, xp, xc),
            SamVariant::Hybrid => self.hybrid_pair(tape, xp, xc),
            SamVariant::HybridDagger => self.dagger_pair(tape, xp, xc),
            SamVariant::ConcatResidual => self.concat_residual_pair(tape, xp, xc),
        }
    }

    fn triple(&self, tape: &mut Tape, v_prev: ValueId, v_cur: ValueId) -> Result<ValueId, StageError> {
        let mid = tape.sub(v_cur, v_prev)?;
        tape.concat(&[v_prev, mid, v_cur], 0)
    }

    /// Attention-pooled feature vector: sum_{h,w} A (.) X.
    fn pool(&self, tape: &mut Tape, a: ValueId, x: ValueId) -> Result<ValueId, StageError> {
        let weighted = tape.mul(x, a)?;
        tape.sum_axes(weighted, &[0, 1])
    }

    fn dual_pair(&self, tape: &mut Tape, xp: ValueId, xc: ValueId) -> Result<PairOutput, StageError> {
        let dual = self.dual.as_ref().expect("dual variant has a dual stack");
        let diff = tape.sub(xc, xp)?;
        let xpp = tape.concat(&[xp, diff], 2)?;
        let xcp = tape.concat(&[xc, diff], 2)?;
        let a_p = dual.map(tape, xpp)?;
        let a_c = dual.map(tape, xcp)?;
        let v_p = self.pool(tape, a_p, xp)?;
        let v_c = self.pool(tape, a_c, xc)?;
        let z = self.triple(tape, v_p, v_c)?;
        Ok(PairOutput { z, maps: Some((a_p, a_c)) })
    }

    fn cross_pair(&self, tape: &mut Tape, xp: ValueId, xc: ValueId) -> Result<PairOutput, StageError> {
        let cross = self.cross.as_ref().expect("cross variant has a token stack");
        let tp0 = cross.tokens(tape, xp)?;
        let tc0 = cross.tokens(tape, xc)?;
        // queries from one frame, keys/values from the *other* frame's
        // pre-attention tokens
        let tp = cross.attend(tape, tp0, tc0)?;
        let tc = cross.attend(tape, tc0, tp0)?;
        let v_p = tape.sum_axes(tp, &[0])?;
        let v_c = tape.sum_axes(tc, &[0])?;
        let z = self.triple(tape, v_p, v_c)?;
        Ok(PairOutput { z, maps: None })
    }

    fn hybrid_streams(
        &self,
        tape: &mut Tape,
        xp: ValueId,
        xc: ValueId,
    ) -> Result<(ValueId, ValueId), StageError> {
        let cross = self.cross.as_ref().expect("hybrid variant has a token stack");
        let tp0 = cross.tokens(tape, xp)?;
        let tc0 = cross.tokens(tape, xc)?;
        // the position embeddings cancel in this difference
        let diff = tape.sub(tc0, tp0)?;
        let tp = cross.attend(tape, tp0, diff)?;
        let tc = cross.attend(tape, tc0, diff)?;
        Ok((tp, tc))
    }

    fn hybrid_pair(&self, tape: &mut Tape, xp: ValueId, xc: ValueId) -> Result<PairOutput, StageError> {
        let cross = self.cross.as_ref().expect("hybrid variant has a token stack");
        let dual = self.dual.as_ref().expect("hybrid variant has a dual stack");
        let (tp, tc) = self.hybrid_streams(tape, xp, xc)?;
        let (h, w, d) = (cross.h, cross.w, cross.d);
        let mp = tape.reshape(tp, &[h, w, d])?;
        let mc = tape.reshape(tc, &[h, w, d])?;
        let mdiff = tape.sub(mc, mp)?;
        let xpp = tape.concat(&[mp, mdiff], 2)?;
        let xcp = tape.concat(&[mc, mdiff], 2)?;
        let a_p = dual.map(tape, xpp)?;
        let a_c = dual.map(tape, xcp)?;
        let v_p = self.pool(tape, a_p, mp)?;
        let v_c = self.pool(tape, a_c, mc)?;
        let z = self.triple(tape, v_p, v_c)?;
        Ok(PairOutput { z, maps: Some((a_p, a_c)) })
    }

    fn dagger_pair(&self, tape: &mut Tape, xp: ValueId, xc: ValueId) -> Result<PairOutput, StageError> {
        let (tp, tc) = self.hybrid_streams(tape, xp, xc)?;
        let v_p = tape.sum_axes(tp, &[0])?;
        let v_c = tape.sum_axes(tc, &[0])?;
        let z = self.triple(tape, v_p, v_c)?;
        Ok(PairOutput { z, maps: None })
    }

    fn concat_residual_pair(&self, tape: &mut Tape, xp: ValueId, xc: ValueId) -> Result<PairOutput, StageError> {
        let diff = tape.sub(xc, xp)?;
        let v_c = tape.sum_axes(xc, &[0, 1])?;
        let v_d = tape.sum_axes(diff, &[0, 1])?;
        let z = tape.concat(&[v_c, v_d], 0)?;
        Ok(PairOutput { z, maps: None })
    }

    /// Apply the shared pair step along a feature sequence. The first frame
    /// is paired with itself (zero-motion padding) so the output keeps
    /// length n.
    pub fn forward_sequence(&self, tape: &mut Tape, feats: &[ValueId]) -> Result<SamSequenceOutput, StageError> {
        let n = feats.len();
        if n < 2 {
            return Err(StageError::Config(format!(
                "SAM needs a sequence of at least 2 frames, got {n}"
            )));
        }
        let mut rows = Vec::with_capacity(n);
        let mut maps = self.cfg.variant.has_maps().then(Vec::new);
        let width = self.out_width();
        for t in 0..n {
            let (xp, xc) = if t == 0 { (feats[0], feats[0]) } else { (feats[t - 1], feats[t]) };
            let out = self.forward_pair(tape, xp, xc)?;
            rows.push(tape.reshape(out.z, &[1, width])?);
            if let (Some(ms), Some(pair)) = (&mut maps, out.maps) {
                ms.push(pair);
            }
        }
        let z = tape.concat(&rows, 0)?;
        Ok(SamSequenceOutput { z, maps })
    }
}
