//! Shared per-frame CNN feature extractor: a ladder of stride-2 conv +
//! group-norm + relu stages mapping [h0, w0, 3] frames to [h, w, k] feature
//! maps, applied independently to every timestep.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::StageError;
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BackboneConfig {
    pub image_size: (usize, usize),
    /// Output channels per stride-2 stage; the last entry is k.
    pub channels_per_stage: Vec<usize>,
    pub out_spatial: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: (64, 64),
            channels_per_stage: vec![8, 16, 32],
            out_spatial: (8, 8),
        }
    }
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        *self.channels_per_stage.last().unwrap_or(&0)
    }

    /// The stage ladder must downsample image_size to exactly out_spatial.
    pub fn validate(&self) -> Result<(), StageError> {
        if self.channels_per_stage.is_empty() {
            return Err(StageError::Config("backbone needs at least one stage".into()));
        }
        let (mut h, mut w) = self.image_size;
        for _ in &self.channels_per_stage {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        if (h, w) != self.out_spatial {
            return Err(StageError::Config(format!(
                "backbone ladder of {} stride-2 stages maps {:?} to {:?}, config says {:?}",
                self.channels_per_stage.len(),
                self.image_size,
                (h, w),
                self.out_spatial
            )));
        }
        Ok(())
    }
}

fn pick_groups(channels: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap()
}

#[derive(Debug, Clone)]
struct Stage {
    conv_w: Parameter,
    conv_b: Parameter,
    gn_gamma: Parameter,
    gn_beta: Parameter,
    groups: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self, StageError> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in cfg.channels_per_stage.iter().enumerate() {
            let fan_in = 3 * 3 * in_ch;
            stages.push(Stage {
                conv_w: Parameter::new(
                    format!("backbone.stage{i}.conv.w"),
                    Tensor::kaiming_uniform(&[3, 3, in_ch, out_ch], fan_in, rng),
                ),
                conv_b: Parameter::new(format!("backbone.stage{i}.conv.b"), Tensor::zeros(&[out_ch])),
                gn_gamma: Parameter::new(format!("backbone.stage{i}.gn.gamma"), Tensor::ones(&[out_ch])),
                gn_beta: Parameter::new(format!("backbone.stage{i}.gn.beta"), Tensor::zeros(&[out_ch])),
                groups: pick_groups(out_ch),
            });
            in_ch = out_ch;
        }
        Ok(Backbone { cfg, stages })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.stages
            .iter()
            .flat_map(|s| vec![&s.conv_w, &s.conv_b, &s.gn_gamma, &s.gn_beta])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.stages
            .iter_mut()
            .flat_map(|s| vec![&mut s.conv_w, &mut s.conv_b, &mut s.gn_gamma, &mut s.gn_beta])
            .collect()
    }

    /// One frame [h0, w0, 3] -> [h, w, k].
    pub fn forward_frame(&self, tape: &mut Tape, frame: ValueId) -> Result<ValueId, StageError> {
        let shape = tape.shape(frame).to_vec();
        if shape != [self.cfg.image_size.0, self.cfg.image_size.1, 3] {
            return Err(StageError::ShapeMismatch {
                op: "backbone",
                lhs: shape,
                rhs: vec![self.cfg.image_size.0, self.cfg.image_size.1, 3],
            });
        }
        let mut x = frame;
        for s in &self.stages {
            let w = tape.param(&s.conv_w);
            let b = tape.param(&s.conv_b);
            let g = tape.param(&s.gn_gamma);
            let be = tape.param(&s.gn_beta);
            let c = tape.conv2d(x, w, 2, 1)?;
            let c = tape.add(c, b)?;
            let c = tape.group_norm(c, g, be, s.groups)?;
            x = tape.relu(c);
        }
        Ok(x)
    }

    /// All frames of a sequence [n, h0, w0, 3] -> per-frame [h, w, k] ids.
    /// Weights are shared across timestamps; each frame is processed in
    /// isolation, so permuting frames permutes outputs identically.
    pub fn extract_features(&self, tape: &mut Tape, frames: ValueId) -> Result<Vec<ValueId>, StageError> {
        let shape = tape.shape(frames).to_vec();
        if shape.len() != 4 {
            return Err(StageError::ShapeMismatch {
                op: "backbone",
                lhs: shape,
                rhs: vec![0, self.cfg.image_size.0, self.cfg.image_size.1, 3],
            });
        }
        let n = shape[0];
        let (h0, w0) = (shape[1], shape[2]);
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            let f = tape.slice(frames, 0, t, 1)?;
            let f = tape.reshape(f, &[h0, w0, shape[3]])?;
            out.push(self.forward_frame(tape, f)?);
        }
        Ok(out)
    }
}

/// Row-major flattening of a feature map to a vector of length h*w*k.
pub fn flatten_features(x: &Tensor) -> Vec<f64> {
    x.data.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fdcheck::{finite_diff_check, EvalResult, FD_EPS, FD_RTOL};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            image_size: (16, 16),
            channels_per_stage: vec![4, 6],
            out_spatial: (4, 4),
        }
    }

    #[test]
    fn ladder_must_land_on_out_spatial() {
        let bad = BackboneConfig {
            image_size: (64, 64),
            channels_per_stage: vec![8, 16],
            out_spatial: (8, 8),
        };
        assert!(bad.validate().is_err());
        BackboneConfig::default().validate().unwrap();
    }

    #[test]
    fn default_shape_contract_is_n_8_8_32() {
        let bb = Backbone::new(BackboneConfig::default(), &mut rng(0)).unwrap();
        let mut tape = Tape::new();
        let frames = tape.leaf(&Tensor::zeros(&[2, 64, 64, 3]));
        let feats = bb.extract_features(&mut tape, frames).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(tape.shape(feats[0]), &[8, 8, 32]);
    }

    #[test]
    fn identical_frames_give_identical_features() {
        let bb = Backbone::new(tiny_cfg(), &mut rng(1)).unwrap();
        let mut r = rng(2);
        let one: Vec<f64> = (0..16 * 16 * 3).map(|_| r.random::<f64>()).collect();
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let mut tape = Tape::new();
        let frames = tape
            .constant(&[2, 16, 16, 3], two)
            .unwrap();
        let feats = bb.extract_features(&mut tape, frames).unwrap();
        assert_eq!(tape.data(feats[0]), tape.data(feats[1]));
    }

    #[test]
    fn frame_permutation_permutes_outputs() {
        let bb = Backbone::new(tiny_cfg(), &mut rng(3)).unwrap();
        let mut r = rng(4);
        let a: Vec<f64> = (0..16 * 16 * 3).map(|_| r.random::<f64>()).collect();
        let b: Vec<f64> = (0..16 * 16 * 3).map(|_| r.random::<f64>()).collect();
        let run = |frames: Vec<f64>| {
            let mut tape = Tape::new();
            let f = tape.constant(&[2, 16, 16, 3], frames).unwrap();
            let feats = bb.extract_features(&mut tape, f).unwrap();
            (tape.data(feats[0]).to_vec(), tape.data(feats[1]).to_vec())
        };
        let mut ab = a.clone();
        ab.extend_from_slice(&b);
        let mut ba = b.clone();
        ba.extend_from_slice(&a);
        let (fa, fb) = run(ab);
        let (gb, ga) = run(ba);
        assert_eq!(fa, ga);
        assert_eq!(fb, gb);
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let bb = Backbone::new(tiny_cfg(), &mut rng(5)).unwrap();
        let mut tape = Tape::new();
        let frames = tape.leaf(&Tensor::zeros(&[2, 8, 8, 3]));
        assert!(bb.extract_features(&mut tape, frames).is_err());
    }

    #[test]
    fn flatten_round_trip_and_length() {
        let t = Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        let v = flatten_features(&t);
        assert_eq!(v.len(), 12);
        let back = Tensor::new(vec![2, 2, 3], v).unwrap();
        assert_eq!(back.data, t.data);
    }

    #[test]
    fn backbone_gradients_pass_fd() {
        let cfg = BackboneConfig {
            image_size: (16, 16),
            channels_per_stage: vec![3],
            out_spatial: (8, 8),
        };
        let bb = Backbone::new(cfg, &mut rng(6)).unwrap();
        let mut r = rng(7);
        let frame: Vec<f64> = (0..16 * 16 * 3).map(|_| r.random::<f64>()).collect();
        let params: Vec<Parameter> = bb.params().into_iter().cloned().collect();
        let report = finite_diff_check(
            &params,
            |ps, want| {
                let mut bb2 = bb.clone();
                for (dst, src) in bb2.params_mut().into_iter().zip(ps.iter()) {
                    dst.tensor.data = src.tensor.data.clone();
                }
                let mut tape = Tape::new();
                let f = tape.constant(&[16, 16, 3], frame.clone()).unwrap();
                let out = bb2.forward_frame(&mut tape, f).unwrap();
                let sq = tape.mul(out, out).unwrap();
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
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }
}
