//! The full pipeline: backbone -> spatial attention -> temporal model ->
//! gaze prediction layer, plus the batch loss used in training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::backbone::{Backbone, BackboneConfig};
use crate::datagen::VideoSequence;
use crate::error::StageError;
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::{Parameter, Tensor};
use crate::sam::{SamConfig, SamModule};
use crate::tsm::{
    stage_loss, GazePredictionLayer, LossConfig, SequenceTerms, TsmConfig, TsmModule,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub sam: SamConfig,
    pub tsm: TsmConfig,
    pub loss: LossConfig,
}

impl ModelConfig {
    /// All width consistency is checked here, before any compute.
    pub fn validate(&self) -> Result<(), StageError> {
        self.backbone.validate()?;
        self.sam.validate(self.backbone.out_channels())?;
        self.tsm.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// Tape-level forward output of one sequence.
pub struct StageOutput {
    /// [n, 2] predicted (pitch, yaw).
    pub gaze: ValueId,
    /// [n, 2] predicted PoG when the model carries the head.
    pub pog: Option<ValueId>,
    /// Per-step sigmoid attention maps (dual/hybrid variants).
    pub maps: Option<Vec<(ValueId, ValueId)>>,
}

/// Plain-data prediction for one sequence.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub gaze: Vec<[f64; 2]>,
    pub pog: Option<Vec<[f64; 2]>>,
    /// Per-step (A_prev, A_cur) maps, each [h, w, 1].
    pub maps: Option<Vec<(Tensor, Tensor)>>,
}

#[derive(Debug, Clone)]
pub struct StageModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub sam: SamModule,
    pub tsm: TsmModule,
    pub gpl: GazePredictionLayer,
}

impl StageModel {
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self, StageError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(cfg.backbone.clone(), &mut rng)?;
        let k = cfg.backbone.out_channels();
        let (h, w) = cfg.backbone.out_spatial;
        let sam = SamModule::new(cfg.sam.clone(), k, h, w, &mut rng)?;
        let tsm = TsmModule::new(&cfg.tsm, sam.out_width(), &mut rng)?;
        let gpl = GazePredictionLayer::new("gpl", cfg.tsm.hidden, cfg.loss.lambda > 0.0, &mut rng);
        let model = StageModel { cfg, backbone, sam, tsm, gpl };
        model.check_unique_names()?;
        Ok(model)
    }

    fn check_unique_names(&self) -> Result<(), StageError> {
        let mut seen = HashSet::new();
        for p in self.params() {
            if !seen.insert(p.name.clone()) {
                return Err(StageError::Config(format!("duplicate parameter name {}", p.name)));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.backbone.params();
        out.extend(self.sam.params());
        out.extend(self.tsm.params());
        out.extend(self.gpl.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.backbone.params_mut();
        out.extend(self.sam.params_mut());
        out.extend(self.tsm.params_mut());
        out.extend(self.gpl.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Load a parameter blob by checkpoint slot name.
    pub fn set_param(&mut self, name: &str, data: Vec<f64>) -> Result<(), StageError> {
        for p in self.params_mut() {
            if p.name == name {
                if p.tensor.data.len() != data.len() {
                    return Err(StageError::Data(format!(
                        "parameter {name}: checkpoint blob has {} values, model expects {}",
                        data.len(),
                        p.tensor.data.len()
                    )));
                }
                p.tensor.data = data;
                return Ok(());
            }
        }
        Err(StageError::Data(format!("parameter {name} not present in this model")))
    }

    /// Forward one sequence already on a tape.
    pub fn forward(&self, tape: &mut Tape, frames: &Tensor) -> Result<StageOutput, StageError> {
        let f = tape.leaf(frames);
        let feats = self.backbone.extract_features(tape, f)?;
        let sam_out = self.sam.forward_sequence(tape, &feats)?;
        let e = self.tsm.forward(tape, sam_out.z)?;
        let (gaze, pog) = self.gpl.forward(tape, e)?;
        Ok(StageOutput { gaze, pog, maps: sam_out.maps })
    }

    /// Deterministic eval-mode prediction.
    pub fn predict(&self, frames: &Tensor) -> Result<Prediction, StageError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, frames)?;
        let gaze = tape
            .data(out.gaze)
            .chunks_exact(2)
            .map(|c| [c[0], c[1]])
            .collect();
        let pog = out
            .pog
            .map(|p| tape.data(p).chunks_exact(2).map(|c| [c[0], c[1]]).collect());
        let maps = out.maps.map(|ms| {
            ms.into_iter()
                .map(|(a, b)| (tape.to_tensor(a), tape.to_tensor(b)))
                .collect()
        });
        Ok(Prediction { gaze, pog, maps })
    }

    /// Eval-mode flattened backbone features per frame (the GP feature map).
    pub fn frame_features(&self, frames: &Tensor) -> Result<Vec<Vec<f64>>, StageError> {
        let mut tape = Tape::new();
        let f = tape.leaf(frames);
        let feats = self.backbone.extract_features(&mut tape, f)?;
        Ok(feats.into_iter().map(|id| tape.data(id).to_vec()).collect())
    }

    /// Batch loss per the training objective over whole sequences.
    pub fn loss_on_batch(&self, tape: &mut Tape, batch: &[&VideoSequence]) -> Result<ValueId, StageError> {
        let mut terms = Vec::with_capacity(batch.len());
        for seq in batch {
            let out = self.forward(tape, &seq.frames)?;
            terms.push(SequenceTerms {
                pred_gaze: out.gaze,
                true_gaze: seq.gaze.clone(),
                pred_pog: out.pog,
                true_pog: seq.pog.clone(),
            });
        }
        stage_loss(tape, &terms, &self.cfg.loss)
    }

    /// Consume into an inference-only wrapper.
    pub fn freeze(self) -> FrozenModel {
        FrozenModel { model: self }
    }
}

/// Inference-only model: the type carries the "frozen base" guarantee the
/// personalization path relies on.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    model: StageModel,
}

impl FrozenModel {
    pub fn predict(&self, frames: &Tensor) -> Result<Prediction, StageError> {
        self.model.predict(frames)
    }

    pub fn frame_features(&self, frames: &Tensor) -> Result<Vec<Vec<f64>>, StageError> {
        self.model.frame_features(frames)
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    pub fn feature_dim(&self) -> usize {
        let (h, w) = self.model.cfg.backbone.out_spatial;
        h * w * self.model.cfg.backbone.out_channels()
    }
}
