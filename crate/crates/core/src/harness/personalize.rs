//! Few-shot personalization workflow: GP pre-training on the base model's
//! training pool, repeated shot resampling, adaptation, and before/after
//! reporting with the uncertainty curve.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, VideoSequence};
use crate::error::StageError;
use crate::gp::{
    collect_residuals, gp_adapt, gp_pretrain, uncertainty_sorted_mae, AdaptOpts, GpHyperparams,
    PersonSamples, PersonalizedPredictor, PretrainOpts, UncertaintyCurve,
};
use crate::model::FrozenModel;
use crate::tsm::angular_error_angles_deg;

/// Reference context for reports: the large-scale 3-shot gain on EyeDiap.
pub const REFERENCE_THREE_SHOT_GAIN_DEG: f64 = 0.8;

pub const GP_ARTIFACT_VERSION: u32 = 1;

/// Pre-trained hyperparameters for both components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainedGps {
    pub format_version: u32,
    pub pitch: GpHyperparams,
    pub yaw: GpHyperparams,
}

impl PretrainedGps {
    pub fn save(&self, path: &Path) -> Result<(), StageError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string(self).unwrap())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StageError::Data(format!("cannot read GP artifact {}: {e}", path.display())))?;
        let out: PretrainedGps = serde_json::from_str(&text)
            .map_err(|e| StageError::Data(format!("corrupt GP artifact {}: {e}", path.display())))?;
        if out.format_version != GP_ARTIFACT_VERSION {
            return Err(StageError::Data(format!(
                "GP artifact version {} unsupported",
                out.format_version
            )));
        }
        Ok(out)
    }
}

/// Per-person personalization artifact: hyperparameters plus the
/// conditioning set, versioned alongside model checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonalizationArtifact {
    pub format_version: u32,
    pub person_id: String,
    pub pitch_hyper: GpHyperparams,
    pub yaw_hyper: GpHyperparams,
    pub features: Vec<Vec<f64>>,
    pub pitch_targets: Vec<f64>,
    pub yaw_targets: Vec<f64>,
}

impl PersonalizationArtifact {
    pub fn from_predictor(pp: &PersonalizedPredictor, person_id: &str) -> Self {
        PersonalizationArtifact {
            format_version: GP_ARTIFACT_VERSION,
            person_id: person_id.to_string(),
            pitch_hyper: pp.gp_pitch.hyper.clone(),
            yaw_hyper: pp.gp_yaw.hyper.clone(),
            features: pp.gp_pitch.features.clone(),
            pitch_targets: pp.gp_pitch.targets.clone(),
            yaw_targets: pp.gp_yaw.targets.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), StageError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string(self).unwrap())?;
        Ok(())
    }
}

/// Optimize both component GPs on the base model's training-pool residuals.
pub fn pretrain_gps(
    base: &FrozenModel,
    pool: &[VideoSequence],
    opts: &PretrainOpts,
) -> Result<PretrainedGps, StageError> {
    let pool_refs: Vec<&VideoSequence> = pool.iter().collect();
    let samples = collect_residuals(base, &pool_refs)?;
    let init_p = GpHyperparams::init_from_data(&samples.features, &samples.pitch_residuals);
    let init_y = GpHyperparams::init_from_data(&samples.features, &samples.yaw_residuals);
    let pitch = gp_pretrain(&samples.features, &samples.pitch_residuals, init_p, opts)?;
    let yaw = gp_pretrain(
        &samples.features,
        &samples.yaw_residuals,
        init_y,
        &PretrainOpts { seed: opts.seed ^ 0x5a5a, ..opts.clone() },
    )?;
    Ok(PretrainedGps { format_version: GP_ARTIFACT_VERSION, pitch, yaw })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonalizeReport {
    pub person_id: String,
    pub shots: usize,
    pub resamplings: usize,
    pub before_mean_deg: f64,
    pub before_stderr_deg: f64,
    pub after_mean_deg: f64,
    pub after_stderr_deg: f64,
    pub improved_resamplings: usize,
    pub uncertainty_curve: UncertaintyCurve,
    pub reference_three_shot_gain_deg: f64,
    pub note: String,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n.max(1.0);
    (mean, (var / n.max(1.0)).sqrt())
}

/// One adaptation for a fixed shot selection; returns the predictor and the
/// before/after errors on the person's held-out frames.
pub fn adapt_once(
    base: &FrozenModel,
    pretrained: &PretrainedGps,
    person_seqs: &[&VideoSequence],
    shot_frames: &[(usize, usize)],
    adapt_opts: &AdaptOpts,
) -> Result<(PersonalizedPredictor, f64, f64), StageError> {
    // collect residuals once per sequence, then split by frame selection
    let all = collect_residuals(base, person_seqs)?;
    let mut flat_index = std::collections::HashMap::new();
    let mut flat = 0usize;
    for (si, seq) in person_seqs.iter().enumerate() {
        for t in 0..seq.n() {
            flat_index.insert((si, t), flat);
            flat += 1;
        }
    }
    let selected: Vec<usize> = shot_frames
        .iter()
        .map(|k| {
            flat_index
                .get(k)
                .copied()
                .ok_or_else(|| StageError::Usage(format!("shot frame {k:?} outside the person's data")))
        })
        .collect::<Result<_, _>>()?;
    let samples = PersonSamples {
        features: selected.iter().map(|&i| all.features[i].clone()).collect(),
        pitch_residuals: selected.iter().map(|&i| all.pitch_residuals[i]).collect(),
        yaw_residuals: selected.iter().map(|&i| all.yaw_residuals[i]).collect(),
    };
    let pp = gp_adapt(&pretrained.pitch, &pretrained.yaw, base.clone(), samples, adapt_opts)?;

    let mut before = Vec::new();
    let mut after = Vec::new();
    for (si, seq) in person_seqs.iter().enumerate() {
        let base_pred = base.predict(&seq.frames)?;
        let pers = pp.predict(seq)?;
        for t in 0..seq.n() {
            if selected.contains(&flat_index[&(si, t)]) {
                continue; // held-in shots are excluded from the report
            }
            before.push(angular_error_angles_deg(&base_pred.gaze[t], &seq.gaze[t]));
            after.push(angular_error_angles_deg(&pers[t].gaze, &seq.gaze[t]));
        }
    }
    let b = before.iter().sum::<f64>() / before.len().max(1) as f64;
    let a = after.iter().sum::<f64>() / after.len().max(1) as f64;
    Ok((pp, b, a))
}

/// Full workflow: sample `shots` frames `resamplings` times, adapt each
/// time, and report mean +/- stderr of the held-out angular error before
/// and after, plus the uncertainty curve of the final predictor.
#[allow(clippy::too_many_arguments)]
pub fn personalize(
    base: &FrozenModel,
    pretrained: &PretrainedGps,
    person_id: &str,
    person_seqs: &[&VideoSequence],
    shots: usize,
    resamplings: usize,
    seed: u64,
    adapt_opts: &AdaptOpts,
) -> Result<(PersonalizeReport, PersonalizedPredictor), StageError> {
    if shots == 0 {
        return Err(StageError::Usage("personalization needs at least 1 shot".into()));
    }
    if person_seqs.is_empty() {
        return Err(StageError::Data(format!("no sequences for person {person_id}")));
    }
    let total_frames: usize = person_seqs.iter().map(|s| s.n()).sum();
    if shots >= total_frames {
        return Err(StageError::Usage(format!(
            "{shots} shots requested but the person has only {total_frames} frames"
        )));
    }
    let all_frames: Vec<(usize, usize)> = person_seqs
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.n()).map(move |t| (si, t)))
        .collect();

    let mut befores = Vec::with_capacity(resamplings);
    let mut afters = Vec::with_capacity(resamplings);
    let mut improved = 0usize;
    let mut last: Option<PersonalizedPredictor> = None;
    for r in 0..resamplings {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x9e50, r as u64));
        let idx = rand::seq::index::sample(&mut rng, all_frames.len(), shots);
        let shot_frames: Vec<(usize, usize)> = idx.iter().map(|i| all_frames[i]).collect();
        let (pp, b, a) = adapt_once(base, pretrained, person_seqs, &shot_frames, adapt_opts)?;
        if a < b {
            improved += 1;
        }
        befores.push(b);
        afters.push(a);
        last = Some(pp);
    }
    let pp = last.expect("at least one resampling");
    let curve = uncertainty_sorted_mae(&pp, person_seqs)?;
    let (bm, bs) = mean_stderr(&befores);
    let (am, asd) = mean_stderr(&afters);
    let report = PersonalizeReport {
        person_id: person_id.to_string(),
        shots,
        resamplings,
        before_mean_deg: bm,
        before_stderr_deg: bs,
        after_mean_deg: am,
        after_stderr_deg: asd,
        improved_resamplings: improved,
        uncertainty_curve: curve,
        reference_three_shot_gain_deg: REFERENCE_THREE_SHOT_GAIN_DEG,
        note: format!(
            "reference 3-shot gain (EyeDiap, large-scale): ~{REFERENCE_THREE_SHOT_GAIN_DEG} deg"
        ),
    };
    Ok((report, pp))
}
