//! Evaluation: mean angular error in degrees over all frames of all
//! sequences, per person and overall.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::VideoSequence;
use crate::error::StageError;
use crate::model::StageModel;
use crate::tsm::angular_error_angles_deg;

/// Context line carried in every eval report; the large-scale
/// within-dataset reference for the hybrid+lstm configuration.
pub const REFERENCE_WITHIN_DATASET_BEST_DEG: f64 = 10.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_mean_deg: f64,
    pub per_person: BTreeMap<String, f64>,
    pub sequences: usize,
    pub frames: usize,
    pub tag: String,
    pub reference_within_dataset_best_deg: f64,
    pub note: String,
}

/// Mean angular error under an arbitrary per-sequence predictor; the model
/// path and test stubs share this.
pub fn evaluate_with<F>(mut predict: F, seqs: &[VideoSequence], tag: &str) -> Result<EvalReport, StageError>
where
    F: FnMut(&VideoSequence) -> Result<Vec<[f64; 2]>, StageError>,
{
    if seqs.is_empty() {
        return Err(StageError::Data("evaluation over an empty dataset".into()));
    }
    let mut sum = 0.0;
    let mut frames = 0usize;
    let mut person_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for seq in seqs {
        let preds = predict(seq)?;
        if preds.len() != seq.gaze.len() {
            return Err(StageError::Numeric(format!(
                "{} predictions for {} frames in {}",
                preds.len(),
                seq.gaze.len(),
                seq.seq_id
            )));
        }
        let entry = person_sum.entry(seq.person_id.clone()).or_insert((0.0, 0));
        for (p, t) in preds.iter().zip(&seq.gaze) {
            let e = angular_error_angles_deg(p, t);
            sum += e;
            entry.0 += e;
            frames += 1;
            entry.1 += 1;
        }
    }
    let per_person = person_sum
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect();
    Ok(EvalReport {
        overall_mean_deg: sum / frames as f64,
        per_person,
        sequences: seqs.len(),
        frames,
        tag: tag.to_string(),
        reference_within_dataset_best_deg: REFERENCE_WITHIN_DATASET_BEST_DEG,
        note: format!(
            "reference within-dataset best: {REFERENCE_WITHIN_DATASET_BEST_DEG} deg (hybrid+lstm, large-scale)"
        ),
    })
}

pub fn evaluate_model(model: &StageModel, seqs: &[VideoSequence], tag: &str) -> Result<EvalReport, StageError> {
    let (h0, w0) = model.cfg.backbone.image_size;
    for s in seqs {
        if s.image_size() != (h0, w0) {
            return Err(StageError::Config(format!(
                "checkpoint expects {h0}x{w0} frames, dataset sequence {} is {:?}",
                s.seq_id,
                s.image_size()
            )));
        }
    }
    evaluate_with(|seq| Ok(model.predict(&seq.frames)?.gaze), seqs, tag)
}

/// Write `eval.json` (report) and `eval.csv` (per-person rows).
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), StageError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(report).unwrap())?;
    let mut csv = String::from("person,mean_error_deg\n");
    for (person, err) in &report.per_person {
        csv.push_str(&format!("{person},{err}\n"));
    }
    csv.push_str(&format!("OVERALL,{}\n", report.overall_mean_deg));
    std::fs::write(dir.join("eval.csv"), csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_sequence, DistractorSpec};
    use crate::numerics::tensor::Tensor;

    #[test]
    fn truth_stub_scores_near_zero() {
        let seqs: Vec<_> = (0..3)
            .map(|i| {
                generate_sequence(4, (32, 32), &DistractorSpec::default(), (0.0, 0.0), i, &format!("p{i}"), "s")
                    .unwrap()
            })
            .collect();
        let report = evaluate_with(|s| Ok(s.gaze.clone()), &seqs, "stub").unwrap();
        // exact-equality floor from the clamped arccos
        assert!(report.overall_mean_deg < 0.05, "{}", report.overall_mean_deg);
        assert_eq!(report.per_person.len(), 3);
        assert_eq!(report.frames, 12);
        assert!(report.note.contains("10.05"));
    }

    #[test]
    fn constant_zero_predictor_matches_mean_absolute_yaw() {
        // labels uniform in yaw over [-pi/2, pi/2] with zero pitch: the
        // angular error of the (0,0) predictor is exactly |yaw|
        let n = 400;
        let gaze: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let y = -std::f64::consts::FRAC_PI_2
                    + std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
                [0.0, y]
            })
            .collect();
        let frames = Tensor::zeros(&[n, 4, 4, 3]);
        let seq = VideoSequence {
            frames,
            gaze: gaze.clone(),
            pog: None,
            person_id: "p".into(),
            seq_id: "s".into(),
        };
        let report = evaluate_with(|s| Ok(vec![[0.0, 0.0]; s.gaze.len()]), &[seq], "stub").unwrap();
        let expect = gaze.iter().map(|g| g[1].abs().to_degrees()).sum::<f64>() / n as f64;
        assert!(
            (report.overall_mean_deg - expect).abs() < 1e-6,
            "{} vs {}",
            report.overall_mean_deg,
            expect
        );
    }
}
