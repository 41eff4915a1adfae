//! Training objective: mean angular error in degrees plus an optional
//! weighted point-of-gaze residual norm, averaged over batch and frames.

use serde::{Deserialize, Serialize};

use crate::error::StageError;
use crate::numerics::tape::{Tape, ValueId};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the 2-D PoG term; 0 for within-data, 0.001 for cross-data.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), StageError> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(StageError::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Predictions and labels for one sequence of the batch.
pub struct SequenceTerms {
    /// [n, 2] predicted (pitch, yaw) on the tape.
    pub pred_gaze: ValueId,
    /// Per-frame (pitch, yaw) labels.
    pub true_gaze: Vec<[f64; 2]>,
    /// [n, 2] predicted PoG, required when lambda > 0.
    pub pred_pog: Option<ValueId>,
    pub true_pog: Option<Vec<[f64; 2]>>,
}

/// Sum over frames of the angular error in degrees between predicted and
/// true gaze, as a scalar tape value.
fn angular_sum(tape: &mut Tape, pred: ValueId, labels: &[[f64; 2]]) -> Result<ValueId, StageError> {
    let n = labels.len();
    if tape.shape(pred) != [n, 2] {
        return Err(StageError::ShapeMismatch {
            op: "stage_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: vec![n, 2],
        });
    }
    let flat: Vec<f64> = labels.iter().flat_map(|g| [g[0], g[1]]).collect();
    let truth = tape.constant(&[n, 2], flat)?;
    let pv = tape.pitch_yaw_to_vec(pred)?;
    let tv = tape.pitch_yaw_to_vec(truth)?;
    let prod = tape.mul(pv, tv)?;
    let dots = tape.sum_axes(prod, &[1])?;
    let ang = tape.arccos_clamped(dots);
    let deg = tape.scale(ang, 180.0 / std::f64::consts::PI);
    tape.sum_all(deg)
}

/// Sum over frames of ||p - p_hat||.
fn pog_sum(tape: &mut Tape, pred: ValueId, labels: &[[f64; 2]]) -> Result<ValueId, StageError> {
    let n = labels.len();
    let flat: Vec<f64> = labels.iter().flat_map(|g| [g[0], g[1]]).collect();
    let truth = tape.constant(&[n, 2], flat)?;
    let resid = tape.sub(truth, pred)?;
    let norms = tape.l2_norm_last(resid)?;
    tape.sum_all(norms)
}

/// L = (1/(b*n)) * sum_i sum_t [ angular_deg(g, g_hat) + lambda*||p - p_hat|| ].
pub fn stage_loss(tape: &mut Tape, batch: &[SequenceTerms], cfg: &LossConfig) -> Result<ValueId, StageError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(StageError::Config("loss over an empty batch".into()));
    }
    let mut total_frames = 0usize;
    let mut acc: Option<ValueId> = None;
    for seq in batch {
        total_frames += seq.true_gaze.len();
        let mut term = angular_sum(tape, seq.pred_gaze, &seq.true_gaze)?;
        if cfg.lambda > 0.0 {
            let (pred_pog, true_pog) = match (&seq.pred_pog, &seq.true_pog) {
                (Some(p), Some(t)) => (*p, t),
                _ => {
                    return Err(StageError::Config(
                        "lambda > 0 requires point-of-gaze predictions and labels".into(),
                    ))
                }
            };
            let pn = pog_sum(tape, pred_pog, true_pog)?;
            let weighted = tape.scale(pn, cfg.lambda);
            term = tape.add(term, weighted)?;
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / total_frames as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn loss_of(
        preds: Vec<[f64; 2]>,
        labels: Vec<[f64; 2]>,
        pog: Option<(Vec<[f64; 2]>, Vec<[f64; 2]>)>,
        lambda: f64,
    ) -> f64 {
        let mut tape = Tape::new();
        let n = preds.len();
        let flat: Vec<f64> = preds.iter().flat_map(|g| [g[0], g[1]]).collect();
        let pred = tape.constant(&[n, 2], flat).unwrap();
        let (pred_pog, true_pog) = match pog {
            Some((pp, tp)) => {
                let flat: Vec<f64> = pp.iter().flat_map(|g| [g[0], g[1]]).collect();
                (Some(tape.constant(&[n, 2], flat).unwrap()), Some(tp))
            }
            None => (None, None),
        };
        let terms = SequenceTerms { pred_gaze: pred, true_gaze: labels, pred_pog, true_pog };
        let l = stage_loss(&mut tape, &[terms], &LossConfig { lambda }).unwrap();
        tape.data(l)[0]
    }

    #[test]
    fn perfect_prediction_is_almost_zero() {
        let labels = vec![[0.1, -0.2], [0.0, 0.5]];
        let l = loss_of(labels.clone(), labels, None, 0.0);
        // the arccos clamp keeps a sub-milli-degree floor at exact equality
        assert!(l < 0.05, "loss {l}");
    }

    #[test]
    fn ninety_degrees_everywhere_means_ninety() {
        use std::f64::consts::FRAC_PI_2;
        let preds = vec![[0.0, 0.0], [0.0, 0.0]];
        let labels = vec![[0.0, FRAC_PI_2], [0.0, FRAC_PI_2]];
        let l = loss_of(preds, labels, None, 0.0);
        assert_relative_eq!(l, 90.0, epsilon = 1e-3);
    }

    #[test]
    fn lambda_composes_angular_and_pog_terms() {
        // angular term exactly 10 degrees per frame, PoG residual norm 5.0
        let ten_deg = 10.0_f64.to_radians();
        let preds = vec![[0.0, ten_deg]];
        let labels = vec![[0.0, 0.0]];
        let pog_pred = vec![[3.0, 4.0]];
        let pog_true = vec![[0.0, 0.0]];
        let l = loss_of(preds, labels, Some((pog_pred, pog_true)), 0.001);
        assert_relative_eq!(l, 10.005, epsilon = 1e-9);
    }

    #[test]
    fn missing_pog_with_positive_lambda_is_an_error() {
        let mut tape = Tape::new();
        let pred = tape.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        let terms = SequenceTerms {
            pred_gaze: pred,
            true_gaze: vec![[0.0, 0.0]],
            pred_pog: None,
            true_pog: None,
        };
        let err = stage_loss(&mut tape, &[terms], &LossConfig { lambda: 0.001 }).unwrap_err();
        assert!(err.to_string().contains("lambda"));
    }

    #[test]
    fn loss_is_nonnegative_and_detects_mismatch() {
        let l = loss_of(vec![[0.3, 0.3]], vec![[-0.3, 0.2]], None, 0.0);
        assert!(l > 0.0);
    }
}
