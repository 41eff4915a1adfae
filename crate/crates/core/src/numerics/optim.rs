//! SGD with classical momentum and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::StageError;
use crate::numerics::tensor::Parameter;

/// Classical momentum: v <- momentum*v + g, p <- p - lr*v.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, StageError> {
        if !(lr > 0.0) {
            return Err(StageError::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(StageError::Config(format!("momentum must be in [0,1), got {momentum}")));
        }
        Ok(SgdMomentum { lr, momentum, velocity: BTreeMap::new() })
    }

    /// Apply one update. Aborts without touching any parameter if a gradient
    /// is non-finite, naming the offending parameter.
    pub fn step(
        &mut self,
        params: &mut [&mut Parameter],
        grads: &[(String, Vec<f64>)],
        lr: f64,
    ) -> Result<(), StageError> {
        let by_name: BTreeMap<&str, &Vec<f64>> =
            grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        for p in params.iter() {
            if let Some(g) = by_name.get(p.name.as_str()) {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(StageError::Numeric(format!(
                        "non-finite gradient {bad} for parameter {} — step aborted",
                        p.name
                    )));
                }
                if g.len() != p.tensor.data.len() {
                    return Err(StageError::ShapeMismatch {
                        op: "sgd_step",
                        lhs: p.tensor.shape.clone(),
                        rhs: vec![g.len()],
                    });
                }
            }
        }
        for p in params.iter_mut() {
            let Some(g) = by_name.get(p.name.as_str()) else { continue };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.tensor.data.len()]);
            for ((vi, gi), pi) in v.iter_mut().zip(g.iter()).zip(p.tensor.data.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
            if let Some(pg) = &mut p.tensor.grad {
                pg.copy_from_slice(g);
            }
        }
        Ok(())
    }
}

/// Cosine annealing: lr = 0.5*lr0*(1 + cos(pi*step/total)). Steps past the
/// end clamp to the final (zero) value.
pub fn cosine_anneal_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let total = total_steps.max(1);
    let s = step.min(total);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * s as f64 / total as f64).cos())
}
