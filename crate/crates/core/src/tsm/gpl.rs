//! Gaze prediction layer: a timestamp-shared MLP from TSM features to
//! (pitch, yaw), with an optional parallel point-of-gaze head.

use rand_chacha::ChaCha8Rng;

use crate::error::StageError;
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::{Parameter, Tensor};

#[derive(Debug, Clone)]
pub struct GazePredictionLayer {
    fc1_w: Parameter,
    fc1_b: Parameter,
    fc2_w: Parameter,
    fc2_b: Parameter,
    pog_head: Option<(Parameter, Parameter)>,
}

impl GazePredictionLayer {
    /// The hidden layer keeps the input width and uses a SeLU activation;
    /// the PoG head is built only when the loss carries a nonzero lambda.
    /// Output layers start at zero so the untrained model predicts the
    /// origin instead of angle-scale noise.
    pub fn new(prefix: &str, d_t: usize, with_pog: bool, rng: &mut ChaCha8Rng) -> Self {
        GazePredictionLayer {
            fc1_w: Parameter::new(
                format!("{prefix}.fc1.w"),
                Tensor::kaiming_uniform(&[d_t, d_t], d_t, rng),
            ),
            fc1_b: Parameter::new(format!("{prefix}.fc1.b"), Tensor::zeros(&[d_t])),
            fc2_w: Parameter::new(format!("{prefix}.fc2.w"), Tensor::zeros(&[d_t, 2])),
            fc2_b: Parameter::new(format!("{prefix}.fc2.b"), Tensor::zeros(&[2])),
            pog_head: with_pog.then(|| {
                (
                    Parameter::new(format!("{prefix}.pog.w"), Tensor::zeros(&[d_t, 2])),
                    Parameter::new(format!("{prefix}.pog.b"), Tensor::zeros(&[2])),
                )
            }),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b];
        if let Some((w, b)) = &self.pog_head {
            out.extend([w, b]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b];
        if let Some((w, b)) = &mut self.pog_head {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// [n, d_t] -> gaze [n, 2] and, when the head exists, pog [n, 2].
    pub fn forward(&self, tape: &mut Tape, e: ValueId) -> Result<(ValueId, Option<ValueId>), StageError> {
        let w1 = tape.param(&self.fc1_w);
        let b1 = tape.param(&self.fc1_b);
        let h = tape.linear(e, w1, b1)?;
        let h = tape.selu(h);
        let w2 = tape.param(&self.fc2_w);
        let b2 = tape.param(&self.fc2_b);
        let gaze = tape.linear(h, w2, b2)?;
        let pog = match &self.pog_head {
            Some((w, b)) => {
                let wp = tape.param(w);
                let bp = tape.param(b);
                Some(tape.linear(h, wp, bp)?)
            }
            None => None,
        };
        Ok((gaze, pog))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fdcheck::{finite_diff_check, EvalResult, FD_EPS, FD_RTOL};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weights_predict_zero_gaze() {
        let mut gpl = GazePredictionLayer::new("gpl", 4, false, &mut rng(0));
        for p in gpl.params_mut() {
            p.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let e = tape.constant(&[3, 4], (0..12).map(|i| i as f64).collect()).unwrap();
        let (gaze, pog) = gpl.forward(&mut tape, e).unwrap();
        assert!(pog.is_none());
        assert!(tape.data(gaze).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_rows_permutes_predictions() {
        let gpl = GazePredictionLayer::new("gpl", 3, true, &mut rng(1));
        let mut r = rng(2);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| r.random::<f64>()).collect()).collect();
        let run = |order: [usize; 3]| {
            let mut tape = Tape::new();
            let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let e = tape.constant(&[3, 3], data).unwrap();
            let (gaze, _) = gpl.forward(&mut tape, e).unwrap();
            tape.data(gaze).to_vec()
        };
        let fwd = run([0, 1, 2]);
        let rev = run([2, 1, 0]);
        assert_eq!(&fwd[0..2], &rev[4..6]);
        assert_eq!(&fwd[4..6], &rev[0..2]);
    }

    #[test]
    fn selu_head_passes_fd() {
        let gpl = GazePredictionLayer::new("gpl", 3, true, &mut rng(3));
        let mut r = rng(4);
        let e: Vec<f64> = (0..2 * 3).map(|_| r.random::<f64>() - 0.5).collect();
        let params: Vec<Parameter> = gpl.params().into_iter().cloned().collect();
        let report = finite_diff_check(
            &params,
            |ps, want| {
                let mut g2 = gpl.clone();
                for (dst, src) in g2.params_mut().into_iter().zip(ps.iter()) {
                    dst.tensor.data = src.tensor.data.clone();
                }
                let mut tape = Tape::new();
                let ein = tape.constant(&[2, 3], e.clone()).unwrap();
                let (gaze, pog) = g2.forward(&mut tape, ein).unwrap();
                let both = tape.concat(&[gaze, pog.unwrap()], 1).unwrap();
                let sq = tape.mul(both, both).unwrap();
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
