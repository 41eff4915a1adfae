//! Central finite-difference verification of autodiff gradients.

use std::collections::BTreeMap;

use crate::numerics::tensor::Parameter;

/// What an evaluation closure hands back: the scalar value, plus autodiff
/// gradients keyed by parameter name when requested.
pub struct EvalResult {
    pub value: f64,
    pub grads: Option<BTreeMap<String, Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct FdFailure {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub failures: Vec<FdFailure>,
    /// Two evaluations at the same point returned different values, so the
    /// computation is not deterministic and the check is meaningless
    /// (e.g. dropout left in train mode).
    pub nondeterministic: bool,
    pub coords_checked: usize,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        !self.nondeterministic && self.failures.is_empty()
    }
}

/// Relative error with an absolute guard for near-zero gradients: FD noise
/// for a unit-scale objective at eps=1e-5 sits around 1e-10, so gradients
/// below 1e-3 in magnitude are compared against an absolute 1e-7 floor.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compare autodiff gradients against central differences, coordinate by
/// coordinate, over every parameter. `eval` must be a pure function of the
/// parameter values (run dropout in eval mode).
pub fn finite_diff_check<F>(params: &[Parameter], eval: F, eps: f64, rtol: f64) -> FdReport
where
    F: Fn(&[Parameter], bool) -> EvalResult,
{
    let first = eval(params, true);
    let second = eval(params, false);
    if (first.value - second.value).abs() > 0.0 {
        return FdReport {
            max_rel_err: f64::INFINITY,
            failures: vec![],
            nondeterministic: true,
            coords_checked: 0,
        };
    }
    let grads = first.grads.expect("eval must return gradients when asked");

    let mut work: Vec<Parameter> = params.to_vec();
    let mut max_rel = 0.0_f64;
    let mut failures = Vec::new();
    let mut coords = 0;
    for pi in 0..work.len() {
        let name = work[pi].name.clone();
        let n = work[pi].tensor.data.len();
        let g = grads
            .get(&name)
            .unwrap_or_else(|| panic!("no gradient reported for parameter {name}"));
        for c in 0..n {
            let orig = work[pi].tensor.data[c];
            work[pi].tensor.data[c] = orig + eps;
            let up = eval(&work, false).value;
            work[pi].tensor.data[c] = orig - eps;
            let down = eval(&work, false).value;
            work[pi].tensor.data[c] = orig;
            let fd = (up - down) / (2.0 * eps);
            let re = rel_err(g[c], fd);
            max_rel = max_rel.max(re);
            coords += 1;
            if re > rtol {
                failures.push(FdFailure {
                    param: name.clone(),
                    coord: c,
                    analytic: g[c],
                    numeric: fd,
                    rel_err: re,
                });
            }
        }
    }
    FdReport { max_rel_err: max_rel, failures, nondeterministic: false, coords_checked: coords }
}

pub const FD_EPS: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::numerics::tensor::{Parameter, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_has_gradient_two_x() {
        let p = Parameter::new("x", Tensor::new(vec![1], vec![3.0]).unwrap());
        let report = finite_diff_check(
            &[p],
            |ps, want_grads| {
                let mut tape = Tape::new();
                let x = tape.param(&ps[0]);
                let y = tape.mul(x, x).unwrap();
                let loss = tape.sum_all(y).unwrap();
                let value = tape.data(loss)[0];
                let grads = want_grads.then(|| {
                    tape.backward(loss).unwrap();
                    tape.param_grads().into_iter().collect()
                });
                EvalResult { value, grads }
            },
            FD_EPS,
            FD_RTOL,
        );
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn sum_sigmoid_of_linear_map_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Parameter::new("w", Tensor::kaiming_uniform(&[4, 4], 4, &mut rng));
        let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let report = finite_diff_check(
            &[w],
            |ps, want_grads| {
                let mut tape = Tape::new();
                let w = tape.param(&ps[0]);
                let xv = tape.constant(&[1, 4], x.clone()).unwrap();
                let h = tape.matmul(xv, w).unwrap();
                let s = tape.sigmoid(h);
                let loss = tape.sum_all(s).unwrap();
                let value = tape.data(loss)[0];
                let grads = want_grads.then(|| {
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

    #[test]
    fn train_mode_dropout_is_flagged_nondeterministic() {
        let p = Parameter::new("x", Tensor::new(vec![8], vec![1.0; 8]).unwrap());
        let counter = std::cell::Cell::new(0u64);
        let report = finite_diff_check(
            &[p],
            |ps, want_grads| {
                counter.set(counter.get() + 1);
                let mut tape = Tape::for_training(counter.get());
                let x = tape.param(&ps[0]);
                let d = tape.dropout(x, 0.5).unwrap();
                let loss = tape.sum_all(d).unwrap();
                let value = tape.data(loss)[0];
                let grads = want_grads.then(|| {
                    tape.backward(loss).unwrap();
                    tape.param_grads().into_iter().collect()
                });
                EvalResult { value, grads }
            },
            FD_EPS,
            FD_RTOL,
        );
        assert!(report.nondeterministic);
        assert!(!report.pass());
    }
}
