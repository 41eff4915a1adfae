//! Unidirectional LSTM stack: e_t depends only on z_1..z_t.

use rand_chacha::ChaCha8Rng;

use crate::error::StageError;
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::{Parameter, Tensor};

/// One LSTM layer. Gate preactivations are packed [i | f | g | o] along the
/// last axis; initial hidden and cell states are zeros.
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_ih: Parameter,
    w_hh: Parameter,
    bias: Parameter,
    hidden: usize,
}

impl LstmCell {
    pub fn new(prefix: &str, d_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        LstmCell {
            w_ih: Parameter::new(
                format!("{prefix}.w_ih"),
                Tensor::kaiming_uniform(&[d_in, 4 * hidden], d_in, rng),
            ),
            w_hh: Parameter::new(
                format!("{prefix}.w_hh"),
                Tensor::kaiming_uniform(&[hidden, 4 * hidden], hidden, rng),
            ),
            bias: Parameter::new(format!("{prefix}.b"), Tensor::zeros(&[4 * hidden])),
            hidden,
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w_ih, &self.w_hh, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }

    /// [n, d_in] -> [n, hidden], left to right.
    pub fn forward(&self, tape: &mut Tape, z: ValueId) -> Result<ValueId, StageError> {
        let n = tape.shape(z)[0];
        let h = self.hidden;
        let w_ih = tape.param(&self.w_ih);
        let w_hh = tape.param(&self.w_hh);
        let bias = tape.param(&self.bias);
        let mut hs = tape.constant(&[1, h], vec![0.0; h])?;
        let mut cs = tape.constant(&[1, h], vec![0.0; h])?;
        let mut rows = Vec::with_capacity(n);
        for t in 0..n {
            let x = tape.slice(z, 0, t, 1)?;
            let xi = tape.matmul(x, w_ih)?;
            let hi = tape.matmul(hs, w_hh)?;
            let pre = tape.add(xi, hi)?;
            let pre = tape.add(pre, bias)?;
            let i = tape.slice(pre, 1, 0, h)?;
            let f = tape.slice(pre, 1, h, h)?;
            let g = tape.slice(pre, 1, 2 * h, h)?;
            let o = tape.slice(pre, 1, 3 * h, h)?;
            let i = tape.sigmoid(i);
            let f = tape.sigmoid(f);
            let g = tape.tanh(g);
            let o = tape.sigmoid(o);
            let fc = tape.mul(f, cs)?;
            let ig = tape.mul(i, g)?;
            cs = tape.add(fc, ig)?;
            let ct = tape.tanh(cs);
            hs = tape.mul(o, ct)?;
            rows.push(hs);
        }
        tape.concat(&rows, 0)
    }
}

#[derive(Debug, Clone)]
pub struct LstmStack {
    cells: Vec<LstmCell>,
}

impl LstmStack {
    pub fn new(prefix: &str, d_in: usize, hidden: usize, layers: usize, rng: &mut ChaCha8Rng) -> Result<Self, StageError> {
        if layers == 0 {
            return Err(StageError::Config("LSTM needs at least one layer".into()));
        }
        let cells = (0..layers)
            .map(|i| {
                let din = if i == 0 { d_in } else { hidden };
                LstmCell::new(&format!("{prefix}.layer{i}"), din, hidden, rng)
            })
            .collect();
        Ok(LstmStack { cells })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.cells.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.cells.iter_mut().flat_map(|c| c.params_mut()).collect()
    }

    pub fn forward(&self, tape: &mut Tape, z: ValueId) -> Result<ValueId, StageError> {
        let mut x = z;
        for c in &self.cells {
            x = c.forward(tape, x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn strict_causality_is_exact() {
        let mut r = rng(0);
        let lstm = LstmStack::new("tsm", 3, 4, 1, &mut r).unwrap();
        let base: Vec<f64> = (0..5 * 3).map(|_| r.random::<f64>() - 0.5).collect();
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let z = tape.constant(&[5, 3], data).unwrap();
            let e = lstm.forward(&mut tape, z).unwrap();
            tape.data(e).to_vec()
        };
        let clean = run(base.clone());
        let mut noisy = base.clone();
        for c in 0..3 {
            noisy[4 * 3 + c] += 10.0;
        }
        let pert = run(noisy);
        assert_eq!(&clean[..4 * 4], &pert[..4 * 4]);
        assert_ne!(&clean[4 * 4..], &pert[4 * 4..]);
    }

    #[test]
    fn zero_everything_gives_zero_output() {
        let mut r = rng(1);
        let mut lstm = LstmStack::new("tsm", 2, 3, 1, &mut r).unwrap();
        for p in lstm.params_mut() {
            p.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let z = tape.constant(&[4, 2], vec![0.0; 8]).unwrap();
        let e = lstm.forward(&mut tape, z).unwrap();
        assert!(tape.data(e).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extreme_biases_reduce_to_scalar_tanh_pipeline() {
        // i ~ 1, f ~ 0, o ~ 1 via huge biases: c_t = i*tanh(wx + uh + bg),
        // h_t = o*tanh(c_t). The oracle runs the same recurrence in plain
        // scalar arithmetic.
        let mut r = rng(2);
        let mut lstm = LstmStack::new("tsm", 1, 1, 1, &mut r).unwrap();
        let (wx, uh, bg) = (0.7, -0.3, 0.11);
        {
            let mut ps = lstm.params_mut();
            // order: w_ih [1,4], w_hh [1,4], b [4]; gates [i|f|g|o]
            ps[0].tensor.data.copy_from_slice(&[0.0, 0.0, wx, 0.0]);
            ps[1].tensor.data.copy_from_slice(&[0.0, 0.0, uh, 0.0]);
            ps[2].tensor.data.copy_from_slice(&[40.0, -40.0, bg, 40.0]);
        }
        let xs = [0.5, -1.0, 0.25];
        let mut tape = Tape::new();
        let z = tape.constant(&[3, 1], xs.to_vec()).unwrap();
        let e = lstm.forward(&mut tape, z).unwrap();
        let got = tape.data(e).to_vec();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (i, f, o) = (sig(40.0), sig(-40.0), sig(40.0));
        let mut c = 0.0;
        let mut h = 0.0;
        let mut expect = Vec::new();
        for x in xs {
            let g = (wx * x + uh * h + bg).tanh();
            c = f * c + i * g;
            h = o * c.tanh();
            expect.push(h);
        }
        for (a, b) in got.iter().zip(&expect) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn stacked_layers_compose() {
        let mut r = rng(3);
        let lstm = LstmStack::new("tsm", 3, 4, 2, &mut r).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(&[6, 3], (0..18).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let e = lstm.forward(&mut tape, z).unwrap();
        assert_eq!(tape.shape(e), &[6, 4]);
    }
}
