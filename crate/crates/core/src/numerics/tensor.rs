//! Dense row-major f64 tensors and named trainable parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::StageError;

/// Dense n-dimensional array of 64-bit floats in row-major order.
///
/// `grad` is present iff `requires_grad` is set and always matches `data`
/// in length. Gradients are filled in by [`crate::numerics::Tape::backward`]
/// via the owning [`Parameter`]'s name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, StageError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(StageError::Numeric(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![1.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    /// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random::<f64>() * 2.0 * bound - bound).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    /// Small-scale normal init used for learned position embeddings.
    pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(rng)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Box-Muller standard normal draw from a deterministic stream.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A trainable tensor with a unique dotted-path name.
///
/// The name doubles as the checkpoint slot and the key under which the
/// tape reports gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter { name: name.into(), tensor: tensor.requires_grad() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.tensor.shape
    }
}

/// Returns an error naming the first non-finite entry, if any.
pub fn assert_finite(label: &str, data: &[f64]) -> Result<(), StageError> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(StageError::Numeric(format!(
                "non-finite value {v} at index {i} in {label}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shape_data_mismatch_is_error() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::kaiming_uniform(&[64, 64], 64, &mut rng);
        let bound = (6.0 / 64.0_f64).sqrt();
        assert!(t.data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn finiteness_check_names_index() {
        let mut t = Tensor::zeros(&[4]);
        t.data[2] = f64::NAN;
        let err = assert_finite("probe", &t.data).unwrap_err();
        assert!(err.to_string().contains("index 2"));
        assert!(err.to_string().contains("probe"));
    }
}
