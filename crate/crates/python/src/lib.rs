//! Python bindings: synthetic sequence generation, model loading and
//! inference, the angular metric, and GP regression.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use stage_core::datagen::{self, DistractorSpec, VideoSequence};
use stage_core::error::StageError;
use stage_core::gp::{ard_kernel, GpHyperparams, GpRegressor};
use stage_core::harness::{self, ExperimentConfig};
use stage_core::model::StageModel;
use stage_core::tsm;

fn to_py(e: StageError) -> PyErr {
    match e {
        StageError::Io(_) | StageError::Data(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A rendered gaze sequence with labels.
#[pyclass(name = "Sequence")]
struct PySequence {
    inner: VideoSequence,
}

#[pymethods]
impl PySequence {
    /// (n, h, w, 3)
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = &self.inner.frames.shape;
        (s[0], s[1], s[2], s[3])
    }

    /// Flat row-major pixel buffer.
    fn frames(&self) -> Vec<f64> {
        self.inner.frames.data.clone()
    }

    /// Per-frame (pitch, yaw) radians.
    fn gaze(&self) -> Vec<(f64, f64)> {
        self.inner.gaze.iter().map(|g| (g[0], g[1])).collect()
    }

    /// Per-frame normalized screen point of gaze.
    fn pog(&self) -> Option<Vec<(f64, f64)>> {
        self.inner.pog.as_ref().map(|p| p.iter().map(|g| (g[0], g[1])).collect())
    }

    #[getter]
    fn person_id(&self) -> String {
        self.inner.person_id.clone()
    }

    #[getter]
    fn seq_id(&self) -> String {
        self.inner.seq_id.clone()
    }
}

/// Render a synthetic sequence (deterministic in all arguments).
#[pyfunction]
#[pyo3(signature = (n, height, width, seed, background_motion=0.0, expression_flicker=0.0,
       illumination_drift=0.0, distractor_seed=0, bias_pitch=0.0, bias_yaw=0.0,
       person_id="p00", seq_id="p00_s00"))]
#[allow(clippy::too_many_arguments)]
fn generate_sequence(
    n: usize,
    height: usize,
    width: usize,
    seed: u64,
    background_motion: f64,
    expression_flicker: f64,
    illumination_drift: f64,
    distractor_seed: u64,
    bias_pitch: f64,
    bias_yaw: f64,
    person_id: &str,
    seq_id: &str,
) -> PyResult<PySequence> {
    let spec = DistractorSpec {
        background_motion,
        expression_flicker,
        illumination_drift,
        seed: distractor_seed,
    };
    let inner = datagen::generate_sequence(
        n,
        (height, width),
        &spec,
        (bias_pitch, bias_yaw),
        seed,
        person_id,
        seq_id,
    )
    .map_err(to_py)?;
    Ok(PySequence { inner })
}

/// Write sequences as a dataset directory.
#[pyfunction]
fn write_dataset(sequences: Vec<PyRef<PySequence>>, dir: &str) -> PyResult<usize> {
    let seqs: Vec<VideoSequence> = sequences.iter().map(|s| s.inner.clone()).collect();
    let manifest = datagen::write_dataset(&seqs, std::path::Path::new(dir)).map_err(to_py)?;
    Ok(manifest.records.len())
}

/// Load a dataset directory.
#[pyfunction]
fn load_dataset(dir: &str) -> PyResult<Vec<PySequence>> {
    let (_, seqs) = datagen::load_dataset_vec(std::path::Path::new(dir)).map_err(to_py)?;
    Ok(seqs.into_iter().map(|inner| PySequence { inner }).collect())
}

/// The full gaze model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: StageModel,
}

#[pymethods]
impl PyModel {
    /// Build a fresh model from experiment-config TOML (its [model] tables).
    #[staticmethod]
    fn from_config_toml(text: &str, seed: u64) -> PyResult<Self> {
        let cfg = ExperimentConfig::from_toml(text).map_err(to_py)?;
        Ok(PyModel { inner: StageModel::build(cfg.model, seed).map_err(to_py)? })
    }

    /// Load a training checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let loaded = harness::load_checkpoint(std::path::Path::new(path)).map_err(to_py)?;
        Ok(PyModel { inner: loaded.model })
    }

    /// Per-frame (pitch, yaw) predictions for a sequence.
    fn predict(&self, seq: &PySequence) -> PyResult<Vec<(f64, f64)>> {
        let pred = self.inner.predict(&seq.inner.frames).map_err(to_py)?;
        Ok(pred.gaze.iter().map(|g| (g[0], g[1])).collect())
    }

    /// Mean angular error in degrees over a list of sequences.
    fn mean_angular_error_deg(&self, seqs: Vec<PyRef<PySequence>>) -> PyResult<f64> {
        let owned: Vec<VideoSequence> = seqs.iter().map(|s| s.inner.clone()).collect();
        let report = harness::evaluate_model(&self.inner, &owned, "py").map_err(to_py)?;
        Ok(report.overall_mean_deg)
    }

    /// Flattened backbone features per frame (the GP feature map).
    fn frame_features(&self, seq: &PySequence) -> PyResult<Vec<Vec<f64>>> {
        self.inner.frame_features(&seq.inner.frames).map_err(to_py)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn variant(&self) -> String {
        format!(
            "{}+{}",
            self.inner.cfg.sam.variant.tag(),
            self.inner.cfg.tsm.variant.tag()
        )
    }
}

/// One-dimensional GP with the ARD squared-exponential kernel.
#[pyclass(name = "GpModel")]
struct PyGp {
    inner: GpRegressor,
}

#[pymethods]
impl PyGp {
    /// Condition on features [l x d] and targets [l].
    #[staticmethod]
    #[pyo3(signature = (features, targets, mu0=0.0, sigma2=0.01, tau=1.0, theta=None))]
    fn fit(
        features: Vec<Vec<f64>>,
        targets: Vec<f64>,
        mu0: f64,
        sigma2: f64,
        tau: f64,
        theta: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let d = features.first().map(|f| f.len()).unwrap_or(0);
        let hyper = GpHyperparams {
            mu0,
            sigma2,
            tau,
            theta: theta.unwrap_or_else(|| vec![1.0; d]),
        };
        Ok(PyGp { inner: GpRegressor::fit(hyper, features, targets).map_err(to_py)? })
    }

    /// Posterior (mean, variance) at a query point.
    fn posterior(&self, query: Vec<f64>) -> PyResult<(f64, f64)> {
        self.inner.posterior(&query).map_err(to_py)
    }

    fn log_marginal_likelihood(&self) -> f64 {
        self.inner.log_marginal_likelihood()
    }
}

/// ARD kernel value between two feature vectors.
#[pyfunction]
#[pyo3(signature = (a, b, tau=1.0, theta=None))]
fn ard_kernel_value(a: Vec<f64>, b: Vec<f64>, tau: f64, theta: Option<Vec<f64>>) -> PyResult<f64> {
    let hyper = GpHyperparams {
        mu0: 0.0,
        sigma2: 1.0,
        tau,
        theta: theta.unwrap_or_else(|| vec![1.0; a.len()]),
    };
    ard_kernel(&a, &b, &hyper).map_err(to_py)
}

/// Angular error in degrees between two (pitch, yaw) pairs.
#[pyfunction]
fn angular_error_deg(pitch_a: f64, yaw_a: f64, pitch_b: f64, yaw_b: f64) -> f64 {
    tsm::angular_error_angles_deg(&[pitch_a, yaw_a], &[pitch_b, yaw_b])
}

/// (pitch, yaw) to the unit gaze vector convention.
#[pyfunction]
fn pitch_yaw_to_vec(pitch: f64, yaw: f64) -> (f64, f64, f64) {
    let v = tsm::pitch_yaw_to_vec(pitch, yaw);
    (v[0], v[1], v[2])
}

#[pymodule]
fn stage_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySequence>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyGp>()?;
    m.add_function(wrap_pyfunction!(generate_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(ard_kernel_value, m)?)?;
    m.add_function(wrap_pyfunction!(angular_error_deg, m)?)?;
    m.add_function(wrap_pyfunction!(pitch_yaw_to_vec, m)?)?;
    Ok(())
}
