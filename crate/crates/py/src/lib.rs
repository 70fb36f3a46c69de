//! Python bindings for the `scbf` crate.
//!
//! Matrices cross the boundary as nested lists (`list[list[float]]`), labels
//! as lists of 0/1 ints.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyBytes};

use scbf::channel::{self, SelectionConfig, SelectionMode};
use scbf::config::ExperimentConfig;
use scbf::federation::wire::{self, Message, WireEntry};
use scbf::federation::{self, saturation_round};
use scbf::{DenseMatrix, GradientSet};

/// Per-layer `(row, col, value)` triplets.
type Entries = Vec<Vec<(usize, usize, f64)>>;

fn to_py(e: scbf::Error) -> PyErr {
    match e {
        scbf::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn gradients(weights: Vec<Vec<Vec<f64>>>) -> PyResult<GradientSet> {
    let weights = weights
        .iter()
        .map(|w| DenseMatrix::from_rows(w))
        .collect::<scbf::Result<Vec<_>>>()
        .map_err(to_py)?;
    let biases = weights.iter().map(|w| vec![0.0; w.cols()]).collect();
    Ok(GradientSet { weights, biases })
}

fn selection(update_rate: f64, mode: &str) -> PyResult<SelectionConfig> {
    let mode = match mode {
        "positive" => SelectionMode::Positive,
        "negative" => SelectionMode::Negative,
        other => return Err(PyValueError::new_err(format!("mode must be 'positive' or 'negative', got '{other}'"))),
    };
    Ok(SelectionConfig { update_rate, mode })
}

/// Returns `(features, labels)` for a seeded synthetic dataset.
#[pyfunction]
#[pyo3(signature = (num_samples, num_features, sparsity = 0.2, seed = 0))]
fn generate_synthetic(
    num_samples: usize,
    num_features: usize,
    sparsity: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<u8>)> {
    let data = scbf::generate_synthetic(num_samples, num_features, sparsity, seed).map_err(to_py)?;
    let x = data.features();
    let rows = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    Ok((rows, data.labels().to_vec()))
}

#[pyfunction]
fn auc_roc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let data = scbf::ScoredLabels::new(&scores, &labels).map_err(to_py)?;
    scbf::auc_roc(data).map_err(to_py)
}

#[pyfunction]
fn auc_pr(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let data = scbf::ScoredLabels::new(&scores, &labels).map_err(to_py)?;
    scbf::auc_pr(data).map_err(to_py)
}

/// Squared channel norms of per-layer weight gradients, as `(dims, norms)`
/// with norms in row-major channel order.
#[pyfunction]
fn channel_norms(weights: Vec<Vec<Vec<f64>>>) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let t = channel::compute_channel_norms(&gradients(weights)?).map_err(to_py)?;
    Ok((t.dims().to_vec(), t.norms().to_vec()))
}

/// Sparse update chosen from weight gradients: per layer a list of
/// `(row, col, value)`, plus the uploaded fraction of weights.
#[pyfunction]
#[pyo3(signature = (weights, update_rate = 0.3, mode = "positive"))]
fn select_channels(
    weights: Vec<Vec<Vec<f64>>>,
    update_rate: f64,
    mode: &str,
) -> PyResult<(Entries, f64)> {
    let update = channel::process_gradients(&gradients(weights)?, &selection(update_rate, mode)?).map_err(to_py)?;
    let layers = update
        .layers
        .iter()
        .map(|es| es.iter().map(|e| (e.row, e.col, e.value)).collect())
        .collect();
    Ok((layers, update.upload_fraction()))
}

/// Encodes a client update frame (values travel as f32).
#[pyfunction]
fn encode_client_update<'py>(py: Python<'py>, layers: Vec<Vec<(u32, u32, f32)>>) -> Bound<'py, PyBytes> {
    let msg = Message::ClientUpdate(
        layers
            .into_iter()
            .map(|es| es.into_iter().map(|(row, col, value)| WireEntry { row, col, value }).collect())
            .collect(),
    );
    PyBytes::new(py, &msg.encode())
}

#[pyfunction]
fn decode_client_update(frame: &[u8]) -> PyResult<Vec<Vec<(u32, u32, f32)>>> {
    match Message::decode(frame).map_err(to_py)? {
        Message::ClientUpdate(layers) => Ok(layers
            .into_iter()
            .map(|es| es.into_iter().map(|e| (e.row, e.col, e.value)).collect())
            .collect()),
        other => Err(PyValueError::new_err(format!(
            "expected a client update frame, got {:?}",
            other.message_type()
        ))),
    }
}

/// Frame type name of an encoded message.
#[pyfunction]
fn frame_type(frame: &[u8]) -> PyResult<String> {
    let msg = Message::decode(frame).map_err(to_py)?;
    Ok(format!("{:?}", msg.message_type()))
}

#[pyclass(frozen, get_all, module = "scbf_py")]
struct RoundReport {
    round_index: usize,
    upload_fractions: Vec<f64>,
    auc_roc: f64,
    auc_pr: f64,
    wall_seconds: f64,
    neurons_left: usize,
}

#[pymethods]
impl RoundReport {
    fn __repr__(&self) -> String {
        format!(
            "RoundReport(round_index={}, auc_roc={:.4}, auc_pr={:.4}, neurons_left={})",
            self.round_index, self.auc_roc, self.auc_pr, self.neurons_left
        )
    }
}

impl From<&federation::RoundReport> for RoundReport {
    fn from(r: &federation::RoundReport) -> Self {
        RoundReport {
            round_index: r.round_index,
            upload_fractions: r.upload_fractions.clone(),
            auc_roc: r.auc_roc,
            auc_pr: r.auc_pr,
            wall_seconds: r.wall_seconds,
            neurons_left: r.neurons_left,
        }
    }
}

/// An experiment configured with the same keys as the CLI config file.
///
/// ```python
/// exp = Experiment(algorithm="scbfwp", global_loops=20, samples=1000)
/// reports = exp.run()
/// ```
#[pyclass(module = "scbf_py")]
struct Experiment {
    config: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<std::collections::HashMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut exp = Experiment {
            config: ExperimentConfig::default(),
        };
        for (k, v) in overrides.unwrap_or_default() {
            exp.set(&k, &v)?;
        }
        Ok(exp)
    }

    /// Sets one key. Values go through `str()`; booleans become
    /// `true`/`false` and lists are comma-joined (`layer_sizes=[16, 8, 1]`).
    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let text = if let Ok(b) = value.cast::<PyBool>() {
            b.is_true().to_string()
        } else if let Ok(items) = value.extract::<Vec<Bound<'_, PyAny>>>() {
            items
                .iter()
                .map(|v| v.str().map(|s| s.to_string()))
                .collect::<PyResult<Vec<_>>>()?
                .join(",")
        } else {
            value.str()?.to_string()
        };
        self.config.set(key, &text).map_err(to_py)
    }

    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        Ok(Experiment {
            config: ExperimentConfig::from_file(path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn template() -> String {
        ExperimentConfig::template()
    }

    /// Runs every round and returns the per-round reports. The GIL is
    /// released while training.
    fn run(&self, py: Python<'_>) -> PyResult<Vec<RoundReport>> {
        let cfg = self.config.federation_config().map_err(to_py)?;
        let data = self.config.load_data().map_err(to_py)?;
        let result = py
            .detach(|| scbf::run_experiment(&cfg, &data))
            .map_err(to_py)?;
        Ok(result.reports.iter().map(RoundReport::from).collect())
    }
}

/// First round within `tolerance` of the curve's maximum, or `None`.
#[pyfunction]
#[pyo3(signature = (auc, tolerance = 0.002))]
fn saturation(auc: Vec<f64>, tolerance: f64) -> Option<usize> {
    saturation_round(&auc, tolerance)
}

#[pymodule]
fn scbf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(auc_roc, m)?)?;
    m.add_function(wrap_pyfunction!(auc_pr, m)?)?;
    m.add_function(wrap_pyfunction!(channel_norms, m)?)?;
    m.add_function(wrap_pyfunction!(select_channels, m)?)?;
    m.add_function(wrap_pyfunction!(encode_client_update, m)?)?;
    m.add_function(wrap_pyfunction!(decode_client_update, m)?)?;
    m.add_function(wrap_pyfunction!(frame_type, m)?)?;
    m.add_function(wrap_pyfunction!(saturation, m)?)?;
    m.add_class::<RoundReport>()?;
    m.add_class::<Experiment>()?;
    m.add("WIRE_VERSION", wire::VERSION)?;
    Ok(())
}
