//! Python bindings. Matrices cross the boundary as lists of rows; reports
//! come back as dicts built from the same JSON the command-line tool
//! writes.

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reluid::identifiability::{chart_for, gamma_backprop};
use reluid::io::{model_to_string, parse_model, to_json};
use reluid::network::default_tol_s;
use reluid::oracle::{exact_verify_f64, find_twin as find_twin_impl, ContinuationOptions};
use reluid::pathspace::{activation_matrix as activation_matrix_impl, check_linear_representation};
use reluid::rescaling::{apply_rescaling, are_equivalent as are_equivalent_impl, canonicalize, random_rescaling, Equivalence};
use reluid::{
    enumerate_paths, evaluate_params, lift as lift_impl, Architecture, EvaluateOptions, NetworkParams, RankPolicy, DEFAULT_PATH_CAP,
};

fn err(e: reluid::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

fn json_dict<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A fully-connected ReLU network.
#[pyclass(name = "Network", module = "reluid", from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: NetworkParams,
}

#[pymethods]
impl PyNetwork {
    /// Build from layer sizes and the flat parameter vector (weight
    /// matrices row-major in layer order, then biases).
    #[new]
    fn new(layer_sizes: Vec<usize>, flat: Vec<f64>) -> PyResult<Self> {
        let arch = Architecture::new(layer_sizes).map_err(err)?;
        Ok(Self { inner: NetworkParams::from_flat(arch, &flat).map_err(err)? })
    }

    /// Standard normal parameters from a seeded generator.
    #[staticmethod]
    fn random(layer_sizes: Vec<usize>, seed: u64) -> PyResult<Self> {
        let arch = Architecture::new(layer_sizes).map_err(err)?;
        Ok(Self { inner: NetworkParams::random_normal(arch, &mut ChaCha8Rng::seed_from_u64(seed)) })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: parse_model(text).map_err(err)? })
    }

    fn to_json(&self) -> String {
        model_to_string(&self.inner)
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.arch().layer_sizes().to_vec()
    }

    /// Dimension of the restricted parameterization.
    #[getter]
    fn dimension(&self) -> usize {
        self.inner.arch().manifold_dimension()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.inner.to_flat()
    }

    /// Outputs for each input row.
    fn forward(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&reluid::network::forward_batch(&self.inner, &from_rows(inputs)?).map_err(err)?))
    }

    /// A random positive rescaling of this network.
    fn rescaled(&self, seed: u64, spread: f64) -> PyResult<Self> {
        let lambda = random_rescaling(self.inner.arch(), seed, true, spread).map_err(err)?;
        Ok(Self { inner: apply_rescaling(&self.inner, &lambda).map_err(err)? })
    }

    /// Every hidden neuron's largest outgoing weight rescaled to +-1.
    fn canonical(&self) -> PyResult<Self> {
        let (inner, _) = canonicalize(&self.inner, default_tol_s(&self.inner)).map_err(err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!("Network(layer_sizes={:?})", self.inner.arch().layer_sizes())
    }
}

/// Ranks, verdict and diagnostics as a dict.
#[pyfunction]
#[pyo3(signature = (network, inputs, rank_tol = 1e-8, s_tol = None, margin_tol = None, path_cap = DEFAULT_PATH_CAP as u64))]
fn evaluate<'py>(
    py: Python<'py>,
    network: &PyNetwork,
    inputs: Vec<Vec<f64>>,
    rank_tol: f64,
    s_tol: Option<f64>,
    margin_tol: Option<f64>,
    path_cap: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = EvaluateOptions {
        rank_policy: RankPolicy::relative(rank_tol).map_err(err)?,
        tol_s: s_tol,
        margin_tol,
        path_cap: path_cap as u128,
        ..Default::default()
    };
    let (_, report) = evaluate_params(&network.inner, &from_rows(inputs)?, &opts).map_err(err)?;
    json_dict(py, &to_json(&report))
}

/// Jacobian of the outputs on the sample with respect to the restricted
/// coordinates; rows are (input, output) pairs, input-major.
#[pyfunction]
fn gamma(network: &PyNetwork, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let ctx = chart_for(&network.inner, default_tol_s(&network.inner)).map_err(err)?;
    Ok(to_rows(&gamma_backprop(&ctx, &from_rows(inputs)?).map_err(err)?.matrix))
}

/// Path-lifted parameters, one row per path in canonical order.
#[pyfunction]
fn lift(network: &PyNetwork) -> PyResult<Vec<Vec<f64>>> {
    let paths = enumerate_paths(network.inner.arch(), DEFAULT_PATH_CAP).map_err(err)?;
    Ok(to_rows(&lift_impl(&network.inner, &paths).matrix))
}

/// Dense activation matrix, one row per input.
#[pyfunction]
fn activation_matrix(network: &PyNetwork, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let paths = enumerate_paths(network.inner.arch(), DEFAULT_PATH_CAP).map_err(err)?;
    let a = activation_matrix_impl(&network.inner, &from_rows(inputs)?, &paths).map_err(err)?;
    Ok(to_rows(&a.triplets.to_dense()))
}

#[pyfunction]
#[pyo3(signature = (network, inputs, rel_tol = 1e-9))]
fn lift_residual<'py>(py: Python<'py>, network: &PyNetwork, inputs: Vec<Vec<f64>>, rel_tol: f64) -> PyResult<Bound<'py, PyAny>> {
    let c = check_linear_representation(&network.inner, &from_rows(inputs)?, rel_tol, DEFAULT_PATH_CAP).map_err(err)?;
    json_dict(py, &to_json(&c))
}

/// Exact rational checks of the representation, Jacobian and rank identities.
#[pyfunction]
fn exact_verify<'py>(py: Python<'py>, network: &PyNetwork, inputs: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    let r = exact_verify_f64(&network.inner, &from_rows(inputs)?, DEFAULT_PATH_CAP).map_err(err)?;
    json_dict(py, &to_json(&r))
}

/// "positive_rescaling", "rescaling_only" or "not_equivalent".
#[pyfunction]
#[pyo3(signature = (a, b, tol = 1e-9))]
fn are_equivalent(a: &PyNetwork, b: &PyNetwork, tol: f64) -> PyResult<&'static str> {
    let tol_s = default_tol_s(&a.inner);
    Ok(match are_equivalent_impl(&a.inner, &b.inner, tol, tol_s).map_err(err)? {
        Equivalence::PositiveRescaling => "positive_rescaling",
        Equivalence::RescalingOnly => "rescaling_only",
        Equivalence::NotEquivalent => "not_equivalent",
    })
}

/// A network with the same outputs on the sample that is not a rescaling
/// of `network`, or None if the search fails.
#[pyfunction]
#[pyo3(signature = (network, inputs, seed = 0, attempts = 5))]
fn find_twin(network: &PyNetwork, inputs: Vec<Vec<f64>>, seed: u64, attempts: usize) -> PyResult<Option<PyNetwork>> {
    let tol_s = default_tol_s(&network.inner);
    let ctx = chart_for(&network.inner, tol_s).map_err(err)?;
    let opts = ContinuationOptions { tol_s, ..Default::default() };
    let search = find_twin_impl(&ctx, &from_rows(inputs)?, seed, attempts, None, &opts).map_err(err)?;
    Ok(search.twin.map(|t| PyNetwork { inner: t.params }))
}

#[pymodule]
#[pyo3(name = "reluid")]
fn reluid_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gamma, m)?)?;
    m.add_function(wrap_pyfunction!(lift, m)?)?;
    m.add_function(wrap_pyfunction!(activation_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(lift_residual, m)?)?;
    m.add_function(wrap_pyfunction!(exact_verify, m)?)?;
    m.add_function(wrap_pyfunction!(are_equivalent, m)?)?;
    m.add_function(wrap_pyfunction!(find_twin, m)?)?;
    Ok(())
}
