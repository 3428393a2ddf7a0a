//! Python bindings for `seqmodes`.
//!
//! Matrices cross the boundary as nested lists indexed `[y][x]`, matching the
//! core crate's `|Y| x |X|` convention. Results come back as plain dicts.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use seqmodes::distribution::{
    check_language as core_check_language, conditional_operator, random_language, uniform_marginal_language,
    Alphabet, ConditionalOperator, DenseTensor,
};
use seqmodes::experiment::llc_experiment;
use seqmodes::model::{FitConfig, Parametrization};
use seqmodes::modes::weighted_svd;
use seqmodes::sgld::{bound_g, main_theorem_bound, window_check, Preset, SGLDConfig};
use seqmodes::truncation::{truncate as core_truncate, Solver, TruncationSpec, FULL};
use seqmodes::Error;

use nalgebra::{DMatrix, DVector};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_)
        | Error::IncompleteDecomposition
        | Error::Infeasible(_)
        | Error::Diverged { .. }
        | Error::DegenerateFit(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn matrix(cond: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ny = cond.len();
    let nx = cond.first().map_or(0, Vec::len);
    if ny == 0 || nx == 0 || cond.iter().any(|r| r.len() != nx) {
        return Err(PyValueError::new_err("cond must be a non-empty rectangular [y][x] list"));
    }
    Ok(DMatrix::from_fn(ny, nx, |y, x| cond[y][x]))
}

/// Wraps a bare matrix as an operator over one-token contexts and continuations.
fn operator(cond: Vec<Vec<f64>>, marginal: Vec<f64>) -> PyResult<ConditionalOperator> {
    let m = matrix(&cond)?;
    let (ny, nx) = m.shape();
    let labels = |n: usize| (0..n as u32).map(|i| vec![i]).collect();
    ConditionalOperator::new(1, 1, nx.max(ny), labels(nx), labels(ny), m, DVector::from_vec(marginal)).map_err(to_py)
}

/// `q(y|x)` and `q(x)` of a seeded random language.
#[pyfunction]
#[pyo3(signature = (seed, alphabet_size, k, l, concentration=1.0, uniform_marginal=false))]
fn language_operator<'py>(
    py: Python<'py>,
    seed: u64,
    alphabet_size: usize,
    k: usize,
    l: usize,
    concentration: f64,
    uniform_marginal: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let alphabet = Alphabet::new(alphabet_size).map_err(to_py)?;
    let lang = if uniform_marginal {
        uniform_marginal_language(seed, alphabet, k + l, concentration)
    } else {
        random_language(seed, alphabet, k + l, concentration)
    }
    .map_err(to_py)?;
    let op = conditional_operator(&lang, k, l).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("cond", rows(&op.matrix))?;
    d.set_item("marginal", op.marginal.as_slice().to_vec())?;
    d.set_item("x_labels", op.x_labels.clone())?;
    d.set_item("y_labels", op.y_labels.clone())?;
    d.set_item("joint", lang.joint().data.clone())?;
    Ok(d)
}

/// Largest deviation of a joint over `Σ^K` from its own window marginals.
#[pyfunction]
fn check_language(probabilities: Vec<f64>, alphabet_size: usize, big_k: usize) -> PyResult<f64> {
    let top = DenseTensor::new(alphabet_size, big_k, probabilities).map_err(to_py)?;
    let family = (1..=big_k)
        .map(|k| {
            if k == big_k {
                Ok(top.clone())
            } else {
                seqmodes::distribution::marginalize(&top, 0, big_k - k)
            }
        })
        .collect::<seqmodes::Result<Vec<_>>>()
        .map_err(to_py)?;
    Ok(core_check_language(&family).map_err(to_py)?.max_deviation)
}

/// Weighted SVD of `cond` under `marginal`.
#[pyfunction]
#[pyo3(signature = (cond, marginal, rank_tol=seqmodes::modes::DEFAULT_RANK_TOL))]
fn decompose<'py>(py: Python<'py>, cond: Vec<Vec<f64>>, marginal: Vec<f64>, rank_tol: f64) -> PyResult<Bound<'py, PyDict>> {
    let op = operator(cond, marginal)?;
    let dec = weighted_svd(&op, rank_tol).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("singular_values", dec.singular_values.clone())?;
    d.set_item("left", rows(&dec.left))?;
    d.set_item("right", rows(&dec.right))?;
    d.set_item("n_plus", dec.n_plus)?;
    Ok(d)
}

/// Effective distribution keeping modes `0..=chi` (`None` keeps all).
#[pyfunction]
#[pyo3(signature = (cond, marginal, chi=None, solver="kl"))]
fn truncate<'py>(
    py: Python<'py>,
    cond: Vec<Vec<f64>>,
    marginal: Vec<f64>,
    chi: Option<usize>,
    solver: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let solver = match solver {
        "kl" => Solver::Kl,
        "normalized" => Solver::Normalized,
        "projection_only" => Solver::ProjectionOnly,
        other => return Err(PyValueError::new_err(format!("unknown solver `{other}`"))),
    };
    let op = operator(cond, marginal)?;
    let dec = weighted_svd(&op, seqmodes::modes::DEFAULT_RANK_TOL).map_err(to_py)?;
    let spec = TruncationSpec { chi: chi.unwrap_or(FULL), solver, ..TruncationSpec::default() };
    let eff = core_truncate(&dec, &spec).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("cond", rows(&eff.operator.matrix))?;
    d.set_item("kl", eff.provenance.kl)?;
    d.set_item("feasible", eff.provenance.feasible)?;
    d.set_item("converged", eff.provenance.converged)?;
    d.set_item("iterations", eff.provenance.iterations)?;
    Ok(d)
}

fn preset(name: &str) -> PyResult<Preset> {
    name.parse().map_err(to_py)
}

/// LLC estimate of a full-table softmax model fitted to `n` samples of `cond`.
#[pyfunction]
#[pyo3(signature = (cond, marginal, n, preset_name="tuned", chains=4, seed=0))]
fn llc<'py>(
    py: Python<'py>,
    cond: Vec<Vec<f64>>,
    marginal: Vec<f64>,
    n: usize,
    preset_name: &str,
    chains: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let op = operator(cond, marginal)?;
    let config = SGLDConfig::preset(preset(preset_name)?, n, seed);
    let report = py
        .detach(|| llc_experiment(&op, Parametrization::FullTable, &config, chains, &FitConfig::default()))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("dim", report.dim)?;
    d.set_item("mean_lambda_hat", report.mean_lambda_hat)?;
    d.set_item("lambda_hats", report.estimates.iter().map(|e| e.lambda_hat).collect::<Vec<_>>())?;
    d.set_item("fit_converged", report.fit.converged)?;
    Ok(d)
}

/// Trajectory bound `g(t)` for `t = 1..=t_max` and the LLC gap bound.
#[pyfunction]
#[pyo3(signature = (a, b, q, m, n, t_max=100, preset_name="paper"))]
fn bounds<'py>(
    py: Python<'py>,
    a: f64,
    b: f64,
    q: f64,
    m: f64,
    n: usize,
    t_max: usize,
    preset_name: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let config = SGLDConfig::preset(preset(preset_name)?, n, 0);
    let window = window_check(&config, m);
    if !window.holds {
        return Err(PyValueError::new_err(format!(
            "hyperparameter window violated: M*n*beta = {} not in ({}, {})",
            window.mnb, window.lower, window.upper
        )));
    }
    let g = (1..=t_max).map(|t| bound_g(t, a, 0.0, &config, m)).collect::<seqmodes::Result<Vec<_>>>().map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("g", g)?;
    d.set_item("main_bound", main_theorem_bound(a, b, 0.0, 0.0, q, m, &config).map_err(to_py)?)?;
    Ok(d)
}

#[pymodule]
pub fn seqmodes_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(language_operator, m)?)?;
    m.add_function(wrap_pyfunction!(check_language, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(truncate, m)?)?;
    m.add_function(wrap_pyfunction!(llc, m)?)?;
    m.add_function(wrap_pyfunction!(bounds, m)?)?;
    Ok(())
}
