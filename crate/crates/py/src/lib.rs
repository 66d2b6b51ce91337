//! Python bindings for the core estimators and the scoring pipeline.
//! Tensors cross the boundary as flat row-major lists plus dimensions.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use smicqa::backbone::{load_backbone, synthetic_backbone, Backbone, BackboneConfig};
use smicqa::scoring::{score_pair, MetricKind, ScoreConfig, StageRange};
use smicqa::smic::{
    attention_map_for_stage, sample_projection_bank, smic_patch, FeaturePatchPair,
    ProjectionMode,
};
use smicqa::{ImagePlane, MicOptions, MicResult, SamplePairs};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_samples(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<SamplePairs> {
    SamplePairs::new(xs, ys).map_err(value_err)
}

fn to_tensor(flat: Vec<f64>, h: usize, w: usize, c: usize) -> PyResult<ndarray::Array3<f64>> {
    ndarray::Array3::from_shape_vec((h, w, c), flat)
        .map_err(|_| value_err(format!("flat tensor length must be {}", h * w * c)))
}

fn projection_mode(shared: bool) -> ProjectionMode {
    if shared {
        ProjectionMode::Shared
    } else {
        ProjectionMode::Independent
    }
}

/// MIC search outcome: normalized value plus the maximizing grid.
#[pyclass(name = "MicScore", frozen)]
struct PyMicScore {
    #[pyo3(get)]
    value: f64,
    #[pyo3(get)]
    best_mi: f64,
    #[pyo3(get)]
    n_x: usize,
    #[pyo3(get)]
    n_y: usize,
    #[pyo3(get)]
    x_cuts: Vec<f64>,
    #[pyo3(get)]
    y_cuts: Vec<f64>,
}

#[pymethods]
impl PyMicScore {
    fn __repr__(&self) -> String {
        format!(
            "MicScore(value={:.6}, grid={}x{})",
            self.value, self.n_x, self.n_y
        )
    }
}

impl From<MicResult> for PyMicScore {
    fn from(r: MicResult) -> Self {
        Self {
            value: r.value,
            best_mi: r.best_mi,
            n_x: r.best_grid.n_x(),
            n_y: r.best_grid.n_y(),
            x_cuts: r.best_grid.x_cuts().to_vec(),
            y_cuts: r.best_grid.y_cuts().to_vec(),
        }
    }
}

/// Admissible grid shapes for n samples.
#[pyfunction]
#[pyo3(signature = (n, bound_exponent = 0.5))]
fn admissible_grid_shapes(n: usize, bound_exponent: f64) -> Vec<(usize, usize)> {
    smicqa::admissible_grid_shapes(n, bound_exponent)
}

/// Exhaustive MIC (small inputs only).
#[pyfunction]
#[pyo3(signature = (xs, ys, bound_exponent = 0.5, exact_search_limit = 64))]
fn exact_mic(
    xs: Vec<f64>,
    ys: Vec<f64>,
    bound_exponent: f64,
    exact_search_limit: usize,
) -> PyResult<PyMicScore> {
    let opts = MicOptions {
        bound_exponent,
        exact_search_limit,
    };
    smicqa::exact_mic(&to_samples(xs, ys)?, &opts)
        .map(PyMicScore::from)
        .map_err(value_err)
}

/// Heuristic MIC (equipartition + dynamic programming).
#[pyfunction]
#[pyo3(signature = (xs, ys, bound_exponent = 0.5))]
fn approx_mic(xs: Vec<f64>, ys: Vec<f64>, bound_exponent: f64) -> PyResult<PyMicScore> {
    let opts = MicOptions {
        bound_exponent,
        ..MicOptions::default()
    };
    Ok(PyMicScore::from(smicqa::approx_mic(
        &to_samples(xs, ys)?,
        &opts,
    )))
}

/// Mutual information (nats) under an explicit grid given by its cuts.
#[pyfunction]
fn mi_under_grid(
    xs: Vec<f64>,
    ys: Vec<f64>,
    x_cuts: Vec<f64>,
    y_cuts: Vec<f64>,
) -> PyResult<f64> {
    let grid = smicqa::GridPartition::new(x_cuts.len() + 1, y_cuts.len() + 1, x_cuts, y_cuts)
        .map_err(value_err)?;
    Ok(smicqa::mi_under_grid(&to_samples(xs, ys)?, &grid))
}

/// Sliced MIC of one feature patch pair (flat row-major `h*w*c` tensors).
#[pyfunction]
#[pyo3(signature = (ref_patch, dist_patch, h, w, c, k = 32, seed = 0, shared = true))]
#[allow(clippy::too_many_arguments)]
fn smic(
    ref_patch: Vec<f64>,
    dist_patch: Vec<f64>,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    seed: u64,
    shared: bool,
) -> PyResult<f64> {
    let pair = FeaturePatchPair::new(
        to_tensor(ref_patch, h, w, c)?,
        to_tensor(dist_patch, h, w, c)?,
        0,
    )
    .map_err(value_err)?;
    let bank = sample_projection_bank(c, k, seed, projection_mode(shared));
    smic_patch(&pair, &bank, &MicOptions::default()).map_err(value_err)
}

/// Attention map (1 - sliced MIC per tile) over a feature pair. Returns
/// `(values, rows, cols)` with values row-major.
#[pyfunction]
#[pyo3(signature = (ref_features, dist_features, h, w, c, k = 32, seed = 0,
                    shared = true, patch = 7, stride = 7))]
#[allow(clippy::too_many_arguments)]
fn attention_map(
    ref_features: Vec<f64>,
    dist_features: Vec<f64>,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    seed: u64,
    shared: bool,
    patch: usize,
    stride: usize,
) -> PyResult<(Vec<f64>, usize, usize)> {
    let fr = to_tensor(ref_features, h, w, c)?;
    let fd = to_tensor(dist_features, h, w, c)?;
    let bank = sample_projection_bank(c, k, seed, projection_mode(shared));
    let map = attention_map_for_stage(&fr, &fd, &bank, 0, patch, stride, &MicOptions::default())
        .map_err(value_err)?;
    let (rows, cols) = map.values.dim();
    Ok((map.values.into_raw_vec_and_offset().0, rows, cols))
}

fn build_backbone(backbone: &str, backbone_seed: u64) -> PyResult<Backbone> {
    if backbone == "synthetic" {
        return Ok(synthetic_backbone(backbone_seed, [4, 8, 16, 32, 32]));
    }
    let config = BackboneConfig::from_toml_file(backbone).map_err(value_err)?;
    load_backbone(&config).map_err(value_err)
}

/// Score a reference/distorted image pair. `backbone` is either
/// "synthetic" or a path to a backbone TOML config.
#[pyfunction]
#[pyo3(signature = (ref_path, dist_path, metric = "psnr", smic = true, seed = 0, k = 32,
                    stages = "3:4", projection = "shared", backbone = "synthetic",
                    backbone_seed = 0, traditional_stride = 1, uniform_attention = false))]
#[allow(clippy::too_many_arguments)]
fn score_image_pair<'py>(
    py: Python<'py>,
    ref_path: &str,
    dist_path: &str,
    metric: &str,
    smic: bool,
    seed: u64,
    k: usize,
    stages: &str,
    projection: &str,
    backbone: &str,
    backbone_seed: u64,
    traditional_stride: usize,
    uniform_attention: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let metric: MetricKind = metric.parse().map_err(value_err)?;
    let stages: StageRange = stages.parse().map_err(value_err)?;
    let projection = match projection {
        "shared" => ProjectionMode::Shared,
        "independent" => ProjectionMode::Independent,
        other => return Err(value_err(format!("unknown projection mode `{other}`"))),
    };
    let backbone = build_backbone(backbone, backbone_seed)?;
    let config = ScoreConfig {
        metric,
        smic,
        seed,
        k,
        stages,
        projection,
        traditional_attention_stride: traditional_stride,
        force_uniform_attention: uniform_attention,
        ..ScoreConfig::default()
    };
    let reference = ImagePlane::from_path(ref_path).map_err(value_err)?;
    let distorted = ImagePlane::from_path(dist_path).map_err(value_err)?;
    let score = score_pair(&backbone, &config, &reference, &distorted).map_err(value_err)?;

    let out = PyDict::new(py);
    out.set_item("metric", score.metric.to_string())?;
    out.set_item("value", score.value)?;
    out.set_item("db", score.db)?;
    out.set_item("smic", score.smic)?;
    out.set_item("seed", score.seed)?;
    out.set_item(
        "per_stage_terms",
        score.per_stage_terms.unwrap_or_else(BTreeMap::new),
    )?;
    Ok(out)
}

/// Spearman rank correlation with average-rank ties.
#[pyfunction]
fn srcc(pred: Vec<f64>, mos: Vec<f64>) -> PyResult<f64> {
    smicqa::srcc(&pred, &mos).map_err(value_err)
}

/// Pearson linear correlation.
#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    smicqa::pearson(&xs, &ys).map_err(value_err)
}

/// Five-parameter logistic alignment; returns `(params, plcc, converged)`.
#[pyfunction]
fn fit_logistic_plcc(pred: Vec<f64>, mos: Vec<f64>) -> PyResult<(Vec<f64>, f64, bool)> {
    let fit = smicqa::fit_logistic_and_plcc(&pred, &mos).map_err(value_err)?;
    Ok((fit.params.to_vec(), fit.plcc, fit.converged))
}

#[pymodule]
fn smicqa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(admissible_grid_shapes, m)?)?;
    m.add_function(wrap_pyfunction!(exact_mic, m)?)?;
    m.add_function(wrap_pyfunction!(approx_mic, m)?)?;
    m.add_function(wrap_pyfunction!(mi_under_grid, m)?)?;
    m.add_function(wrap_pyfunction!(smic, m)?)?;
    m.add_function(wrap_pyfunction!(attention_map, m)?)?;
    m.add_function(wrap_pyfunction!(score_image_pair, m)?)?;
    m.add_function(wrap_pyfunction!(srcc, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(fit_logistic_plcc, m)?)?;
    m.add_class::<PyMicScore>()?;
    Ok(())
}
