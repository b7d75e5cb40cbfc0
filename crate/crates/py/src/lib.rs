//! Python bindings: synthetic data, training, inference, scoring and AP.
//!
//! Structured values cross the boundary as plain dicts and lists, going
//! through Python's `json` module.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::querypose::bench::{default_cases, run_bench, to_csv};
use ::querypose::config::RunConfig;
use ::querypose::data::{read_dataset, synth_generate, write_dataset};
use ::querypose::eval::{average_precision, OksConfig, PoseInstance, Scoring, DEFAULT_FALLOFF};
use ::querypose::gradsuite::gradient_suite;
use ::querypose::likelihood::{self, LaplaceParams};
use ::querypose::model::{stack_hwc, PoseModel};
use ::querypose::numerics::Checkpoint;
use ::querypose::pipeline::{evaluate, EvalOptions};
use ::querypose::train::{prepare_samples, train as train_model};
use ::querypose::{Error, NdArray};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Contract(_) | Error::EmptyInput(_) | Error::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(v: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = v.py().import("json")?.call_method1("dumps", (v,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn run_config(config: &str) -> PyResult<RunConfig> {
    RunConfig::parse(config, &[]).map_err(err)
}

fn scoring(rescore: bool) -> Scoring {
    if rescore {
        Scoring::Rescored
    } else {
        Scoring::BboxOnly
    }
}

/// A keypoint regression model.
#[pyclass(unsendable)]
struct Model {
    inner: PoseModel,
}

#[pymethods]
impl Model {
    /// Fresh model from a TOML config string (empty for defaults).
    #[new]
    #[pyo3(signature = (config="", seed=0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg = run_config(config)?;
        Ok(Self { inner: PoseModel::new(&cfg.model(), seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self { inner: PoseModel::from_checkpoint(&ck).map_err(err)? })
    }

    fn save(&self, py: Python<'_>, path: PathBuf) -> PyResult<()> {
        let meta = serde_json::json!({ "model": self.inner.config() });
        py.detach(|| self.inner.to_checkpoint(meta).save(&path)).map_err(err)
    }

    #[getter]
    fn keypoints(&self) -> usize {
        self.inner.keypoints()
    }

    /// `(height, width)` of an input patch.
    #[getter]
    fn input_size(&self) -> (usize, usize) {
        self.inner.input_size()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.store.num_trainable()
    }

    /// Predicts Laplace `mu` and `scale` (each K x 2, normalized patch
    /// coordinates) for a list of patches given as nested `[H][W][3]` lists.
    fn predict<'py>(&self, py: Python<'py>, patches: Vec<Vec<Vec<[f64; 3]>>>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let (h, w) = self.inner.input_size();
        let arrays = patches
            .into_iter()
            .map(|p| {
                if p.len() != h || p.iter().any(|row| row.len() != w) {
                    return Err(PyValueError::new_err(format!("each patch must be {h} x {w} x 3")));
                }
                Ok(NdArray::from_vec(p.into_iter().flatten().flatten().collect()).reshape([h, w, 3]).map_err(err)?)
            })
            .collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&NdArray> = arrays.iter().collect();
        let preds = py.detach(|| stack_hwc(&refs).and_then(|x| self.inner.predict(&x, None))).map_err(err)?;
        preds
            .iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("mu", p.mu.data().chunks(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>())?;
                d.set_item("scale", p.scale.data().chunks(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>())?;
                Ok(d)
            })
            .collect()
    }

    /// Evaluates on a dataset directory and returns the report as a dict.
    #[pyo3(signature = (dataset, rescore=true, score_a=0.2))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: PathBuf, rescore: bool, score_a: f64) -> PyResult<Bound<'py, PyAny>> {
        let opts = EvalOptions { score_a, scoring: scoring(rescore), ..Default::default() };
        let report = py
            .detach(|| read_dataset(&dataset).and_then(|d| evaluate(&self.inner, &d.scenes, &opts)))
            .map_err(err)?;
        to_py(py, &report)
    }
}

/// Writes `count` synthetic scenes to `out` and returns the count.
#[pyfunction]
#[pyo3(signature = (out, count, seed=0, config=""))]
fn synth(py: Python<'_>, out: PathBuf, count: usize, seed: u64, config: &str) -> PyResult<usize> {
    let cfg = run_config(config)?.synth();
    py.detach(|| {
        let scenes = synth_generate(seed, count, &cfg)?;
        write_dataset(&out, &scenes, &cfg, seed)?;
        Ok(scenes.len())
    })
    .map_err(err)
}

/// Trains on a dataset directory; returns `(model, final mean L1 in pixels)`.
#[pyfunction]
#[pyo3(signature = (dataset, config="", out=None))]
fn train(py: Python<'_>, dataset: PathBuf, config: &str, out: Option<PathBuf>) -> PyResult<(Model, f64)> {
    let cfg = run_config(config)?;
    let outcome = py
        .detach(|| {
            let data = read_dataset(&dataset)?;
            let samples = prepare_samples(&data.scenes, (cfg.input_size[0], cfg.input_size[1]), cfg.crop_padding)?;
            train_model(&cfg.model(), &cfg.train(), &samples, None, out.as_deref())
        })
        .map_err(err)?;
    Ok((Model { inner: outcome.model }, outcome.final_l1_px))
}

/// `P(|x - mu| <= a)` on one axis for a Laplace scale `b`.
#[pyfunction]
fn axis_score(b: f64, a: f64) -> f64 {
    likelihood::axis_score(b, a)
}

/// Per-keypoint confidence from `[bx, by]` scales.
#[pyfunction]
#[pyo3(signature = (scales, a=0.2))]
fn keypoint_score(scales: Vec<[f64; 2]>, a: f64) -> PyResult<Vec<f64>> {
    let k = scales.len();
    let scale = NdArray::new([k, 2], scales.into_iter().flatten().collect()).map_err(err)?;
    let params = LaplaceParams::new(NdArray::zeros([k, 2]), scale).map_err(err)?;
    likelihood::keypoint_score(&params, a).map_err(err)
}

/// OKS average precision of detection dicts against ground-truth dicts.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, rescore=true))]
fn average_precision_report<'py>(
    py: Python<'py>,
    detections: &Bound<'py, PyAny>,
    ground_truth: &Bound<'py, PyAny>,
    rescore: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let dets: Vec<PoseInstance> = from_py(detections)?;
    let gts: Vec<PoseInstance> = from_py(ground_truth)?;
    let k = gts.first().map(|g| g.num_keypoints()).ok_or_else(|| PyValueError::new_err("no ground truth"))?;
    let report = average_precision(&dets, &gts, &OksConfig::uniform(k, DEFAULT_FALLOFF), scoring(rescore)).map_err(err)?;
    to_py(py, &report)
}

/// Runs the gradient suite; returns `(name, max relative error, passed)` rows.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let checks = py.detach(|| gradient_suite(seed)).map_err(err)?;
    Ok(checks.into_iter().map(|c| {
        let ok = c.passed();
        (c.name, c.max_rel_err, ok)
    }).collect())
}

/// Attention benchmark as CSV text.
#[pyfunction]
#[pyo3(signature = (seed=0, reps=1))]
fn attention_bench(py: Python<'_>, seed: u64, reps: usize) -> PyResult<String> {
    let rows = py.detach(|| run_bench(&default_cases(), seed, reps)).map_err(err)?;
    Ok(to_csv(&rows))
}

#[pymodule]
fn querypose(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(axis_score, m)?)?;
    m.add_function(wrap_pyfunction!(keypoint_score, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision_report, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(attention_bench, m)?)?;
    Ok(())
}
