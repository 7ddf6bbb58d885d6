//! Python bindings for the moment retrieval core.
//!
//! Matrices cross the boundary as lists of rows; segments as
//! `(start_sec, end_sec, score)` tuples.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use matr_core::alignment::{self, AlignMode, AlignmentResult, CostMatrix};
use matr_core::autodiff::Array;
use matr_core::checkpoint::Checkpoint;
use matr_core::datakit::{self, SynthConfig};
use matr_core::heads::{self, Segment};
use matr_core::metrics::{self, PairId};
use matr_core::model::{Matr, ModelConfig};
use matr_core::pipeline::RunConfig;
use matr_core::MatrError;

type Rows = Vec<Vec<f64>>;
type Seg = (f64, f64, f64);

fn err(e: MatrError) -> PyErr {
    match e {
        MatrError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn array(rows: &Rows) -> PyResult<Array> {
    Array::from_rows(rows).map_err(err)
}

fn mode(name: &str) -> PyResult<AlignMode> {
    match name {
        "global" => Ok(AlignMode::Global),
        "subsequence" => Ok(AlignMode::Subsequence),
        _ => Err(PyValueError::new_err(format!("unknown mode {name:?}, expected 'global' or 'subsequence'"))),
    }
}

fn cost(rows: &Rows) -> PyResult<CostMatrix> {
    CostMatrix::from_rows(rows).map_err(err)
}

fn seg(s: Segment) -> Seg {
    (s.start_sec, s.end_sec, s.score)
}

fn json<T>(text: Option<&str>) -> PyResult<T>
where
    T: for<'de> serde::Deserialize<'de> + Default,
{
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// Result of soft-DTW plus hard-DTW on one cost matrix.
#[pyclass(frozen, name = "Alignment")]
struct PyAlignment {
    inner: AlignmentResult,
}

#[pymethods]
impl PyAlignment {
    #[getter]
    fn soft_cost(&self) -> f64 {
        self.inner.soft_cost
    }

    #[getter]
    fn hard_cost(&self) -> f64 {
        self.inner.hard_cost
    }

    #[getter]
    fn span(&self) -> Option<(usize, usize)> {
        self.inner.span
    }

    #[getter]
    fn expected_alignment(&self) -> Rows {
        self.inner.expected_alignment.to_rows()
    }

    #[getter]
    fn binary_path(&self) -> Rows {
        self.inner.binary_path.to_rows()
    }

    fn __repr__(&self) -> String {
        format!(
            "Alignment(soft_cost={:.6}, hard_cost={:.6}, span={:?})",
            self.inner.soft_cost, self.inner.hard_cost, self.inner.span
        )
    }
}

/// `1 - cos` between every target row and every query row.
#[pyfunction]
fn cosine_cost(target: Rows, query: Rows) -> PyResult<Rows> {
    let c = alignment::cosine_cost(&array(&target)?, &array(&query)?).map_err(err)?;
    Ok(c.values().to_rows())
}

/// Soft-DTW value and expected alignment.
#[pyfunction]
#[pyo3(signature = (cost_matrix, gamma, mode_name="subsequence"))]
fn soft_dtw(cost_matrix: Rows, gamma: f64, mode_name: &str) -> PyResult<(f64, Rows)> {
    let r = alignment::soft_dtw(&cost(&cost_matrix)?, gamma, mode(mode_name)?).map_err(err)?;
    Ok((r.soft_cost, r.expected_alignment.to_rows()))
}

/// Classical DTW value and its binary path.
#[pyfunction]
#[pyo3(signature = (cost_matrix, mode_name="subsequence"))]
fn hard_dtw(cost_matrix: Rows, mode_name: &str) -> PyResult<(f64, Rows)> {
    let (v, path) = alignment::hard_dtw(&cost(&cost_matrix)?, mode(mode_name)?);
    Ok((v, path.to_rows()))
}

#[pyfunction]
#[pyo3(signature = (cost_matrix, gamma, mode_name="subsequence"))]
fn align(cost_matrix: Rows, gamma: f64, mode_name: &str) -> PyResult<PyAlignment> {
    let inner = alignment::align(&cost(&cost_matrix)?, gamma, mode(mode_name)?).map_err(err)?;
    Ok(PyAlignment { inner })
}

#[pyfunction]
#[pyo3(signature = (segments, iou_threshold=heads::NMS_IOU_THRESHOLD))]
fn nms_1d(segments: Vec<Seg>, iou_threshold: f64) -> Vec<Seg> {
    let segs: Vec<Segment> = segments.iter().map(|&(s, e, p)| Segment::new(s, e, p)).collect();
    heads::nms_1d(&segs, iou_threshold).into_iter().map(seg).collect()
}

#[pyfunction]
fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    metrics::temporal_iou(&Segment::new(a.0, a.1, 0.0), &Segment::new(b.0, b.1, 0.0))
}

/// mIoU and R@1 for predictions and ground truth keyed by `(target_id, query_id)`.
#[pyfunction]
fn evaluate(
    predictions: BTreeMap<(String, String), (f64, f64)>,
    ground_truth: BTreeMap<(String, String), (f64, f64)>,
) -> PyResult<(f64, f64)> {
    let conv = |m: BTreeMap<(String, String), (f64, f64)>| -> BTreeMap<PairId, Segment> {
        m.into_iter().map(|((t, q), (s, e))| (PairId::new(t, q), Segment::new(s, e, 1.0))).collect()
    };
    let r = metrics::evaluate(&conv(predictions), &conv(ground_truth)).map_err(err)?;
    Ok((r.miou, r.recall_at_1))
}

/// Foreground flags and `(left, right)` offsets for a moment in seconds.
#[pyfunction]
#[pyo3(signature = (start_sec, end_sec, m, frame_period_sec=2.0))]
fn timestamps_to_labels(
    start_sec: f64,
    end_sec: f64,
    m: usize,
    frame_period_sec: f64,
) -> PyResult<(Vec<bool>, Vec<(f64, f64)>)> {
    let l = datakit::timestamps_to_labels((start_sec, end_sec), m, frame_period_sec).map_err(err)?;
    Ok((l.fg, l.offsets))
}

/// Test split of a synthetic dataset as `(target, query, (start_sec, end_sec))` triples.
#[pyfunction]
#[pyo3(signature = (seed, config_json=None))]
fn synthetic_pairs(seed: u64, config_json: Option<&str>) -> PyResult<Vec<(Rows, Rows, (f64, f64))>> {
    let cfg: SynthConfig = json(config_json)?;
    let ds = datakit::gen_synthetic(&cfg, seed).map_err(err)?;
    Ok(ds
        .test
        .into_iter()
        .map(|p| {
            (
                p.target.features.to_rows(),
                p.query.features.to_rows(),
                (p.annotation.start_sec, p.annotation.end_sec),
            )
        })
        .collect())
}

/// Full gen-data, pre-training, training and evaluation run; returns `(mIoU, R@1)`.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config_json: &str) -> PyResult<(f64, f64)> {
    let cfg: RunConfig = json(Some(config_json))?;
    let r = py.detach(|| matr_core::pipeline::run_pipeline(&cfg)).map_err(err)?;
    Ok((r.report.miou, r.report.recall_at_1))
}

/// The moment retrieval network.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Matr,
}

#[pymethods]
impl PyModel {
    /// Fresh model from a JSON `ModelConfig` (defaults for missing fields).
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = json(config_json)?;
        Ok(PyModel { inner: Matr::new(cfg, seed).map_err(err)? })
    }

    /// Loads the weights stored in a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(PyModel { inner: ck.model().map_err(err)? })
    }

    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string(self.inner.config()).unwrap_or_default()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().numel()
    }

    /// Per-frame foreground probabilities and boundary offsets.
    fn predict(&self, target: Rows, query: Rows) -> PyResult<(Vec<f64>, Vec<(f64, f64)>)> {
        let p = self.inner.predict(&array(&target)?, &array(&query)?).map_err(err)?;
        Ok((p.fg_probs, p.offsets))
    }

    /// Best segment after decoding and NMS.
    #[pyo3(signature = (target, query, frame_period_sec=2.0))]
    fn localize(&self, target: Rows, query: Rows, frame_period_sec: f64) -> PyResult<Seg> {
        let p = self.inner.predict(&array(&target)?, &array(&query)?).map_err(err)?;
        let segs = heads::decode_segments(&p, frame_period_sec).map_err(err)?;
        let kept = heads::nms_1d(&segs, heads::NMS_IOU_THRESHOLD);
        heads::select_top1(&kept).map(seg).map_err(err)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Model(d={}, k={}, l={}, input_dim={})", c.d, c.k, c.l, c.input_dim)
    }
}

#[pymodule]
fn matr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAlignment>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(cosine_cost, m)?)?;
    m.add_function(wrap_pyfunction!(soft_dtw, m)?)?;
    m.add_function(wrap_pyfunction!(hard_dtw, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(nms_1d, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_iou, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(timestamps_to_labels, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
