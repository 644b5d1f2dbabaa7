//! Python bindings: keypoint sets, parameter computation, annotation
//! records, PCK and the cohort statistics.

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

use spinometry::dataset::{self, DEFAULT_CROP_MARGIN};
use spinometry::geometry::{self, Keypoint, Landmark, Parameter, View};
use spinometry::report::{self, ReportOptions};
use spinometry::{eval, stats};

create_exception!(spinometry_py, GeometryError, PyValueError, "Keypoints cannot produce a parameter.");
create_exception!(spinometry_py, DatasetError, PyValueError, "Annotation file or record problem.");
create_exception!(spinometry_py, EvalError, PyValueError, "Evaluation input problem.");

fn geometry_err(e: geometry::GeometryError) -> PyErr {
    GeometryError::new_err(format!("{}: {e}", e.kind()))
}

fn dataset_err(e: dataset::DatasetError) -> PyErr {
    DatasetError::new_err(format!("{}: {e}", e.kind()))
}

fn eval_err(e: impl std::fmt::Display) -> PyErr {
    EvalError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> PyResult<T> {
    s.parse().map_err(|_| PyValueError::new_err(format!("unknown {what} {s:?}")))
}

/// Plain Python objects via the json module.
fn to_python<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "KeypointSet", module = "spinometry_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyKeypointSet {
    inner: geometry::KeypointSet,
}

#[pymethods]
impl PyKeypointSet {
    /// `points` holds `(name, x_px, y_px)` tuples; names in `hidden` are
    /// kept but marked not visible.
    #[new]
    #[pyo3(signature = (points, pixel_spacing, view = "WHOLE_SPINE", hidden = Vec::new()))]
    fn new(points: Vec<(String, f64, f64)>, pixel_spacing: f64, view: &str, hidden: Vec<String>) -> PyResult<Self> {
        let hidden: Vec<Landmark> = hidden.iter().map(|h| parse(h, "landmark")).collect::<PyResult<_>>()?;
        let mut kps = Vec::with_capacity(points.len());
        for (name, x, y) in points {
            let lm: Landmark = parse(&name, "landmark")?;
            let mut kp = Keypoint::new(lm, x, y);
            kp.visible = !hidden.contains(&lm);
            kps.push(kp);
        }
        let inner = geometry::KeypointSet::new(kps, pixel_spacing, parse(view, "view")?).map_err(geometry_err)?;
        Ok(PyKeypointSet { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text)
            .map(|inner| PyKeypointSet { inner })
            .map_err(|e| GeometryError::new_err(e.to_string()))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("keypoints serialize")
    }

    #[getter]
    fn pixel_spacing(&self) -> f64 {
        self.inner.pixel_spacing()
    }

    #[getter]
    fn view(&self) -> &'static str {
        self.inner.view().as_str()
    }

    /// `(name, x_px, y_px, visible)` in landmark order.
    fn points(&self) -> Vec<(&'static str, f64, f64, bool)> {
        self.inner.iter().map(|k| (k.name.as_str(), k.x_px, k.y_px, k.visible)).collect()
    }

    /// Landmarks the view requires that are absent or hidden.
    fn missing(&self) -> Vec<&'static str> {
        self.inner.missing().into_iter().map(Landmark::as_str).collect()
    }

    fn compute(&self) -> PyResult<PyParameters> {
        compute(self)
    }

    fn __len__(&self) -> usize {
        self.inner.iter().count()
    }

    fn __repr__(&self) -> String {
        format!(
            "KeypointSet(view={}, n={}, pixel_spacing={})",
            self.inner.view(),
            self.inner.iter().count(),
            self.inner.pixel_spacing()
        )
    }
}

#[pyclass(name = "Parameters", module = "spinometry_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyParameters {
    inner: geometry::SpinopelvicParameters,
}

#[pymethods]
impl PyParameters {
    #[getter]
    fn view(&self) -> &'static str {
        self.inner.view.as_str()
    }
    #[getter]
    fn sva_mm(&self) -> Option<f64> {
        self.inner.sva_mm
    }
    #[getter]
    fn pt_deg(&self) -> Option<f64> {
        self.inner.pt_deg
    }
    #[getter]
    fn ss_deg(&self) -> Option<f64> {
        self.inner.ss_deg
    }
    #[getter]
    fn pi_deg(&self) -> Option<f64> {
        self.inner.pi_deg
    }
    #[getter]
    fn ll_deg(&self) -> Option<f64> {
        self.inner.ll_deg
    }
    #[getter]
    fn t1pa_deg(&self) -> Option<f64> {
        self.inner.t1pa_deg
    }
    #[getter]
    fn l1pa_deg(&self) -> Option<f64> {
        self.inner.l1pa_deg
    }

    /// Value by short name (`"PI"`, `"SVA"`, ...); `None` when absent.
    fn get(&self, name: &str) -> PyResult<Option<f64>> {
        Ok(self.inner.get(parse::<Parameter>(name, "parameter")?))
    }

    fn as_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_python(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        let parts: Vec<String> = self.inner.present().map(|(p, v)| format!("{p}={v:.3}")).collect();
        format!("Parameters({}, {})", self.inner.view, parts.join(", "))
    }
}

#[pyclass(name = "AnnotationRecord", module = "spinometry_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyAnnotationRecord {
    inner: dataset::AnnotationRecord,
}

#[pymethods]
impl PyAnnotationRecord {
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        dataset::load_record(path).map(|inner| PyAnnotationRecord { inner }).map_err(dataset_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        dataset::decode_record(text, "<string>".as_ref())
            .map(|(inner, _)| PyAnnotationRecord { inner })
            .map_err(dataset_err)
    }

    fn to_json(&self) -> String {
        dataset::encode_record(&self.inner, None)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        dataset::save_record(&self.inner, path).map_err(dataset_err)
    }

    #[getter]
    fn study_id(&self) -> &str {
        &self.inner.study_id
    }

    #[getter]
    fn rater_id(&self) -> &str {
        &self.inner.rater_id
    }

    #[getter]
    fn view(&self) -> &'static str {
        self.inner.view().as_str()
    }

    #[getter]
    fn keypoints(&self) -> PyKeypointSet {
        PyKeypointSet { inner: self.inner.keypoints.clone() }
    }

    /// Invariant violations; empty when the record is valid.
    fn check(&self) -> Vec<String> {
        self.inner.check()
    }

    fn compute(&self) -> PyResult<PyParameters> {
        geometry::compute_parameters(&self.inner.keypoints)
            .map(|inner| PyParameters { inner })
            .map_err(geometry_err)
    }

    #[pyo3(signature = (margin = DEFAULT_CROP_MARGIN))]
    fn crop_lumbosacral(&self, margin: f64) -> PyResult<Self> {
        dataset::crop_lumbosacral(&self.inner, margin).map(|inner| PyAnnotationRecord { inner }).map_err(dataset_err)
    }

    fn __repr__(&self) -> String {
        format!("AnnotationRecord({}, rater={}, view={})", self.inner.study_id, self.inner.rater_id, self.inner.view())
    }
}

#[pyfunction]
fn compute(keypoints: &PyKeypointSet) -> PyResult<PyParameters> {
    geometry::compute_parameters(&keypoints.inner).map(|inner| PyParameters { inner }).map_err(geometry_err)
}

/// Parameters for a JSON keypoint set, as JSON; the `/compute` contract.
#[pyfunction]
fn compute_json(text: &str) -> PyResult<String> {
    let ks = PyKeypointSet::from_json(text)?;
    let p = compute(&ks)?;
    Ok(serde_json::to_string(&p.inner).expect("parameters serialize"))
}

#[pyfunction]
fn load_record(path: std::path::PathBuf) -> PyResult<PyAnnotationRecord> {
    PyAnnotationRecord::load(path)
}

#[pyfunction]
fn find_annotation_files(dir: std::path::PathBuf) -> PyResult<Vec<std::path::PathBuf>> {
    dataset::find_annotation_files(&dir).map_err(dataset_err)
}

fn sets(items: &[PyRef<'_, PyKeypointSet>]) -> Vec<geometry::KeypointSet> {
    items.iter().map(|k| k.inner.clone()).collect()
}

#[pyfunction]
fn pck<'py>(
    py: Python<'py>,
    preds: Vec<PyRef<'py, PyKeypointSet>>,
    gts: Vec<PyRef<'py, PyKeypointSet>>,
    thresholds_mm: Vec<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let curve = eval::pck(&sets(&preds), &sets(&gts), &thresholds_mm).map_err(eval_err)?;
    to_python(py, &curve)
}

/// ICC(A,1) of a subjects-by-raters matrix given as rows.
#[pyfunction]
fn icc_a1(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = stats::RatingMatrix::from_rows(&rows).map_err(eval_err)?;
    stats::icc_a1(&m).map(|r| r.icc).map_err(eval_err)
}

#[pyfunction]
fn wilcoxon_rank_sum<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let r = stats::wilcoxon_rank_sum(&a, &b).map_err(eval_err)?;
    to_python(py, &r)
}

#[pyfunction]
fn descriptive<'py>(py: Python<'py>, xs: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let d = stats::descriptive(&xs).map_err(eval_err)?;
    to_python(py, &d)
}

/// Full evaluation report as JSON text.
#[pyfunction]
#[pyo3(signature = (preds, gts, thresholds_mm = None, seed = None, cohort_id = "cohort"))]
fn evaluate(
    preds: Vec<PyRef<'_, PyAnnotationRecord>>,
    gts: Vec<PyRef<'_, PyAnnotationRecord>>,
    thresholds_mm: Option<Vec<f64>>,
    seed: Option<u64>,
    cohort_id: &str,
) -> PyResult<String> {
    let opts = ReportOptions {
        cohort_id: cohort_id.to_string(),
        thresholds_mm: thresholds_mm.unwrap_or_else(report::default_thresholds),
        seed,
        ..ReportOptions::default()
    };
    let records = |items: &[PyRef<'_, PyAnnotationRecord>]| items.iter().map(|r| r.inner.clone()).collect();
    report::evaluate_cohort(records(&preds), records(&gts), &opts).map(|r| r.to_json()).map_err(eval_err)
}

#[pymodule]
fn spinometry_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("LANDMARKS", Landmark::ALL.map(Landmark::as_str).to_vec())?;
    m.add("PARAMETERS", Parameter::ALL.map(Parameter::as_str).to_vec())?;
    m.add("VIEWS", vec![View::WholeSpine.as_str(), View::Lumbosacral.as_str()])?;
    m.add("GeometryError", py.get_type::<GeometryError>())?;
    m.add("DatasetError", py.get_type::<DatasetError>())?;
    m.add("EvalError", py.get_type::<EvalError>())?;
    m.add_class::<PyKeypointSet>()?;
    m.add_class::<PyParameters>()?;
    m.add_class::<PyAnnotationRecord>()?;
    m.add_function(wrap_pyfunction!(compute, m)?)?;
    m.add_function(wrap_pyfunction!(compute_json, m)?)?;
    m.add_function(wrap_pyfunction!(load_record, m)?)?;
    m.add_function(wrap_pyfunction!(find_annotation_files, m)?)?;
    m.add_function(wrap_pyfunction!(pck, m)?)?;
    m.add_function(wrap_pyfunction!(icc_a1, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon_rank_sum, m)?)?;
    m.add_function(wrap_pyfunction!(descriptive, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
