//! Python module `firessd`: model construction, cost reports, inference,
//! box utilities and evaluation.

use std::fs::File;
use std::io::BufReader;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use fire_ssd::analysis::CostReport;
use fire_ssd::fire::{validate_cardinality, FireConfig};
use fire_ssd::gradcheck::{run_all, GradcheckConfig};
use fire_ssd::graph::{build_fire_ssd, check_appended_layers, AblationFlags, FireSsdConfig, ModelGraph};
use fire_ssd::io::{load_ppm, load_weights_into, save_weights, xavier_init};
use fire_ssd::nn::ConvSpec;
use fire_ssd::ssd::records::{group_by_image, read_records, BoxRecord};
use fire_ssd::ssd::{self, ApMethod, BBox, DetectConfig, PriorBox};
use fire_ssd::{Error, Shape4};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for fire_ssd::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Any serializable value as plain Python objects.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

type Corners = (f64, f64, f64, f64);

fn bbox((xmin, ymin, xmax, ymax): Corners) -> BBox {
    BBox::new(xmin, ymin, xmax, ymax)
}

fn corners(b: BBox) -> Corners {
    (b.xmin, b.ymin, b.xmax, b.ymax)
}

fn prior((cx, cy, w, h): Corners) -> PriorBox {
    PriorBox { cx, cy, w, h }
}

/// A dense NCHW float32 tensor.
#[pyclass(module = "firessd", frozen)]
struct Tensor {
    inner: fire_ssd::Tensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f32>) -> PyResult<Self> {
        let (n, c, h, w) = shape;
        Ok(Self { inner: fire_ssd::Tensor::from_vec(Shape4::new(n, c, h, w), data).py()? })
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize, usize)) -> PyResult<Self> {
        let (n, c, h, w) = shape;
        Ok(Self { inner: fire_ssd::Tensor::zeros(Shape4::new(n, c, h, w)).py()? })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.inner.shape();
        (s.n, s.c, s.h, s.w)
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let (n, c, h, w) = self.shape();
        format!("Tensor(shape=({n}, {c}, {h}, {w}))")
    }
}

/// Convolution with `weight` shaped `(out, in / groups, k, k)`.
#[pyfunction]
#[pyo3(signature = (x, weight, bias=None, stride=1, pad=0, groups=1))]
fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<Vec<f32>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> PyResult<Tensor> {
    let ws = weight.inner.shape();
    if ws.h != ws.w {
        return Err(PyValueError::new_err("kernel must be square"));
    }
    let spec = ConvSpec::new(ws.c * groups, ws.n, ws.h).stride(stride).pad(pad).groups(groups).bias(bias.is_some());
    let inner = fire_ssd::nn::conv2d(&x.inner, &spec, &weight.inner, bias.as_deref().unwrap_or(&[])).py()?;
    Ok(Tensor { inner })
}

fn flags(ablation: &str) -> PyResult<AblationFlags> {
    AblationFlags::preset(ablation).ok_or_else(|| {
        PyValueError::new_err(format!("unknown ablation {ablation:?}; use baseline, wfm, wfm-drmd or full"))
    })
}

/// A Fire SSD network for one ablation variant.
#[pyclass(module = "firessd")]
struct Model {
    cfg: FireSsdConfig,
    graph: ModelGraph,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (ablation="full", squeeze=48, seed=None))]
    fn new(ablation: &str, squeeze: usize, seed: Option<u64>) -> PyResult<Self> {
        let cfg = FireSsdConfig { appended_squeeze: squeeze, ..Default::default() };
        let mut graph = build_fire_ssd(&cfg, flags(ablation)?).py()?;
        if let Some(seed) = seed {
            graph.set_params(xavier_init(&graph, seed)).py()?;
        }
        Ok(Self { cfg, graph })
    }

    #[getter]
    fn total_params(&self) -> PyResult<usize> {
        Ok(CostReport::build(&self.graph, self.cfg.input_hw).py()?.total_params)
    }

    #[pyo3(signature = (input_hw=300))]
    fn total_macs(&self, input_hw: usize) -> PyResult<u64> {
        Ok(CostReport::build(&self.graph, input_hw).py()?.total_macs)
    }

    /// Per-layer cost report as a dict.
    #[pyo3(signature = (input_hw=300))]
    fn cost_report<'py>(&self, py: Python<'py>, input_hw: usize) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &CostReport::build(&self.graph, input_hw).py()?)
    }

    fn layer_names(&self) -> Vec<String> {
        self.graph.layers().iter().map(|l| l.name.clone()).collect()
    }

    /// Appended-layer rows with expected and actual `(side, stride, channels)`.
    fn check_shapes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &check_appended_layers(&self.graph).py()?)
    }

    fn init_xavier(&mut self, seed: u64) -> PyResult<()> {
        self.graph.set_params(xavier_init(&self.graph, seed)).py()
    }

    fn save_weights(&self, path: &str) -> PyResult<()> {
        save_weights(self.graph.params(), path).py()
    }

    fn load_weights(&mut self, path: &str) -> PyResult<()> {
        load_weights_into(&mut self.graph, path).py()
    }

    /// `(loc, conf)` head tensors for each of the six branches.
    fn forward(&self, py: Python<'_>, image: &Tensor) -> PyResult<Vec<(Tensor, Tensor)>> {
        let heads = py.detach(|| self.graph.forward(&image.inner)).py()?;
        Ok(heads.into_iter().map(|h| (Tensor { inner: h.loc }, Tensor { inner: h.conf })).collect())
    }

    /// Detections on a P6 PPM file as a list of dicts in normalized coordinates.
    #[pyo3(signature = (path, conf=0.5, nms=0.45, top_k=200))]
    fn detect_ppm<'py>(
        &self,
        py: Python<'py>,
        path: &str,
        conf: f64,
        nms: f64,
        top_k: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let dc = DetectConfig { conf_thresh: conf, nms_thresh: nms, top_k };
        let dets = py
            .detach(|| {
                let x = load_ppm(path)?;
                let priors = ssd::generate_priors(&self.cfg.prior_config())?;
                ssd::detect(&self.graph.forward(&x)?, &priors, &dc)
            })
            .py()?;
        let records: Vec<BoxRecord> = dets[0].iter().map(|d| BoxRecord::from_detection(path, d)).collect();
        to_py(py, &records)
    }
}

#[pyfunction]
fn iou(a: Corners, b: Corners) -> f64 {
    ssd::iou(&bbox(a), &bbox(b))
}

/// Offsets of box `gt` (corners) relative to `prior` (center, size).
#[pyfunction]
fn encode_box(gt: Corners, prior_box: Corners) -> PyResult<(f64, f64, f64, f64)> {
    let [a, b, c, d] = ssd::encode_box(&bbox(gt), &prior(prior_box)).py()?;
    Ok((a, b, c, d))
}

#[pyfunction]
fn decode_box(loc: (f64, f64, f64, f64), prior_box: Corners) -> Corners {
    corners(ssd::decode_box([loc.0, loc.1, loc.2, loc.3], &prior(prior_box)))
}

/// Indices of kept boxes, best first.
#[pyfunction]
#[pyo3(signature = (boxes, scores, iou_thresh=0.45, top_k=200))]
fn nms(boxes: Vec<Corners>, scores: Vec<f64>, iou_thresh: f64, top_k: usize) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let dets: Vec<(BBox, f64)> = boxes.into_iter().map(bbox).zip(scores).collect();
    Ok(ssd::nms(&dets, iou_thresh, top_k))
}

/// The default 8732 anchors as `(cx, cy, w, h)`.
#[pyfunction]
fn generate_priors() -> PyResult<Vec<(f64, f64, f64, f64)>> {
    let priors = ssd::generate_priors(&FireSsdConfig::default().prior_config()).py()?;
    Ok(priors.iter().map(|p| (p.cx, p.cy, p.w, p.h)).collect())
}

/// mAP report for JSON-lines detection and ground-truth files.
#[pyfunction]
#[pyo3(signature = (dets_path, gts_path, iou_thresh=0.5, eleven_point=false))]
fn evaluate_files<'py>(
    py: Python<'py>,
    dets_path: &str,
    gts_path: &str,
    iou_thresh: f64,
    eleven_point: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let read = |p: &str| -> fire_ssd::Result<Vec<BoxRecord>> { read_records(BufReader::new(File::open(p)?)) };
    let (_, d, g) = group_by_image(&read(dets_path).py()?, &read(gts_path).py()?).py()?;
    let method = if eleven_point { ApMethod::ElevenPoint } else { ApMethod::AllPoints };
    to_py(py, &ssd::evaluate_map(&d, &g, iou_thresh, method))
}

/// Cardinality balance of a wide fire module's expand paths.
#[pyfunction]
#[pyo3(signature = (expand1x1=256, expand3x3=256, groups1x1=2, groups3x3=16))]
fn cardinality<'py>(
    py: Python<'py>,
    expand1x1: usize,
    expand3x3: usize,
    groups1x1: usize,
    groups3x3: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = FireConfig::new(expand1x1 + expand3x3, 64, expand1x1, expand3x3).wide(groups1x1, groups3x3);
    to_py(py, &validate_cardinality(&cfg))
}

#[pyfunction]
#[pyo3(signature = (seed=0, cases=12, eps=1e-3, tol=1e-2))]
fn gradcheck<'py>(py: Python<'py>, seed: u64, cases: usize, eps: f64, tol: f64) -> PyResult<Bound<'py, PyAny>> {
    let cfg = GradcheckConfig { seed, cases, eps, tol, ..Default::default() };
    let report = py.detach(|| run_all(&cfg)).py()?;
    to_py(py, &report)
}

#[pymodule]
fn firessd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(encode_box, m)?)?;
    m.add_function(wrap_pyfunction!(decode_box, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(generate_priors, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_files, m)?)?;
    m.add_function(wrap_pyfunction!(cardinality, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        assert_eq!(flags("full").unwrap(), AblationFlags::FULL);
        assert_eq!(flags("wfm-drmd").unwrap(), AblationFlags::WFM_DRMD);
        assert!(flags("tiny").is_err());
    }

    #[test]
    fn box_tuples_round_trip() {
        let c = (0.1, 0.2, 0.5, 0.9);
        assert_eq!(corners(bbox(c)), c);
        let p = prior((0.5, 0.5, 0.2, 0.4));
        assert_eq!((p.cx, p.cy, p.w, p.h), (0.5, 0.5, 0.2, 0.4));
    }
}
