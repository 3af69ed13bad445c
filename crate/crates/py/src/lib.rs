//! Python bindings for the `fieldline` toolkit.
//!
//! Masks cross the boundary as `InstanceMask` objects or as lists of rows of
//! booleans; structured results (reports, GeoJSON) come back as plain dicts.

use std::path::PathBuf;

use fieldline::backend::{self, BaselineConfig, GradientThreshold};
use fieldline::datagen;
use fieldline::eval::{self, EvalConfig};
use fieldline::mask::{self, Bitmap};
use fieldline::pipeline::{self, PipelineConfig};
use fieldline::raster::{self, RasterPatch};
use fieldline::vector;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

create_exception!(fieldline_py, FieldlineError, PyException);

fn to_py(e: fieldline::Error) -> PyErr {
    FieldlineError::new_err(format!("E:{}:{}", e.code(), e))
}

fn config_err(e: serde_json::Error) -> PyErr {
    FieldlineError::new_err(format!("E:CONFIG:{e}"))
}

/// Parses `text` (JSON) into a Python object via the stdlib `json` module.
fn json_to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (value.to_string(),))
}

#[pyclass(name = "InstanceMask", module = "fieldline_py", from_py_object)]
#[derive(Clone)]
pub struct PyInstanceMask {
    inner: mask::InstanceMask,
}

#[pymethods]
impl PyInstanceMask {
    /// Builds a mask from run-length counts (column-major, background first).
    #[new]
    fn new(width: u32, height: u32, counts: Vec<u32>) -> PyResult<Self> {
        let inner = mask::InstanceMask::from_counts(width, height, counts).map_err(to_py)?;
        Ok(PyInstanceMask { inner })
    }

    /// Builds a mask from a list of rows of truthy values.
    #[staticmethod]
    fn from_rows(rows: Vec<Vec<bool>>) -> PyResult<Self> {
        Ok(PyInstanceMask {
            inner: mask::rle_encode(&bitmap_from_rows(rows)?),
        })
    }

    #[getter]
    fn width(&self) -> u32 {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height()
    }

    #[getter]
    fn counts(&self) -> Vec<u32> {
        self.inner.counts().to_vec()
    }

    fn area(&self) -> u64 {
        self.inner.area()
    }

    /// `(x, y, width, height)` of the foreground, or `None` if empty.
    fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        self.inner
            .bbox()
            .map(|r| (r.offset_x, r.offset_y, r.width, r.height))
    }

    fn to_rows(&self) -> Vec<Vec<bool>> {
        rows_from_bitmap(&self.inner.to_bitmap())
    }

    fn iou(&self, other: &PyInstanceMask) -> PyResult<f64> {
        mask::mask_iou(&self.inner, &other.inner).map_err(to_py)
    }

    fn boundary_band(&self, thickness: u32) -> PyResult<PyInstanceMask> {
        let inner = mask::boundary_band(&self.inner, thickness).map_err(to_py)?;
        Ok(PyInstanceMask { inner })
    }

    fn __eq__(&self, other: &PyInstanceMask) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "InstanceMask({}x{}, area={})",
            self.inner.width(),
            self.inner.height(),
            self.inner.area()
        )
    }
}

fn bitmap_from_rows(rows: Vec<Vec<bool>>) -> PyResult<Bitmap> {
    let height = rows.len() as u32;
    let width = rows.first().map_or(0, |r| r.len()) as u32;
    if rows.iter().any(|r| r.len() as u32 != width) {
        return Err(FieldlineError::new_err("E:SHAPE:rows have different lengths"));
    }
    Bitmap::from_vec(width, height, rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows_from_bitmap(bm: &Bitmap) -> Vec<Vec<bool>> {
    bm.bits()
        .chunks(bm.width().max(1) as usize)
        .map(|r| r.to_vec())
        .collect()
}

#[pyclass(name = "DetectionSet", module = "fieldline_py", from_py_object)]
#[derive(Clone)]
pub struct PyDetectionSet {
    inner: backend::DetectionSet,
}

#[pymethods]
impl PyDetectionSet {
    #[new]
    fn new(width: u32, height: u32) -> Self {
        PyDetectionSet {
            inner: backend::DetectionSet::empty(width, height),
        }
    }

    #[getter]
    fn width(&self) -> u32 {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height
    }

    #[pyo3(signature = (id, mask, score=None))]
    fn add(&mut self, id: u64, mask: &PyInstanceMask, score: Option<f64>) -> PyResult<()> {
        self.inner.instances.push(backend::FieldInstance {
            id,
            mask: mask.inner.clone(),
            score,
        });
        if let Err(msg) = self.inner.validate() {
            self.inner.instances.pop();
            return Err(FieldlineError::new_err(format!("E:SHAPE:{msg}")));
        }
        Ok(())
    }

    /// `[(id, score, mask), ...]` in stored order.
    fn instances(&self) -> Vec<(u64, Option<f64>, PyInstanceMask)> {
        self.inner
            .instances
            .iter()
            .map(|i| (i.id, i.score, PyInstanceMask { inner: i.mask.clone() }))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.instances.len()
    }

    fn to_rlej(&self) -> String {
        backend::to_rlej_string(&self.inner)
    }

    #[staticmethod]
    fn from_rlej(text: &str) -> PyResult<Self> {
        let inner = backend::parse_rlej(text)
            .map_err(|m| FieldlineError::new_err(format!("E:RLE:{m}")))?;
        Ok(PyDetectionSet { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let inner = backend::read_rlej(&path).map_err(to_py)?;
        Ok(PyDetectionSet { inner })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        backend::write_rlej(&path, &self.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "DetectionSet({}x{}, {} instances)",
            self.inner.width,
            self.inner.height,
            self.inner.instances.len()
        )
    }
}

#[pyfunction]
fn rle_encode(rows: Vec<Vec<bool>>) -> PyResult<PyInstanceMask> {
    PyInstanceMask::from_rows(rows)
}

#[pyfunction]
fn rle_decode(width: u32, height: u32, counts: Vec<u32>) -> PyResult<Vec<Vec<bool>>> {
    let bm = mask::rle_decode(width, height, &counts).map_err(to_py)?;
    Ok(rows_from_bitmap(&bm))
}

#[pyfunction]
fn mask_iou(a: &PyInstanceMask, b: &PyInstanceMask) -> PyResult<f64> {
    a.iou(b)
}

/// `[(index, offset_x, offset_y, width, height), ...]`
#[pyfunction]
fn build_tile_grid(
    width: u32,
    height: u32,
    tile: u32,
    overlap: u32,
) -> PyResult<Vec<(usize, u32, u32, u32, u32)>> {
    let grid = raster::build_tile_grid(width, height, tile, overlap).map_err(to_py)?;
    Ok(grid
        .tiles
        .iter()
        .map(|t| (t.index, t.offset_x, t.offset_y, t.width, t.height))
        .collect())
}

/// Runs the classical edge + watershed baseline on raw interleaved 8-bit pixels.
/// `threshold` is a number in [0, 1] or `None` for Otsu.
#[pyfunction]
#[pyo3(signature = (width, height, bands, pixels, min_area_px=64, threshold=None))]
fn segment_baseline(
    width: u32,
    height: u32,
    bands: u8,
    pixels: &Bound<'_, PyBytes>,
    min_area_px: u64,
    threshold: Option<f64>,
) -> PyResult<PyDetectionSet> {
    let patch = RasterPatch::new(width, height, bands, pixels.as_bytes().to_vec(), None).map_err(to_py)?;
    let cfg = BaselineConfig {
        gradient_threshold: threshold.map_or(GradientThreshold::Otsu, GradientThreshold::Fixed),
        min_area_px,
        ..BaselineConfig::default()
    };
    let inner = backend::baseline_edge_watershed(&patch, &cfg).map_err(to_py)?;
    Ok(PyDetectionSet { inner })
}

/// Full pipeline on a PNG; returns the GeoJSON FeatureCollection as a dict.
#[pyfunction]
#[pyo3(signature = (path, config=None))]
fn delineate<'py>(py: Python<'py>, path: PathBuf, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: PipelineConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(config_err)?,
        None => PipelineConfig::default(),
    };
    let backend = cfg.backend.build().map_err(to_py)?;
    let out = py
        .detach(|| pipeline::delineate_file(&path, backend.as_ref(), &cfg))
        .map_err(to_py)?;
    json_to_py(py, &out.geojson)
}

/// Closed rings of every 4-connected component: `[(exterior, [holes...]), ...]`.
#[pyfunction]
fn trace_contours(mask: &PyInstanceMask) -> PyResult<Vec<(vector::Ring, Vec<vector::Ring>)>> {
    let polys = vector::trace_contours(&mask.inner).map_err(to_py)?;
    Ok(polys.into_iter().map(|p| (p.exterior, p.holes)).collect())
}

#[pyfunction]
fn simplify(ring: vector::Ring, tolerance: f64) -> PyResult<vector::Ring> {
    vector::simplify(&ring, tolerance).map_err(to_py)
}

/// Rasterizes a GeoJSON parcel collection in pixel coordinates; returns
/// `[(parcel_index, mask), ...]`.
#[pyfunction]
fn rasterize_parcels(geojson: &str, width: u32, height: u32) -> PyResult<Vec<(usize, PyInstanceMask)>> {
    let parcels = datagen::parse_parcels(geojson)
        .map_err(|m| FieldlineError::new_err(format!("E:JSON:{m}")))?;
    let out = datagen::rasterize_parcels(&parcels, None, width, height).map_err(to_py)?;
    Ok(out
        .masks
        .into_iter()
        .map(|(i, inner)| (i, PyInstanceMask { inner }))
        .collect())
}

/// Scores predictions against ground truth; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (gt, pred, config=None))]
fn evaluate<'py>(
    py: Python<'py>,
    gt: Vec<PyDetectionSet>,
    pred: Vec<PyDetectionSet>,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: EvalConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(config_err)?,
        None => EvalConfig::default(),
    };
    let gt: Vec<_> = gt.into_iter().map(|d| d.inner).collect();
    let pred: Vec<_> = pred.into_iter().map(|d| d.inner).collect();
    let report = py.detach(|| eval::evaluate(&gt, &pred, &cfg)).map_err(to_py)?;
    json_to_py(py, &serde_json::to_value(&report).expect("report serializes"))
}

#[pyfunction]
#[pyo3(signature = (gt, pred, thickness=2))]
fn boundary_iou(gt: Vec<PyDetectionSet>, pred: Vec<PyDetectionSet>, thickness: u32) -> PyResult<f64> {
    let gt: Vec<_> = gt.into_iter().map(|d| d.inner).collect();
    let pred: Vec<_> = pred.into_iter().map(|d| d.inner).collect();
    Ok(eval::boundary_semantic_iou(&gt, &pred, thickness)
        .map_err(to_py)?
        .mean)
}

#[pymodule]
fn fieldline_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FieldlineError", m.py().get_type::<FieldlineError>())?;
    m.add_class::<PyInstanceMask>()?;
    m.add_class::<PyDetectionSet>()?;
    m.add_function(wrap_pyfunction!(rle_encode, m)?)?;
    m.add_function(wrap_pyfunction!(rle_decode, m)?)?;
    m.add_function(wrap_pyfunction!(mask_iou, m)?)?;
    m.add_function(wrap_pyfunction!(build_tile_grid, m)?)?;
    m.add_function(wrap_pyfunction!(segment_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(delineate, m)?)?;
    m.add_function(wrap_pyfunction!(trace_contours, m)?)?;
    m.add_function(wrap_pyfunction!(simplify, m)?)?;
    m.add_function(wrap_pyfunction!(rasterize_parcels, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_iou, m)?)?;
    Ok(())
}
