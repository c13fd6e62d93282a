//! Python bindings: checkpoints, video coding, schedules, BD-rate and the
//! entropy coder.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use kmfv::bitstream::{decode_video, encode_video, BitstreamContainer};
use kmfv::entropy::cdf::CdfTable;
use kmfv::evalkit::{RDCurve, RDPoint};
use kmfv::media_io::{Frame, VideoSequence};
use kmfv::params::ParameterStore;

fn py_err(e: kmfv::Error) -> PyErr {
    match e {
        kmfv::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A trained or freshly initialised codec.
#[pyclass(name = "Checkpoint", module = "kmfv", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCheckpoint {
    inner: ParameterStore,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: ParameterStore::load(std::path::Path::new(path)).map_err(py_err)?,
        })
    }

    /// Untrained codec with the given channel widths.
    #[staticmethod]
    #[pyo3(signature = (m=32, n=24, k=16, ks=15, use_interpolator=true, seed=0))]
    fn init(m: usize, n: usize, k: usize, ks: usize, use_interpolator: bool, seed: u64) -> PyResult<Self> {
        let cfg = kmfv::codec_nets::ModelConfig {
            m,
            n,
            k,
            ks,
            use_interpolator,
            iframe_m: m,
            iframe_n: n,
            ..Default::default()
        };
        let mut p = kmfv::codec_nets::init_params(&cfg, seed).map_err(py_err)?;
        if use_interpolator {
            p.meta.interpolator = Some(kmfv::interpolation::InterpolatorSpec::average());
        }
        Ok(PyCheckpoint { inner: p })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(py_err)
    }

    #[getter]
    fn model_id(&self) -> PyResult<u32> {
        self.inner.model_id().map_err(py_err)
    }

    #[getter]
    fn lambda_(&self) -> Option<f64> {
        self.inner.meta.lambda
    }

    #[getter]
    fn use_interpolator(&self) -> bool {
        self.inner.meta.model.as_ref().is_some_and(|m| m.use_interpolator)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(module, parameters, share_percent)` rows.
    fn report(&self) -> PyResult<Vec<(String, usize, f64)>> {
        let cfg = self
            .inner
            .meta
            .model
            .clone()
            .ok_or_else(|| PyValueError::new_err("checkpoint has no model configuration"))?;
        Ok(kmfv::codec_nets::parameter_report(&self.inner, &cfg)
            .into_iter()
            .map(|r| (r.module, r.parameters, r.share))
            .collect())
    }
}

/// Result of [`encode`].
#[pyclass(name = "Encoded", module = "kmfv")]
pub struct PyEncoded {
    #[pyo3(get)]
    data: Vec<u8>,
    #[pyo3(get)]
    bpp: f64,
    #[pyo3(get)]
    psnr: f64,
    #[pyo3(get)]
    width: usize,
    #[pyo3(get)]
    height: usize,
    recon: Vec<Frame>,
}

#[pymethods]
impl PyEncoded {
    /// Encoder-side reconstructions as little-endian f32 CHW planes.
    fn reconstructions(&self) -> Vec<Vec<u8>> {
        self.recon.iter().map(|f| f.tensor().to_le_bytes()).collect()
    }

    fn __len__(&self) -> usize {
        self.recon.len()
    }
}

fn frames_to_bytes(seq: &VideoSequence) -> Vec<Vec<u8>> {
    seq.frames.iter().map(|f| f.tensor().to_le_bytes()).collect()
}

/// Load a source (PNG directory, `file.yuv:WxH`, or
/// `synthetic:<kind>:<frames>:<size>:<seed>`) and return its frames as
/// little-endian f32 CHW planes, plus width and height.
#[pyfunction]
#[pyo3(signature = (source, max_frames=0))]
fn load_source(source: &str, max_frames: usize) -> PyResult<(Vec<Vec<u8>>, usize, usize)> {
    let seq = kmfv::cli::load_source(source, max_frames).map_err(py_err)?;
    Ok((frames_to_bytes(&seq), seq.width(), seq.height()))
}

#[pyfunction]
#[pyo3(signature = (source, checkpoint, gop=8, max_frames=0))]
fn encode(source: &str, checkpoint: &PyCheckpoint, gop: usize, max_frames: usize) -> PyResult<PyEncoded> {
    let seq = kmfv::cli::load_source(source, max_frames).map_err(py_err)?;
    let out = encode_video(&seq, &checkpoint.inner, gop).map_err(py_err)?;
    Ok(PyEncoded {
        data: out.bytes(),
        bpp: out.bpp(),
        psnr: out.mean_psnr(),
        width: seq.width(),
        height: seq.height(),
        recon: out.reconstructions,
    })
}

/// Decode a container to f32 CHW planes.
#[pyfunction]
fn decode(data: &[u8], checkpoint: &PyCheckpoint) -> PyResult<Vec<Vec<u8>>> {
    let seq = decode_video(data, &checkpoint.inner).map_err(py_err)?;
    Ok(frames_to_bytes(&seq))
}

/// `(width, height, frame_count, gop_size, model_id, flags)`.
#[pyfunction]
fn read_header(data: &[u8]) -> PyResult<(u16, u16, u32, u8, u32, u8)> {
    let h = BitstreamContainer::parse_header(data).map_err(py_err)?;
    Ok((h.width, h.height, h.frame_count, h.gop_size, h.model_id, h.flags))
}

/// Coding steps as `(display, type, prev_ref, next_ref, level)` tuples.
#[pyfunction]
#[pyo3(signature = (n_frames, gop=8))]
fn schedule(n_frames: usize, gop: usize) -> PyResult<Vec<(usize, String, Option<usize>, Option<usize>, u8)>> {
    let s = kmfv::gop::build_schedule(n_frames, gop).map_err(py_err)?;
    Ok(s.steps
        .iter()
        .map(|st| (st.display_index, format!("{:?}", st.frame_type), st.ref_prev, st.ref_next, st.level))
        .collect())
}

#[pyfunction]
fn lambda_for_level(base: f64, level: u8) -> PyResult<f64> {
    kmfv::gop::lambda_for_level(base, level).map_err(py_err)
}

fn to_curve(name: &str, pts: Vec<(f64, f64)>) -> RDCurve {
    RDCurve::new(
        name,
        pts.into_iter()
            .map(|(bpp, psnr)| RDPoint {
                bpp,
                psnr,
                label: String::new(),
            })
            .collect(),
    )
}

/// BD-rate in percent of `test` against `anchor`, each a list of
/// `(bpp, psnr)` points.
#[pyfunction]
fn bd_rate(anchor: Vec<(f64, f64)>, test: Vec<(f64, f64)>) -> PyResult<f64> {
    kmfv::evalkit::bd_rate(&to_curve("anchor", anchor), &to_curve("test", test)).map_err(py_err)
}

/// Range-code symbols with the fixed Gaussian table (row per symbol).
#[pyfunction]
fn range_encode(symbols: Vec<i32>, rows: Vec<usize>) -> PyResult<Vec<u8>> {
    Ok(kmfv::entropy::range_encode(&symbols, CdfTable::gaussian(), &rows)
        .map_err(py_err)?
        .payload)
}

#[pyfunction]
fn range_decode(payload: Vec<u8>, rows: Vec<usize>) -> PyResult<Vec<i32>> {
    let chunk = kmfv::entropy::CodedChunk {
        payload,
        symbol_count: rows.len(),
        model: kmfv::entropy::ChunkModel::GaussianY,
    };
    kmfv::entropy::range_decode(&chunk, CdfTable::gaussian(), &rows).map_err(py_err)
}

/// Scale of each Gaussian table row.
#[pyfunction]
fn gaussian_scales() -> Vec<f32> {
    kmfv::entropy::gaussian_scale_table().to_vec()
}

#[pymodule]
#[pyo3(name = "kmfv")]
fn kmfv_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyEncoded>()?;
    m.add_function(wrap_pyfunction!(load_source, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(read_header, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_for_level, m)?)?;
    m.add_function(wrap_pyfunction!(bd_rate, m)?)?;
    m.add_function(wrap_pyfunction!(range_encode, m)?)?;
    m.add_function(wrap_pyfunction!(range_decode, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_scales, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
