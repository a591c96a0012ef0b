//! Python bindings: tensors, the convolution engines, the analytic models and
//! network execution on the simulated device.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use winocaffe::device::{Device, DeviceConfig, EventCounts, ReprogramPolicy};
use winocaffe::net::{parse_netdef, Network};
use winocaffe::perf::{self, DspCostModel, LayerWork, PerfConfig};
use winocaffe::reference::{self, ConvSpec};
use winocaffe::tensor::{Shape, Tensor4D};
use winocaffe::verify::run_verification;
use winocaffe::winograd::{self, OpCounters, Strategy};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_strategy(s: &str) -> PyResult<Strategy> {
    s.parse().map_err(value_err)
}

/// A dense n × c × h × w float32 tensor.
#[pyclass(name = "Tensor", module = "winocaffe", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor4D,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data=None))]
    fn new(shape: (usize, usize, usize, usize), data: Option<Vec<f32>>) -> PyResult<Self> {
        let s = Shape::new(shape.0, shape.1, shape.2, shape.3);
        let inner = match data {
            Some(d) => Tensor4D::from_vec(s, d),
            None => Tensor4D::zeros(s),
        }
        .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Tensor4D::load(path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(value_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.inner.shape();
        (s.n, s.c, s.h, s.w)
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn at(&self, n: usize, c: usize, h: usize, w: usize) -> PyResult<f32> {
        self.inner.at(n, c, h, w).map_err(value_err)
    }

    fn max_abs(&self) -> f32 {
        self.inner.max_abs()
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor({})", self.inner.shape())
    }
}

fn counters_dict<'py>(py: Python<'py>, c: &OpCounters) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("tile_transforms", c.tile_transforms)?;
    d.set_item("input_stage_adds", c.input_stage_adds)?;
    d.set_item("pe_transform_adds", c.pe_transform_adds)?;
    d.set_item("edge_column_adds", c.edge_column_adds)?;
    d.set_item("multiplications", c.multiplications)?;
    d.set_item("output_transform_adds", c.output_transform_adds)?;
    d.set_item("accumulate_adds", c.accumulate_adds)?;
    d.set_item("pe_loads", c.pe_loads.clone())?;
    Ok(d)
}

fn events_dict<'py>(py: Python<'py>, e: &EventCounts) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("host_to_device", e.host_to_device)?;
    d.set_item("device_to_host", e.device_to_host)?;
    d.set_item("activation_host_to_device", e.activation_host_to_device)?;
    d.set_item("activation_device_to_host", e.activation_device_to_host)?;
    d.set_item("programs", e.programs)?;
    d.set_item("launches", e.launches)?;
    Ok(d)
}

/// Same-size 3×3 convolution through the Winograd engine.
#[pyfunction]
#[pyo3(signature = (input, weights, bias=None, strategy="case3"))]
fn conv3x3_winograd(
    input: &PyTensor,
    weights: &PyTensor,
    bias: Option<Vec<f32>>,
    strategy: &str,
) -> PyResult<PyTensor> {
    let out = winograd::conv3x3_winograd(
        &input.inner,
        &weights.inner,
        bias.as_deref(),
        parse_strategy(strategy)?,
        None,
    )
    .map_err(value_err)?;
    Ok(PyTensor { inner: out })
}

/// Like `conv3x3_winograd`, also returning the operation counters.
#[pyfunction]
#[pyo3(signature = (input, weights, strategy="case3", pe_count=4))]
fn conv3x3_winograd_counted<'py>(
    py: Python<'py>,
    input: &PyTensor,
    weights: &PyTensor,
    strategy: &str,
    pe_count: usize,
) -> PyResult<(PyTensor, Bound<'py, PyDict>)> {
    if pe_count == 0 {
        return Err(value_err("pe_count must be positive"));
    }
    let mut c = OpCounters::new(pe_count);
    let out = winograd::conv3x3_winograd(&input.inner, &weights.inner, None, parse_strategy(strategy)?, Some(&mut c))
        .map_err(value_err)?;
    Ok((PyTensor { inner: out }, counters_dict(py, &c)?))
}

/// Reference direct convolution with a square kernel.
#[pyfunction]
#[pyo3(signature = (input, weights, bias=None, stride=1, pad=1))]
fn direct_conv(
    input: &PyTensor,
    weights: &PyTensor,
    bias: Option<Vec<f32>>,
    stride: usize,
    pad: usize,
) -> PyResult<PyTensor> {
    let ws = weights.inner.shape();
    let spec = ConvSpec {
        kernel_h: ws.h,
        kernel_w: ws.w,
        stride,
        pad,
        out_channels: ws.n,
    };
    let out = reference::direct_conv(&input.inner, &weights.inner, bias.as_deref(), &spec).map_err(value_err)?;
    Ok(PyTensor { inner: out })
}

#[pyfunction]
#[pyo3(signature = (strategy, p, q_out, pe_count=4))]
fn count_transform_ops<'py>(
    py: Python<'py>,
    strategy: &str,
    p: usize,
    q_out: usize,
    pe_count: usize,
) -> PyResult<Bound<'py, PyDict>> {
    if pe_count == 0 {
        return Err(value_err("pe_count must be positive"));
    }
    counters_dict(py, &winograd::count_transform_ops(parse_strategy(strategy)?, p, q_out, pe_count))
}

#[pyfunction]
#[pyo3(signature = (pe_count=4, dsp_per_add=2, dsp_per_mul=3))]
fn dsp_comparison<'py>(
    py: Python<'py>,
    pe_count: usize,
    dsp_per_add: u64,
    dsp_per_mul: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = PerfConfig {
        pe_count,
        ..PerfConfig::default()
    };
    let c = perf::dsp_comparison(&cfg, &DspCostModel { dsp_per_add, dsp_per_mul });
    let d = PyDict::new(py);
    d.set_item("case1", c.case1)?;
    d.set_item("case2", c.case2)?;
    d.set_item("case3", c.case3)?;
    d.set_item("saving", c.saving)?;
    d.set_item("measured_saving", c.measured_saving)?;
    Ok(d)
}

/// Cycles to produce one output map of a `c`-channel `h × w` layer.
#[pyfunction]
#[pyo3(signature = (c, h, w, pe_count=4, pipeline_fill=32))]
fn cycles_per_output_map(c: usize, h: usize, w: usize, pe_count: usize, pipeline_fill: u64) -> PyResult<u64> {
    if pe_count == 0 {
        return Err(value_err("pe_count must be positive"));
    }
    let cfg = PerfConfig {
        pe_count,
        pipeline_fill,
        ..PerfConfig::default()
    };
    Ok(perf::cycles_per_output_map(&LayerWork::new(1, c, 1, h, w), &cfg))
}

/// Seconds for `n` images of `cycles` each.
#[pyfunction]
#[pyo3(signature = (cycles, n, freq_hz=2.0e8, cu_count=2))]
fn total_latency(cycles: u64, n: usize, freq_hz: f64, cu_count: usize) -> f64 {
    let cfg = PerfConfig {
        freq_hz,
        cu_count,
        ..PerfConfig::default()
    };
    perf::total_latency(cycles, n, &cfg)
}

#[pyfunction]
#[pyo3(signature = (n, c, k, h, w, groups=1))]
fn effective_flops(n: usize, c: usize, k: usize, h: usize, w: usize, groups: usize) -> PyResult<u64> {
    if groups == 0 || c % groups != 0 {
        return Err(value_err("groups must divide c"));
    }
    Ok(perf::effective_flops(&LayerWork::new(n, c, k, h, w).with_groups(groups)))
}

/// Random equivalence trials; returns a summary dict.
#[pyfunction]
#[pyo3(signature = (trials=50, seed=1))]
fn verify<'py>(py: Python<'py>, trials: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = run_verification(trials, seed);
    let d = PyDict::new(py);
    d.set_item("trials", r.trials)?;
    d.set_item("passed", r.passed())?;
    d.set_item("max_abs", r.oracle.max_abs)?;
    d.set_item("strategy_max_abs", r.strategies.max_abs)?;
    d.set_item("violations", r.oracle.violations + r.strategies.violations)?;
    Ok(d)
}

/// A network bound to its own simulated device.
#[pyclass(name = "Net", module = "winocaffe")]
pub struct PyNet {
    net: Network,
    device: Device,
}

fn new_device(cus: usize, skip_reprogram: bool) -> PyResult<Device> {
    if cus == 0 {
        return Err(value_err("cus must be positive"));
    }
    Ok(Device::new(DeviceConfig {
        cu_count: cus,
        reprogram: if skip_reprogram {
            ReprogramPolicy::SkipIfLoaded
        } else {
            ReprogramPolicy::Always
        },
        ..DeviceConfig::default()
    }))
}

#[pymethods]
impl PyNet {
    /// Parse a model description and attach seeded random weights.
    #[staticmethod]
    #[pyo3(signature = (text, seed=1, cus=2, skip_reprogram=false))]
    fn parse(text: &str, seed: u64, cus: usize, skip_reprogram: bool) -> PyResult<Self> {
        let device = new_device(cus, skip_reprogram)?;
        let def = parse_netdef(text).map_err(value_err)?;
        let net = Network::with_random_weights(def, seed, &device).map_err(value_err)?;
        Ok(Self { net, device })
    }

    /// Load a model file and its weight sidecar files.
    #[staticmethod]
    #[pyo3(signature = (path, cus=2, skip_reprogram=false))]
    fn from_file(path: PathBuf, cus: usize, skip_reprogram: bool) -> PyResult<Self> {
        let device = new_device(cus, skip_reprogram)?;
        let net = Network::from_file(&path, &device).map_err(value_err)?;
        Ok(Self { net, device })
    }

    #[getter]
    fn name(&self) -> String {
        self.net.def().name.clone()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize, usize) {
        let s = self.net.def().input_shape;
        (s.n, s.c, s.h, s.w)
    }

    /// Run one forward pass. Returns a dict with the output tensor, per-layer
    /// rows and event counts.
    fn forward<'py>(&mut self, py: Python<'py>, input: &PyTensor) -> PyResult<Bound<'py, PyDict>> {
        let r = self.net.forward(&input.inner, &mut self.device).map_err(value_err)?;
        let d = PyDict::new(py);
        let mut layers = Vec::with_capacity(r.layers.len());
        for l in &r.layers {
            let row = PyDict::new(py);
            row.set_item("name", &l.name)?;
            row.set_item("kind", l.kind.name())?;
            row.set_item("brew", l.brew.to_string())?;
            row.set_item("ran_on", l.ran_on.to_string())?;
            row.set_item("fallback", l.fallback)?;
            row.set_item("wall_ms", l.wall_ms)?;
            row.set_item("modeled_ms", l.modeled_ms)?;
            row.set_item("program_ms", l.program_ms)?;
            layers.push(row);
        }
        d.set_item("layers", layers)?;
        d.set_item("events", events_dict(py, &r.events)?)?;
        d.set_item("total_ms", r.total_ms)?;
        d.set_item("program_ms", r.program_ms)?;
        d.set_item("trace", r.trace.iter().map(|e| e.to_line()).collect::<Vec<_>>())?;
        d.set_item("output", PyTensor { inner: r.output })?;
        Ok(d)
    }
}

#[pymodule(name = "winocaffe")]
pub fn winocaffe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyNet>()?;
    m.add_function(wrap_pyfunction!(conv3x3_winograd, m)?)?;
    m.add_function(wrap_pyfunction!(conv3x3_winograd_counted, m)?)?;
    m.add_function(wrap_pyfunction!(direct_conv, m)?)?;
    m.add_function(wrap_pyfunction!(count_transform_ops, m)?)?;
    m.add_function(wrap_pyfunction!(dsp_comparison, m)?)?;
    m.add_function(wrap_pyfunction!(cycles_per_output_map, m)?)?;
    m.add_function(wrap_pyfunction!(total_latency, m)?)?;
    m.add_function(wrap_pyfunction!(effective_flops, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
