use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::pipeline::{self, Stage, StageOp};
use super::{Brew, LayerKind, LayerOp, LayerSpec, NetDef, ParseError, DEFAULT_PIPELINE_DEPTH};
use crate::device::{
    BufferRole, Device, DeviceError, EventCounts, EventRecord, KernelBinary, SyncedBuffer,
};
use crate::perf::{modeled_layer_latency, LayerWork, PerfConfig};
use crate::reference::{
    direct_conv, fully_connected, pool, pool_plane_rows, relu, relu_in_place, ConvSpec,
    LayerError, Matrix,
};
use crate::tensor::{Shape, Tensor4D, TensorError};
use crate::winograd::{WinogradConv, WinogradError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("weights for `{layer}` ({path}): {source}")]
    WeightFile {
        layer: String,
        path: PathBuf,
        source: TensorError,
    },
    #[error("missing weights for layer `{0}`")]
    MissingWeights(String),
    #[error("layer `{layer}`: weights have shape {got}, expected {expected}")]
    WeightShape {
        layer: String,
        got: Shape,
        expected: Shape,
    },
    #[error("layer `{layer}`: bias has {got} values, expected {expected}")]
    BiasLength {
        layer: String,
        got: usize,
        expected: usize,
    },
    #[error("input shape {got} does not match network input {expected}")]
    InputShape { got: Shape, expected: Shape },
    #[error("layer `{layer}`: {source}")]
    Layer { layer: String, source: LayerFailure },
}

#[derive(Debug, Error)]
pub enum LayerFailure {
    #[error(transparent)]
    Reference(#[from] LayerError),
    #[error(transparent)]
    Winograd(#[from] WinogradError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn in_layer<E: Into<LayerFailure>>(layer: &str) -> impl FnOnce(E) -> NetError + '_ {
    move |e| NetError::Layer {
        layer: layer.to_string(),
        source: e.into(),
    }
}

/// Weights and optional bias of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub weights: Tensor4D,
    pub bias: Option<Vec<f32>>,
}

struct Params {
    weights: Tensor4D,
    bias: Option<Vec<f32>>,
    winograd: Option<WinogradConv>,
    matrix: Option<Matrix>,
    /// Persistent parameter buffers; uploaded on first device use only.
    buffers: Vec<SyncedBuffer>,
}

impl Params {
    fn upload(&mut self) -> Result<(), DeviceError> {
        for b in &mut self.buffers {
            b.device_data()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub kind: LayerKind,
    pub brew: Brew,
    /// Where the layer actually ran.
    pub ran_on: Brew,
    /// Requested on the device but run on the host for lack of a device
    /// implementation.
    pub fallback: bool,
    pub wall_ms: f64,
    /// Modeled accelerator latency, for layers the model covers.
    pub modeled_ms: Option<f64>,
    /// Programming latency charged by an XCLProgram layer.
    pub program_ms: Option<f64>,
    pub output_shape: Shape,
}

#[derive(Clone, Debug)]
pub struct ForwardReport {
    pub output: Tensor4D,
    pub layers: Vec<LayerReport>,
    /// Wall time of the whole pass, in ms.
    pub total_ms: f64,
    /// Programming latency charged during the pass, kept out of layer times.
    pub program_ms: f64,
    pub events: EventCounts,
    /// Events appended during this pass.
    pub trace: Vec<EventRecord>,
}

impl ForwardReport {
    /// Summed wall time of all non-program layers.
    pub fn compute_ms(&self) -> f64 {
        self.layers
            .iter()
            .filter(|l| l.kind != LayerKind::XCLProgram)
            .map(|l| l.wall_ms)
            .sum()
    }

    pub fn modeled_ms(&self) -> f64 {
        self.layers.iter().filter_map(|l| l.modeled_ms).sum()
    }

    pub fn fallbacks(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.fallback)
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:<24} {:<7} {:<7} {:>10} {:>11} {:>11}  output",
            "layer", "kind", "brew", "ran on", "wall ms", "modeled ms", "program ms"
        );
        for l in &self.layers {
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                s,
                "{:<16} {:<24} {:<7} {:<7} {:>10.3} {:>11} {:>11}  {}{}",
                l.name,
                l.kind.name(),
                l.brew.to_string(),
                l.ran_on.to_string(),
                l.wall_ms,
                opt(l.modeled_ms),
                opt(l.program_ms),
                l.output_shape,
                if l.fallback { "  (host fallback)" } else { "" }
            );
        }
        let e = &self.events;
        let _ = writeln!(
            s,
            "total {:.3} ms, compute {:.3} ms, modeled {:.3} ms, programming {:.1} ms",
            self.total_ms,
            self.compute_ms(),
            self.modeled_ms(),
            self.program_ms
        );
        let _ = writeln!(
            s,
            "events: {} program, {} launch, {} host->device ({} activation), {} device->host ({} activation)",
            e.programs,
            e.launches,
            e.host_to_device,
            e.activation_host_to_device,
            e.device_to_host,
            e.activation_device_to_host
        );
        s
    }
}

/// A parsed network with its parameters attached.
pub struct Network {
    def: NetDef,
    params: HashMap<String, Params>,
    perf: PerfConfig,
    pipeline_depth: usize,
}

impl Network {
    /// Attach `weights` (keyed by layer name) to `def`. Parameter buffers
    /// record their transfers in `device`'s log.
    pub fn new(
        def: NetDef,
        mut weights: HashMap<String, LayerWeights>,
        device: &Device,
    ) -> Result<Self, NetError> {
        let mut params = HashMap::new();
        for spec in def.weighted_layers() {
            let (expected, bias_len) = spec.weight_shape().expect("weighted layer");
            let lw = weights
                .remove(&spec.name)
                .ok_or_else(|| NetError::MissingWeights(spec.name.clone()))?;
            if lw.weights.shape() != expected {
                return Err(NetError::WeightShape {
                    layer: spec.name.clone(),
                    got: lw.weights.shape(),
                    expected,
                });
            }
            if let Some(b) = &lw.bias {
                if b.len() != bias_len {
                    return Err(NetError::BiasLength {
                        layer: spec.name.clone(),
                        got: b.len(),
                        expected: bias_len,
                    });
                }
            }
            params.insert(spec.name.clone(), prepare(spec, lw, device)?);
        }
        Ok(Self {
            def,
            params,
            perf: PerfConfig::default(),
            pipeline_depth: DEFAULT_PIPELINE_DEPTH,
        })
    }

    /// Load weights from `<net>.<layer>.fcw` (and optional
    /// `<net>.<layer>.bias.fcw`) files in `dir`.
    pub fn load(def: NetDef, dir: &Path, device: &Device) -> Result<Self, NetError> {
        let mut weights = HashMap::new();
        for spec in def.weighted_layers() {
            let path = dir.join(def.weight_file(&spec.name));
            if !path.exists() {
                return Err(NetError::MissingWeights(format!("{} ({})", spec.name, path.display())));
            }
            let file_err = |path: &Path| {
                let path = path.to_path_buf();
                move |source| NetError::WeightFile {
                    layer: spec.name.clone(),
                    path,
                    source,
                }
            };
            let w = Tensor4D::load(&path).map_err(file_err(&path))?;
            let bias_path = dir.join(def.bias_file(&spec.name));
            let bias = if bias_path.exists() {
                Some(Tensor4D::load(&bias_path).map_err(file_err(&bias_path))?.into_vec())
            } else {
                None
            };
            weights.insert(spec.name.clone(), LayerWeights { weights: w, bias });
        }
        Self::new(def, weights, device)
    }

    pub fn from_file(model: &Path, device: &Device) -> Result<Self, NetError> {
        let text = std::fs::read_to_string(model).map_err(|source| NetError::Io {
            path: model.to_path_buf(),
            source,
        })?;
        let def = super::parse_netdef(&text)?;
        let dir = model.parent().unwrap_or(Path::new("."));
        Self::load(def, dir, device)
    }

    pub fn with_random_weights(def: NetDef, seed: u64, device: &Device) -> Result<Self, NetError> {
        let w = random_weights(&def, seed);
        Self::new(def, w, device)
    }

    pub fn with_perf(mut self, perf: PerfConfig) -> Self {
        self.perf = perf;
        self
    }

    pub fn with_pipeline_depth(mut self, depth: usize) -> Self {
        self.pipeline_depth = depth.max(1);
        self
    }

    pub fn def(&self) -> &NetDef {
        &self.def
    }

    pub fn weights(&self, layer: &str) -> Option<LayerWeights> {
        self.params.get(layer).map(|p| LayerWeights {
            weights: p.weights.clone(),
            bias: p.bias.clone(),
        })
    }

    /// Run one forward pass.
    pub fn forward(&mut self, input: &Tensor4D, device: &mut Device) -> Result<ForwardReport, NetError> {
        if input.shape() != self.def.input_shape {
            return Err(NetError::InputShape {
                got: input.shape(),
                expected: self.def.input_shape,
            });
        }
        let perf = PerfConfig {
            cu_count: device.cu_count(),
            ..self.perf
        };
        let mark = device.log().len();
        let start = Instant::now();
        let mut blob = device.host_buffer("data", BufferRole::Activation, input.data().to_vec());
        let mut reports = Vec::with_capacity(self.def.layers.len());
        let mut program_ms = 0.0;

        for spec in &self.def.layers {
            let t0 = Instant::now();
            let mut report = LayerReport {
                name: spec.name.clone(),
                kind: spec.kind(),
                brew: spec.brew,
                ran_on: spec.brew,
                fallback: false,
                wall_ms: 0.0,
                modeled_ms: None,
                program_ms: None,
                output_shape: spec.output_shape,
            };
            match &spec.op {
                LayerOp::Program { binary, kernels } => {
                    let bin = KernelBinary::with_modeled_cost(
                        binary.clone(),
                        kernels.clone(),
                        device.config().program_cost_range_ms,
                    )
                    .map_err(in_layer(&spec.name))?;
                    let ms = device.program(&bin);
                    program_ms += ms;
                    report.program_ms = Some(ms);
                }
                LayerOp::Pipeline { children, .. } => {
                    blob = run_pipeline(spec, children, &mut self.params, &mut blob, device, self.pipeline_depth)?;
                    let modeled: f64 = children.iter().filter_map(|c| modeled_ms(c, &perf)).sum();
                    report.modeled_ms = Some(modeled);
                }
                _ if spec.brew == Brew::Device && spec.kind().has_device_impl() => {
                    blob = run_device(spec, self.params.get_mut(&spec.name), &mut blob, device)?;
                    report.modeled_ms = modeled_ms(spec, &perf);
                }
                _ => {
                    report.fallback = spec.brew == Brew::Device;
                    report.ran_on = Brew::Host;
                    blob = run_host(spec, self.params.get(&spec.name), &mut blob, device)?;
                }
            }
            report.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            reports.push(report);
        }

        let data = blob.host_data().map_err(in_layer("output"))?.to_vec();
        let output = Tensor4D::from_vec(self.def.output_shape(), data).map_err(in_layer("output"))?;
        let total_ms = start.elapsed().as_secs_f64() * 1e3;
        let trace = device.log().since(mark);
        Ok(ForwardReport {
            output,
            layers: reports,
            total_ms,
            program_ms,
            events: EventCounts::of(&trace),
            trace,
        })
    }
}

fn prepare(spec: &LayerSpec, lw: LayerWeights, device: &Device) -> Result<Params, NetError> {
    let LayerWeights { weights, bias } = lw;
    let mut winograd = None;
    let mut matrix = None;
    let stored = match &spec.op {
        LayerOp::Winograd { strategy, .. } => {
            let conv = WinogradConv::new(&weights, bias.as_deref(), *strategy).map_err(in_layer(&spec.name))?;
            // The device keeps the filters in transformed form.
            let flat: Vec<f32> = conv.bank().blocks().iter().flatten().copied().collect();
            winograd = Some(conv);
            flat
        }
        LayerOp::FullyConnected { .. } => {
            matrix = Some(Matrix::from_tensor(&weights));
            weights.data().to_vec()
        }
        _ => weights.data().to_vec(),
    };
    let mut buffers = vec![device.host_buffer(format!("{}.weights", spec.name), BufferRole::Parameter, stored)];
    if let Some(b) = &bias {
        buffers.push(device.host_buffer(format!("{}.bias", spec.name), BufferRole::Parameter, b.clone()));
    }
    Ok(Params {
        weights,
        bias,
        winograd,
        matrix,
        buffers,
    })
}

fn modeled_ms(spec: &LayerSpec, perf: &PerfConfig) -> Option<f64> {
    match spec.op {
        LayerOp::Winograd { out, .. } => {
            let s = spec.input_shape;
            let work = LayerWork::new(s.n, s.c, out, s.h, s.w);
            Some(modeled_layer_latency(&work, perf) * 1e3)
        }
        _ => None,
    }
}

fn run_host(
    spec: &LayerSpec,
    params: Option<&Params>,
    blob: &mut SyncedBuffer,
    device: &Device,
) -> Result<SyncedBuffer, NetError> {
    let err = in_layer(&spec.name);
    let x = blob.host_data().map_err(in_layer(&spec.name))?;
    let x = Tensor4D::from_vec(spec.input_shape, x.to_vec()).map_err(in_layer(&spec.name))?;
    let p = || params.expect("weighted layers have parameters");
    let y = match &spec.op {
        LayerOp::Winograd { out, .. } => {
            direct_conv(&x, &p().weights, p().bias.as_deref(), &ConvSpec::same3x3(*out))
        }
        LayerOp::Direct(cs) => direct_conv(&x, &p().weights, p().bias.as_deref(), cs),
        LayerOp::Relu => Ok(relu(&x)),
        LayerOp::Pool(ps) => pool(&x, ps),
        LayerOp::FullyConnected { .. } => fully_connected(
            &x,
            p().matrix.as_ref().expect("fully connected matrix"),
            p().bias.as_deref(),
        ),
        LayerOp::Program { .. } | LayerOp::Pipeline { .. } => unreachable!("not a compute layer"),
    }
    .map_err(err)?;
    Ok(device.host_buffer(spec.name.clone(), BufferRole::Activation, y.into_vec()))
}

fn run_device(
    spec: &LayerSpec,
    params: Option<&mut Params>,
    blob: &mut SyncedBuffer,
    device: &Device,
) -> Result<SyncedBuffer, NetError> {
    let kernel = spec.kernel.as_deref().expect("device layer has a kernel");
    let params = match params {
        Some(p) => {
            p.upload().map_err(in_layer(&spec.name))?;
            Some(&*p)
        }
        None => None,
    };
    let (is, os) = (spec.input_shape, spec.output_shape);
    let x = blob.device_data().map_err(in_layer(&spec.name))?;
    let parts = device
        .dispatch(kernel, is.n, |a| {
            let x = &x[a.start * is.image_len()..(a.start + a.count) * is.image_len()];
            let mut y = vec![0.0f32; a.count * os.image_len()];
            match &spec.op {
                LayerOp::Winograd { .. } => {
                    let conv = params.and_then(|p| p.winograd.as_ref()).expect("prepared engine");
                    conv.forward_images(x, is.with_batch(a.count), &mut y, None);
                }
                LayerOp::Relu => {
                    y.copy_from_slice(x);
                    relu_in_place(&mut y);
                }
                LayerOp::Pool(ps) => {
                    y.clear();
                    for plane in x.chunks_exact(is.plane_len()) {
                        pool_plane_rows(plane, is.w, ps, os.w, 0..os.h, &mut y);
                    }
                }
                _ => unreachable!("kind has no device implementation"),
            }
            y
        })
        .map_err(in_layer(&spec.name))?;
    Ok(collect_device(spec, os, parts, device))
}

fn collect_device(spec: &LayerSpec, os: Shape, parts: Vec<Vec<f32>>, device: &Device) -> SyncedBuffer {
    let mut top = device.buffer(spec.name.clone(), BufferRole::Activation, os.len());
    let dst = top.mutable_device_data();
    let mut at = 0;
    for p in parts {
        dst[at..at + p.len()].copy_from_slice(&p);
        at += p.len();
    }
    top
}

fn run_pipeline(
    spec: &LayerSpec,
    children: &[LayerSpec],
    params: &mut HashMap<String, Params>,
    blob: &mut SyncedBuffer,
    device: &Device,
    depth: usize,
) -> Result<SyncedBuffer, NetError> {
    for c in children {
        if let Some(p) = params.get_mut(&c.name) {
            p.upload().map_err(in_layer(&c.name))?;
        }
    }
    let stages: Vec<Stage<'_>> = children
        .iter()
        .map(|c| Stage {
            op: match &c.op {
                LayerOp::Winograd { .. } => StageOp::Conv(
                    params[&c.name].winograd.as_ref().expect("prepared engine"),
                ),
                LayerOp::Relu => StageOp::Relu,
                LayerOp::Pool(ps) => StageOp::Pool(*ps),
                _ => unreachable!("checked at parse time"),
            },
            input: c.input_shape,
            output: c.output_shape,
        })
        .collect();
    let kernels: Vec<&str> = children
        .iter()
        .map(|c| c.kernel.as_deref().expect("pipeline child has a kernel"))
        .collect();
    let (is, os) = (spec.input_shape, spec.output_shape);
    let x = blob.device_data().map_err(in_layer(&spec.name))?;
    let parts = device
        .dispatch_fused(&kernels, is.n, |a| {
            let x = &x[a.start * is.image_len()..(a.start + a.count) * is.image_len()];
            pipeline::stream(&stages, x, a.count, depth)
        })
        .map_err(in_layer(&spec.name))?;
    Ok(collect_device(spec, os, parts, device))
}

/// Deterministic random weights for every weighted layer, scaled by fan-in.
pub fn random_weights(def: &NetDef, seed: u64) -> HashMap<String, LayerWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = HashMap::new();
    for spec in def.weighted_layers() {
        let (shape, k) = spec.weight_shape().expect("weighted layer");
        let bound = 1.0 / (shape.image_len() as f32).sqrt();
        let data = (0..shape.len()).map(|_| rng.gen_range(-bound..=bound)).collect();
        let weights = Tensor4D::from_vec(shape, data).expect("non-empty weight shape");
        let bias = Some((0..k).map(|_| rng.gen_range(-0.1f32..=0.1)).collect());
        out.insert(spec.name.clone(), LayerWeights { weights, bias });
    }
    out
}

/// Write weight (and bias) sidecar files for `weights` into `dir`.
pub fn save_weights(def: &NetDef, weights: &HashMap<String, LayerWeights>, dir: &Path) -> Result<Vec<PathBuf>, NetError> {
    let mut written = Vec::new();
    for spec in def.weighted_layers() {
        let Some(lw) = weights.get(&spec.name) else {
            return Err(NetError::MissingWeights(spec.name.clone()));
        };
        let path = dir.join(def.weight_file(&spec.name));
        let file_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| NetError::WeightFile {
                layer: spec.name.clone(),
                path,
                source,
            }
        };
        lw.weights.save(&path).map_err(file_err(&path))?;
        written.push(path);
        if let Some(b) = &lw.bias {
            let path = dir.join(def.bias_file(&spec.name));
            let t = Tensor4D::from_vec(Shape::new(1, b.len(), 1, 1), b.clone()).map_err(file_err(&path))?;
            t.save(&path).map_err(file_err(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}
