//! Network descriptions and their execution on host or device.
//!
//! A model file is line oriented:
//!
//! ```text
//! net tiny
//! input 1 3 8 8
//! layer prog XCLProgram binary=wino kernel=conv3x3_winograd,relu,pool
//! layer conv1 Convolution3x3Winograd out=4 brew=device strategy=case3
//! pipeline fused binary=wino
//!   layer conv2 Convolution3x3Winograd out=4
//!   layer relu2 ReLU
//!   layer pool2 Pool window=2 stride=2 mode=max
//! end
//! ```
//!
//! `#` starts a comment. Convolution and fully connected layers read their
//! weights from `<net>.<layer>.fcw` next to the model file, and an optional
//! bias from `<net>.<layer>.bias.fcw`.

mod exec;
mod parse;
mod pipeline;

pub use exec::{
    random_weights, save_weights, ForwardReport, LayerFailure, LayerReport, LayerWeights, NetError,
    Network,
};
pub use parse::{parse_netdef, ParseError, ParseErrorKind};

use std::fmt;
use std::str::FromStr;

use crate::reference::{ConvSpec, PoolSpec};
use crate::tensor::Shape;
use crate::winograd::Strategy;

/// Queue depth between pipeline stages, in tile-row messages.
pub const DEFAULT_PIPELINE_DEPTH: usize = 4;

/// Where a layer is meant to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Brew {
    #[default]
    Host,
    Device,
}

impl fmt::Display for Brew {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Brew::Host => "HOST",
            Brew::Device => "DEVICE",
        })
    }
}

impl FromStr for Brew {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "host" => Ok(Brew::Host),
            "device" => Ok(Brew::Device),
            other => Err(format!("unknown brew `{other}` (expected host or device)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Convolution3x3Winograd,
    ConvolutionDirect,
    ReLU,
    Pool,
    FullyConnected,
    XCLProgram,
    Pipeline,
}

impl LayerKind {
    pub const NAMES: [&'static str; 6] = [
        "Convolution3x3Winograd",
        "ConvolutionDirect",
        "ReLU",
        "Pool",
        "FullyConnected",
        "XCLProgram",
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Convolution3x3Winograd => "Convolution3x3Winograd",
            LayerKind::ConvolutionDirect => "ConvolutionDirect",
            LayerKind::ReLU => "ReLU",
            LayerKind::Pool => "Pool",
            LayerKind::FullyConnected => "FullyConnected",
            LayerKind::XCLProgram => "XCLProgram",
            LayerKind::Pipeline => "Pipeline",
        }
    }

    /// Kernel name a device layer of this kind launches unless overridden.
    pub fn default_kernel(self) -> Option<&'static str> {
        match self {
            LayerKind::Convolution3x3Winograd => Some("conv3x3_winograd"),
            LayerKind::ConvolutionDirect => Some("conv_direct"),
            LayerKind::ReLU => Some("relu"),
            LayerKind::Pool => Some("pool"),
            LayerKind::FullyConnected => Some("fully_connected"),
            LayerKind::XCLProgram | LayerKind::Pipeline => None,
        }
    }

    /// Whether a device implementation exists. Device layers of other kinds
    /// run on the host and are flagged in the report.
    pub fn has_device_impl(self) -> bool {
        matches!(
            self,
            LayerKind::Convolution3x3Winograd | LayerKind::ReLU | LayerKind::Pool | LayerKind::Pipeline
        )
    }

    /// Kinds allowed inside a pipeline block.
    pub fn streamable(self) -> bool {
        matches!(self, LayerKind::Convolution3x3Winograd | LayerKind::ReLU | LayerKind::Pool)
    }

    pub fn has_weights(self) -> bool {
        matches!(
            self,
            LayerKind::Convolution3x3Winograd | LayerKind::ConvolutionDirect | LayerKind::FullyConnected
        )
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Convolution3x3Winograd" => LayerKind::Convolution3x3Winograd,
            "ConvolutionDirect" => LayerKind::ConvolutionDirect,
            "ReLU" => LayerKind::ReLU,
            "Pool" => LayerKind::Pool,
            "FullyConnected" => LayerKind::FullyConnected,
            "XCLProgram" => LayerKind::XCLProgram,
            _ => return Err(()),
        })
    }
}

/// Kind-specific layer parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Winograd { out: usize, strategy: Strategy },
    Direct(ConvSpec),
    Relu,
    Pool(PoolSpec),
    FullyConnected { out: usize },
    Program { binary: String, kernels: Vec<String> },
    Pipeline { binary: String, children: Vec<LayerSpec> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub brew: Brew,
    pub op: LayerOp,
    /// Kernel launched when the layer runs on the device.
    pub kernel: Option<String>,
    pub input_shape: Shape,
    pub output_shape: Shape,
    /// 1-based line in the model file.
    pub line: usize,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self.op {
            LayerOp::Winograd { .. } => LayerKind::Convolution3x3Winograd,
            LayerOp::Direct(_) => LayerKind::ConvolutionDirect,
            LayerOp::Relu => LayerKind::ReLU,
            LayerOp::Pool(_) => LayerKind::Pool,
            LayerOp::FullyConnected { .. } => LayerKind::FullyConnected,
            LayerOp::Program { .. } => LayerKind::XCLProgram,
            LayerOp::Pipeline { .. } => LayerKind::Pipeline,
        }
    }

    pub fn children(&self) -> &[LayerSpec] {
        match &self.op {
            LayerOp::Pipeline { children, .. } => children,
            _ => &[],
        }
    }

    /// Shape of the weight tensor and length of the bias, for layers with weights.
    pub fn weight_shape(&self) -> Option<(Shape, usize)> {
        let s = self.input_shape;
        match &self.op {
            LayerOp::Winograd { out, .. } => Some((Shape::new(*out, s.c, 3, 3), *out)),
            LayerOp::Direct(spec) => Some((
                Shape::new(spec.out_channels, s.c, spec.kernel_h, spec.kernel_w),
                spec.out_channels,
            )),
            LayerOp::FullyConnected { out } => Some((Shape::new(*out, s.c, s.h, s.w), *out)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetDef {
    pub name: String,
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetDef {
    pub fn output_shape(&self) -> Shape {
        self.layers.last().map_or(self.input_shape, |l| l.output_shape)
    }

    /// Every layer with weights, pipeline children included.
    pub fn weighted_layers(&self) -> Vec<&LayerSpec> {
        let mut out = Vec::new();
        for l in &self.layers {
            if l.kind().has_weights() {
                out.push(l);
            }
            out.extend(l.children().iter().filter(|c| c.kind().has_weights()));
        }
        out
    }

    /// File name of a layer's weight sidecar.
    pub fn weight_file(&self, layer: &str) -> String {
        format!("{}.{}.fcw", self.name, layer)
    }

    pub fn bias_file(&self, layer: &str) -> String {
        format!("{}.{}.bias.fcw", self.name, layer)
    }
}
