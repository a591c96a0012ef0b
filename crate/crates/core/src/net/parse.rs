use std::collections::{BTreeMap, HashSet};
use std::fmt;

use thiserror::Error;

use super::{Brew, LayerKind, LayerOp, LayerSpec, NetDef};
use crate::reference::{ConvSpec, PoolMode, PoolSpec};
use crate::tensor::Shape;
use crate::winograd::{Strategy, WinogradConv};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    /// Malformed line, missing or invalid parameter, misplaced block.
    Syntax,
    UnknownKind,
    /// A layer cannot accept its input shape.
    ShapeMismatch,
    /// A device layer or pipeline has no loaded binary providing its kernel.
    MissingProgram,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParseErrorKind::Syntax => "syntax error",
            ParseErrorKind::UnknownKind => "unknown layer kind",
            ParseErrorKind::ShapeMismatch => "shape mismatch",
            ParseErrorKind::MissingProgram => "missing program layer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("line {line}: {kind}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
    pub message: String,
}

fn err<T>(line: usize, kind: ParseErrorKind, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        kind,
        message: message.into(),
    })
}

/// The binary most recently programmed at some point in the layer list.
struct Loaded {
    binary: String,
    kernels: Vec<String>,
}

struct Parser {
    name: Option<String>,
    input: Option<Shape>,
    shape: Shape,
    layers: Vec<LayerSpec>,
    names: HashSet<String>,
    loaded: Option<Loaded>,
    /// Open pipeline block: header line, name, binary, children so far.
    block: Option<(usize, String, String, Vec<LayerSpec>)>,
}

/// Parse and validate a model description.
pub fn parse_netdef(text: &str) -> Result<NetDef, ParseError> {
    let mut p = Parser {
        name: None,
        input: None,
        shape: Shape::new(0, 0, 0, 0),
        layers: Vec::new(),
        names: HashSet::new(),
        loaded: None,
        block: None,
    };
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let words: Vec<&str> = content.split_whitespace().collect();
        p.statement(line, &words)?;
    }
    if let Some((line, name, ..)) = &p.block {
        return err(*line, ParseErrorKind::Syntax, format!("pipeline `{name}` has no matching `end`"));
    }
    let Some(name) = p.name else {
        return err(last_line.max(1), ParseErrorKind::Syntax, "missing `net <name>` header");
    };
    let Some(input_shape) = p.input else {
        return err(last_line.max(1), ParseErrorKind::Syntax, "missing `input n c h w` line");
    };
    Ok(NetDef {
        name,
        input_shape,
        layers: p.layers,
    })
}

impl Parser {
    fn statement(&mut self, line: usize, words: &[&str]) -> Result<(), ParseError> {
        match words[0] {
            "net" => {
                if self.name.is_some() {
                    return err(line, ParseErrorKind::Syntax, "duplicate `net` header");
                }
                let [_, name] = words else {
                    return err(line, ParseErrorKind::Syntax, "expected `net <name>`");
                };
                self.name = Some(name.to_string());
            }
            "input" => {
                if self.name.is_none() {
                    return err(line, ParseErrorKind::Syntax, "`input` before `net` header");
                }
                if self.input.is_some() {
                    return err(line, ParseErrorKind::Syntax, "duplicate `input` line");
                }
                if words.len() != 5 {
                    return err(line, ParseErrorKind::Syntax, "expected `input <n> <c> <h> <w>`");
                }
                let mut dims = [0usize; 4];
                for (d, w) in dims.iter_mut().zip(&words[1..]) {
                    *d = match w.parse() {
                        Ok(v) if v > 0 => v,
                        _ => return err(line, ParseErrorKind::Syntax, format!("invalid dimension `{w}`")),
                    };
                }
                let s = Shape::new(dims[0], dims[1], dims[2], dims[3]);
                self.input = Some(s);
                self.shape = s;
            }
            "layer" => {
                if self.input.is_none() {
                    return err(line, ParseErrorKind::Syntax, "layer before `net` and `input` lines");
                }
                let in_block = self.block.is_some();
                let spec = self.layer(line, words, in_block)?;
                self.shape = spec.output_shape;
                match &mut self.block {
                    Some((.., children)) => children.push(spec),
                    None => self.layers.push(spec),
                }
            }
            "pipeline" => self.open_block(line, words)?,
            "end" => self.close_block(line, words)?,
            other => {
                return err(
                    line,
                    ParseErrorKind::Syntax,
                    format!("unknown statement `{other}` (expected net, input, layer, pipeline or end)"),
                )
            }
        }
        Ok(())
    }

    fn claim_name(&mut self, line: usize, name: &str) -> Result<(), ParseError> {
        if !self.names.insert(name.to_string()) {
            return err(line, ParseErrorKind::Syntax, format!("duplicate layer name `{name}`"));
        }
        Ok(())
    }

    fn open_block(&mut self, line: usize, words: &[&str]) -> Result<(), ParseError> {
        if self.input.is_none() {
            return err(line, ParseErrorKind::Syntax, "pipeline before `net` and `input` lines");
        }
        if self.block.is_some() {
            return err(line, ParseErrorKind::Syntax, "pipelines cannot be nested");
        }
        let [_, name, rest @ ..] = words else {
            return err(line, ParseErrorKind::Syntax, "expected `pipeline <name> binary=<id>`");
        };
        let mut params = key_values(line, rest)?;
        let Some(binary) = params.remove("binary") else {
            return err(line, ParseErrorKind::Syntax, "pipeline needs `binary=<id>`");
        };
        reject_unknown(line, &params)?;
        self.claim_name(line, name)?;
        match &self.loaded {
            Some(l) if l.binary == binary => {}
            _ => {
                return err(
                    line,
                    ParseErrorKind::MissingProgram,
                    format!("pipeline `{name}` needs a preceding XCLProgram layer loading `{binary}`"),
                )
            }
        }
        self.block = Some((line, name.to_string(), binary, Vec::new()));
        Ok(())
    }

    fn close_block(&mut self, line: usize, words: &[&str]) -> Result<(), ParseError> {
        if words.len() != 1 {
            return err(line, ParseErrorKind::Syntax, "`end` takes no arguments");
        }
        let Some((start, name, binary, children)) = self.block.take() else {
            return err(line, ParseErrorKind::Syntax, "`end` without an open pipeline");
        };
        let (Some(first), Some(last)) = (children.first(), children.last()) else {
            return err(start, ParseErrorKind::Syntax, format!("pipeline `{name}` is empty"));
        };
        let spec = LayerSpec {
            name,
            brew: Brew::Device,
            input_shape: first.input_shape,
            output_shape: last.output_shape,
            kernel: None,
            line: start,
            op: LayerOp::Pipeline { binary, children },
        };
        self.layers.push(spec);
        Ok(())
    }

    fn layer(&mut self, line: usize, words: &[&str], in_block: bool) -> Result<LayerSpec, ParseError> {
        let [_, name, kind, rest @ ..] = words else {
            return err(line, ParseErrorKind::Syntax, "expected `layer <name> <kind> [key=value ...]`");
        };
        let kind: LayerKind = kind.parse().map_err(|()| ParseError {
            line,
            kind: ParseErrorKind::UnknownKind,
            message: format!("`{kind}` (expected one of {})", LayerKind::NAMES.join(", ")),
        })?;
        self.claim_name(line, name)?;
        let mut params = key_values(line, rest)?;
        let brew = match params.remove("brew") {
            Some(b) => b.parse().or_else(|e: String| err(line, ParseErrorKind::Syntax, e))?,
            None if in_block => Brew::Device,
            None => Brew::Host,
        };
        let kernel = params.remove("kernel");
        let input_shape = self.shape;

        let op = match kind {
            LayerKind::Convolution3x3Winograd => {
                let out = required(line, &mut params, "out")?;
                let strategy = match params.remove("strategy") {
                    Some(s) => s.parse().or_else(|e: String| err(line, ParseErrorKind::Syntax, e))?,
                    None => Strategy::default(),
                };
                LayerOp::Winograd { out, strategy }
            }
            LayerKind::ConvolutionDirect => {
                let out = required(line, &mut params, "out")?;
                let k = optional(line, &mut params, "ksize")?.unwrap_or(3);
                let stride = optional(line, &mut params, "stride")?.unwrap_or(1);
                let pad = optional(line, &mut params, "pad")?.unwrap_or(k.saturating_sub(1) / 2);
                LayerOp::Direct(ConvSpec {
                    kernel_h: k,
                    kernel_w: k,
                    stride,
                    pad,
                    out_channels: out,
                })
            }
            LayerKind::ReLU => LayerOp::Relu,
            LayerKind::Pool => {
                let window = required(line, &mut params, "window")?;
                let stride = optional(line, &mut params, "stride")?.unwrap_or(window);
                let mode = match params.remove("mode").as_deref() {
                    None | Some("max") => PoolMode::Max,
                    Some("avg") | Some("average") => PoolMode::Average,
                    Some(m) => return err(line, ParseErrorKind::Syntax, format!("unknown pool mode `{m}`")),
                };
                LayerOp::Pool(PoolSpec { window, stride, mode })
            }
            LayerKind::FullyConnected => LayerOp::FullyConnected {
                out: required(line, &mut params, "out")?,
            },
            LayerKind::XCLProgram => {
                if in_block {
                    return err(line, ParseErrorKind::Syntax, "XCLProgram inside a pipeline");
                }
                let Some(binary) = params.remove("binary") else {
                    return err(line, ParseErrorKind::Syntax, "XCLProgram needs `binary=<id>`");
                };
                let Some(kernels) = kernel.as_deref() else {
                    return err(line, ParseErrorKind::Syntax, "XCLProgram needs `kernel=<name>[,<name>...]`");
                };
                let kernels: Vec<String> = kernels
                    .split(',')
                    .map(str::trim)
                    .filter(|k| !k.is_empty())
                    .map(String::from)
                    .collect();
                if kernels.is_empty() {
                    return err(line, ParseErrorKind::Syntax, "XCLProgram needs at least one kernel");
                }
                reject_unknown(line, &params)?;
                self.loaded = Some(Loaded {
                    binary: binary.clone(),
                    kernels: kernels.clone(),
                });
                return Ok(LayerSpec {
                    name: name.to_string(),
                    brew: Brew::Device,
                    op: LayerOp::Program { binary, kernels },
                    kernel: None,
                    input_shape,
                    output_shape: input_shape,
                    line,
                });
            }
            LayerKind::Pipeline => unreachable!("not a layer keyword"),
        };
        reject_unknown(line, &params)?;

        if in_block {
            if !kind.streamable() {
                return err(
                    line,
                    ParseErrorKind::Syntax,
                    format!("{kind} cannot run inside a pipeline (allowed: convolution, ReLU, pool)"),
                );
            }
            if brew != Brew::Device {
                return err(line, ParseErrorKind::Syntax, "pipeline children must have brew=device");
            }
        }

        let output_shape = output_shape(line, &op, input_shape)?;
        let kernel = kernel.or_else(|| kind.default_kernel().map(String::from));
        if brew == Brew::Device {
            let k = kernel.as_deref().expect("compute kinds have a kernel");
            if !self.loaded.as_ref().is_some_and(|l| l.kernels.iter().any(|x| x == k)) {
                let loaded = self
                    .loaded
                    .as_ref()
                    .map_or("no binary is loaded".to_string(), |l| format!("loaded binary `{}` lacks it", l.binary));
                return err(
                    line,
                    ParseErrorKind::MissingProgram,
                    format!("device layer `{name}` needs kernel `{k}` but {loaded}"),
                );
            }
        }
        Ok(LayerSpec {
            name: name.to_string(),
            brew,
            op,
            kernel,
            input_shape,
            output_shape,
            line,
        })
    }
}

fn output_shape(line: usize, op: &LayerOp, s: Shape) -> Result<Shape, ParseError> {
    let shape_err = |m: String| ParseError {
        line,
        kind: ParseErrorKind::ShapeMismatch,
        message: m,
    };
    Ok(match op {
        LayerOp::Winograd { out, .. } => {
            WinogradConv::check_spec(&ConvSpec::same3x3(*out)).map_err(|e| shape_err(e.to_string()))?;
            Shape::new(s.n, *out, s.h, s.w)
        }
        LayerOp::Direct(spec) => spec
            .output_shape(s)
            .map_err(|e| shape_err(format!("input {s}: {e}")))?,
        LayerOp::Relu => s,
        LayerOp::Pool(spec) => spec
            .output_shape(s)
            .map_err(|e| shape_err(format!("input {s}: {e}")))?,
        LayerOp::FullyConnected { out } => Shape::new(s.n, *out, 1, 1),
        LayerOp::Program { .. } | LayerOp::Pipeline { .. } => s,
    })
}

fn key_values(line: usize, words: &[&str]) -> Result<BTreeMap<String, String>, ParseError> {
    let mut map = BTreeMap::new();
    for w in words {
        let Some((k, v)) = w.split_once('=') else {
            return err(line, ParseErrorKind::Syntax, format!("expected key=value, got `{w}`"));
        };
        if k.is_empty() || v.is_empty() {
            return err(line, ParseErrorKind::Syntax, format!("empty key or value in `{w}`"));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return err(line, ParseErrorKind::Syntax, format!("duplicate key `{k}`"));
        }
    }
    Ok(map)
}

fn optional(line: usize, params: &mut BTreeMap<String, String>, key: &str) -> Result<Option<usize>, ParseError> {
    match params.remove(key) {
        None => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 || key == "pad" => Ok(Some(n)),
            _ => err(line, ParseErrorKind::Syntax, format!("`{key}` must be a positive integer, got `{v}`")),
        },
    }
}

fn required(line: usize, params: &mut BTreeMap<String, String>, key: &str) -> Result<usize, ParseError> {
    optional(line, params, key)?.map_or_else(|| err(line, ParseErrorKind::Syntax, format!("missing `{key}=`")), Ok)
}

fn reject_unknown(line: usize, params: &BTreeMap<String, String>) -> Result<(), ParseError> {
    match params.keys().next() {
        Some(k) => err(line, ParseErrorKind::Syntax, format!("unexpected key `{k}`")),
        None => Ok(()),
    }
}
