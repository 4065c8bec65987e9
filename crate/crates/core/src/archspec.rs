//! Declarative network descriptions.
//!
//! A spec file is a JSON document listing layers in execution order. The
//! same description drives the bounds walk in [`crate::regions`], the
//! receptive-field analysis in [`crate::rfield`] and the engine in
//! [`crate::segnet`].
//!
//! ```json
//! {"name": "tiny", "input": [3, 8, 8],
//!  "layers": [{"kind": "conv", "kernel": [3, 3], "stride": 1,
//!              "in_channels": 3, "out_channels": 8},
//!             {"kind": "relu"}]}
//! ```
//!
//! Convolutions use same padding: a `conv` keeps spatial dims, a
//! `conv_strided` maps `n` to `ceil(n / stride)` and a `conv_transpose` maps
//! `n` to `n * stride`. A layer may carry `"concat": j`, in which case its
//! input is the previous output with the output of layer `j` appended along
//! the channel axis.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpecError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}", semantic_message(*.layer, .message))]
    Semantic {
        layer: Option<usize>,
        message: String,
    },
    #[error("layer {layer}: expects {expected} input channels but receives {found}")]
    ChannelMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("layer {layer}: spatial dims collapse to zero")]
    ShapeCollapse { layer: usize },
    #[error("layer {layer}: concatenated tensors differ in spatial size ({a:?} vs {b:?})")]
    SkipMismatch {
        layer: usize,
        a: (usize, usize),
        b: (usize, usize),
    },
}

fn semantic_message(layer: Option<usize>, message: &str) -> String {
    match layer {
        Some(l) => format!("layer {l}: {message}"),
        None => message.to_string(),
    }
}

pub type Result<T> = std::result::Result<T, SpecError>;

/// A `(channels, height, width)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn volume(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl From<[usize; 3]> for Shape3 {
    fn from(v: [usize; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Shape3> for [usize; 3] {
    fn from(s: Shape3) -> Self {
        [s.c, s.h, s.w]
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    ConvStrided,
    ConvTranspose,
    Relu,
    FullyConnected,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::ConvStrided => "conv_strided",
            LayerKind::ConvTranspose => "conv_transpose",
            LayerKind::Relu => "relu",
            LayerKind::FullyConnected => "fully_connected",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "conv" => LayerKind::Conv,
            "conv_strided" => LayerKind::ConvStrided,
            "conv_transpose" => LayerKind::ConvTranspose,
            "relu" => LayerKind::Relu,
            "fully_connected" => LayerKind::FullyConnected,
            _ => return None,
        })
    }

    pub fn is_convolution(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::ConvStrided | LayerKind::ConvTranspose
        )
    }

    /// True for layers that own weights and a bias.
    pub fn is_affine(&self) -> bool {
        !matches!(self, LayerKind::Relu)
    }
}

/// One layer of a [`NetworkSpec`].
///
/// For `fully_connected` layers `in_channels`/`out_channels` hold the unit
/// counts and `kernel`/`stride` are `(1, 1)`/`1`. ReLU layers carry zeros.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Index of an earlier layer whose output is appended to this layer's input.
    pub concat: Option<usize>,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel: (kernel, kernel),
            stride: 1,
            in_channels,
            out_channels,
            concat: None,
        }
    }

    pub fn conv_strided(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            kind: LayerKind::ConvStrided,
            stride,
            ..Self::conv(in_channels, out_channels, kernel)
        }
    }

    pub fn conv_transpose(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            kind: LayerKind::ConvTranspose,
            stride,
            ..Self::conv(in_channels, out_channels, kernel)
        }
    }

    pub fn relu() -> Self {
        Self {
            kind: LayerKind::Relu,
            kernel: (0, 0),
            stride: 0,
            in_channels: 0,
            out_channels: 0,
            concat: None,
        }
    }

    pub fn fully_connected(in_units: usize, out_units: usize) -> Self {
        Self {
            kind: LayerKind::FullyConnected,
            kernel: (1, 1),
            stride: 1,
            in_channels: in_units,
            out_channels: out_units,
            concat: None,
        }
    }

    pub fn with_concat(mut self, source: usize) -> Self {
        self.concat = Some(source);
        self
    }

    /// Output shape for a given input shape under the same-padding rules.
    pub fn output_shape(&self, input: Shape3) -> Shape3 {
        match self.kind {
            LayerKind::Relu => input,
            LayerKind::Conv => Shape3::new(self.out_channels, input.h, input.w),
            LayerKind::ConvStrided => Shape3::new(
                self.out_channels,
                input.h.div_ceil(self.stride),
                input.w.div_ceil(self.stride),
            ),
            LayerKind::ConvTranspose => Shape3::new(
                self.out_channels,
                input.h * self.stride,
                input.w * self.stride,
            ),
            LayerKind::FullyConnected => Shape3::new(self.out_channels, 1, 1),
        }
    }
}

/// A validated, ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    pub input: Shape3,
    pub layers: Vec<LayerSpec>,
    /// Output shape of every layer; empty until [`propagate_shapes`] runs.
    pub shapes: Vec<Shape3>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    name: String,
    input: [usize; 3],
    layers: Vec<RawLayer>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_units: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_units: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    concat: Option<usize>,
}

fn semantic(layer: usize, message: impl Into<String>) -> SpecError {
    SpecError::Semantic {
        layer: Some(layer),
        message: message.into(),
    }
}

fn positive(layer: usize, field: &str, v: Option<usize>) -> Result<usize> {
    match v {
        None => Err(semantic(layer, format!("missing field `{field}`"))),
        Some(0) => Err(semantic(layer, format!("`{field}` must be positive"))),
        Some(v) => Ok(v),
    }
}

fn convert_layer(index: usize, raw: RawLayer) -> Result<LayerSpec> {
    let kind = LayerKind::parse(&raw.kind)
        .ok_or_else(|| semantic(index, format!("unknown layer kind `{}`", raw.kind)))?;
    let forbid = |present: bool, field: &str| -> Result<()> {
        if present {
            Err(semantic(
                index,
                format!("`{field}` is not valid for {} layers", kind.as_str()),
            ))
        } else {
            Ok(())
        }
    };
    match kind {
        LayerKind::Relu => {
            forbid(raw.kernel.is_some(), "kernel")?;
            forbid(raw.stride.is_some(), "stride")?;
            forbid(raw.in_channels.is_some(), "in_channels")?;
            forbid(raw.out_channels.is_some(), "out_channels")?;
            forbid(raw.in_units.is_some(), "in_units")?;
            forbid(raw.out_units.is_some(), "out_units")?;
            forbid(raw.concat.is_some(), "concat")?;
            Ok(LayerSpec::relu())
        }
        LayerKind::FullyConnected => {
            forbid(raw.kernel.is_some(), "kernel")?;
            forbid(raw.in_channels.is_some(), "in_channels")?;
            forbid(raw.out_channels.is_some(), "out_channels")?;
            forbid(raw.concat.is_some(), "concat")?;
            if raw.stride.is_some_and(|s| s != 1) {
                return Err(semantic(index, "fully_connected layers have stride 1"));
            }
            Ok(LayerSpec::fully_connected(
                positive(index, "in_units", raw.in_units)?,
                positive(index, "out_units", raw.out_units)?,
            ))
        }
        LayerKind::Conv | LayerKind::ConvStrided | LayerKind::ConvTranspose => {
            forbid(raw.in_units.is_some(), "in_units")?;
            forbid(raw.out_units.is_some(), "out_units")?;
            let [kh, kw] = raw
                .kernel
                .ok_or_else(|| semantic(index, "missing field `kernel`"))?;
            if kh == 0 || kw == 0 {
                return Err(semantic(index, "kernel dims must be positive"));
            }
            let stride = positive(index, "stride", Some(raw.stride.unwrap_or(1)))?;
            if kind == LayerKind::Conv && stride != 1 {
                return Err(semantic(
                    index,
                    "conv layers have stride 1; use conv_strided",
                ));
            }
            if let Some(src) = raw.concat {
                if src >= index {
                    return Err(semantic(
                        index,
                        format!("concat source {src} is not an earlier layer"),
                    ));
                }
            }
            Ok(LayerSpec {
                kind,
                kernel: (kh, kw),
                stride,
                in_channels: positive(index, "in_channels", raw.in_channels)?,
                out_channels: positive(index, "out_channels", raw.out_channels)?,
                concat: raw.concat,
            })
        }
    }
}

/// Parse and validate a spec document. Shapes are left empty.
pub fn parse_spec(text: &str) -> Result<NetworkSpec> {
    let raw: RawSpec = serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Syntax | Category::Eof | Category::Io => SpecError::Syntax {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            },
            Category::Data => SpecError::Semantic {
                layer: None,
                message: e.to_string(),
            },
        }
    })?;
    let input = Shape3::from(raw.input);
    if input.volume() == 0 {
        return Err(SpecError::Semantic {
            layer: None,
            message: "input dims must be positive".into(),
        });
    }
    let layers = raw
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| convert_layer(i, l))
        .collect::<Result<Vec<_>>>()?;
    let spec = NetworkSpec {
        name: raw.name,
        input,
        layers,
        shapes: Vec::new(),
    };
    spec.check_channels()?;
    Ok(spec)
}

/// Load a spec from disk.
pub fn load_spec(path: &std::path::Path) -> std::io::Result<Result<NetworkSpec>> {
    Ok(parse_spec(&std::fs::read_to_string(path)?))
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, input: Shape3, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            input,
            layers,
            shapes: Vec::new(),
        };
        spec.check_channels()?;
        Ok(spec)
    }

    /// Channel count flowing out of every layer, relu transparent.
    fn check_channels(&self) -> Result<()> {
        let mut out_channels = Vec::with_capacity(self.layers.len());
        let mut current = self.input.c;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.kind.is_convolution() {
                let skip = match layer.concat {
                    Some(src) if src < i => out_channels[src],
                    Some(src) => {
                        return Err(semantic(
                            i,
                            format!("concat source {src} is not an earlier layer"),
                        ))
                    }
                    None => 0,
                };
                let found = current + skip;
                if layer.in_channels != found {
                    return Err(SpecError::ChannelMismatch {
                        layer: i,
                        expected: layer.in_channels,
                        found,
                    });
                }
                current = layer.out_channels;
            } else if layer.kind == LayerKind::FullyConnected {
                // Unit counts depend on spatial size; checked in propagate_shapes.
                current = layer.out_channels;
            }
            out_channels.push(current);
        }
        Ok(())
    }

    /// Serialize to the canonical JSON form accepted by [`parse_spec`].
    pub fn to_json(&self) -> String {
        let layers = self
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Relu => RawLayer {
                    kind: l.kind.as_str().into(),
                    ..Default::default()
                },
                LayerKind::FullyConnected => RawLayer {
                    kind: l.kind.as_str().into(),
                    in_units: Some(l.in_channels),
                    out_units: Some(l.out_channels),
                    ..Default::default()
                },
                _ => RawLayer {
                    kind: l.kind.as_str().into(),
                    kernel: Some([l.kernel.0, l.kernel.1]),
                    stride: Some(l.stride),
                    in_channels: Some(l.in_channels),
                    out_channels: Some(l.out_channels),
                    concat: l.concat,
                    ..Default::default()
                },
            })
            .collect();
        let raw = RawSpec {
            name: self.name.clone(),
            input: self.input.into(),
            layers,
        };
        serde_json::to_string_pretty(&raw).expect("spec serializes")
    }

    /// Input shape of layer `index`: the previous output (or the network
    /// input) with any concatenated channels added. Requires propagated shapes.
    pub fn layer_input_shape(&self, index: usize) -> Shape3 {
        let prev = if index == 0 {
            self.input
        } else {
            self.shapes[index - 1]
        };
        match self.layers[index].concat {
            Some(src) => Shape3::new(prev.c + self.shapes[src].c, prev.h, prev.w),
            None => prev,
        }
    }

    pub fn output_shape(&self) -> Option<Shape3> {
        if self.layers.is_empty() {
            Some(self.input)
        } else {
            self.shapes.last().copied()
        }
    }

    /// Number of ReLU layers.
    pub fn relu_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::Relu)
            .count()
    }

    /// Verify that concatenated tensors agree spatially. The engine needs
    /// this; the bounds walk does not.
    pub fn check_skip_alignment(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(src) = layer.concat {
                let prev = if i == 0 {
                    self.input
                } else {
                    self.shapes[i - 1]
                };
                let skip = self.shapes[src];
                if (prev.h, prev.w) != (skip.h, skip.w) {
                    return Err(SpecError::SkipMismatch {
                        layer: i,
                        a: (prev.h, prev.w),
                        b: (skip.h, skip.w),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Fill `shapes` by walking the layer list from `input`.
///
/// The walk is linear: a concat layer takes its spatial size from the
/// previous layer and its channel count from the spec.
pub fn propagate_shapes(net: &NetworkSpec, input: Shape3) -> Result<NetworkSpec> {
    let mut shapes: Vec<Shape3> = Vec::with_capacity(net.layers.len());
    let mut current = input;
    if input.volume() == 0 {
        return Err(SpecError::Semantic {
            layer: None,
            message: "input dims must be positive".into(),
        });
    }
    for (i, layer) in net.layers.iter().enumerate() {
        if layer.kind == LayerKind::FullyConnected && layer.in_channels != current.volume() {
            return Err(SpecError::ChannelMismatch {
                layer: i,
                expected: layer.in_channels,
                found: current.volume(),
            });
        }
        if layer.kind.is_convolution() {
            let skip = layer.concat.map_or(0, |src| shapes[src].c);
            if layer.in_channels != current.c + skip {
                return Err(SpecError::ChannelMismatch {
                    layer: i,
                    expected: layer.in_channels,
                    found: current.c + skip,
                });
            }
        }
        current = layer.output_shape(current);
        if current.volume() == 0 {
            return Err(SpecError::ShapeCollapse { layer: i });
        }
        shapes.push(current);
    }
    Ok(NetworkSpec {
        name: net.name.clone(),
        input,
        layers: net.layers.clone(),
        shapes,
    })
}
