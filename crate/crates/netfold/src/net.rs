//! Declarative model of a sequential CNN: layers, skip connections, shape
//! arithmetic, and the `Plan` record produced by the solvers.
//!
//! Layer indices are 1-based (`1..=L`), boundary indices 0-based
//! (`0..=L`). Boundary `l` sits after layer `l`; the activation attached
//! to layer `l` is the activation applied at boundary `l`.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {layer}: in_channels {got} does not match previous out_channels {expected}")]
    ChannelMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("skip connections ({0:?}, {1:?}) cross")]
    CrossingSkips(SkipConnection, SkipConnection),
    #[error("layer {layer}: kernel size {kernel} is not odd")]
    NonOddKernel { layer: usize, kernel: usize },
    #[error("skip ({start},{end}): endpoint shapes or strides incompatible with a residual add")]
    SkipShapeMismatch { start: usize, end: usize },
    #[error("layer {layer}: output spatial dimension is not positive")]
    NonPositiveSpatialDim { layer: usize },
    #[error("last layer activation must be identity")]
    NonIdentityLastActivation,
    #[error("layer {layer}: {what}")]
    BadLayerParam { layer: usize, what: String },
    #[error("skip ({start},{end}): endpoints out of range or empty span")]
    BadSkipRange { start: usize, end: usize },
    #[error("duplicate skip ({start},{end})")]
    DuplicateSkip { start: usize, end: usize },
    #[error("empty network")]
    EmptyNetwork,
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Pointwise activation applied after a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationKind {
    #[serde(rename = "id")]
    Identity,
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "relu6")]
    Relu6,
}

impl ActivationKind {
    pub fn is_identity(self) -> bool {
        self == ActivationKind::Identity
    }

    pub fn apply_f64(self, v: f64) -> f64 {
        match self {
            ActivationKind::Identity => v,
            ActivationKind::Relu => v.max(0.0),
            ActivationKind::Relu6 => v.max(0.0).min(6.0),
        }
    }
}

/// Batch-norm marker in a network description. The per-channel statistics
/// live in the weights file; the description only records presence and eps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BatchNormSpec {
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

impl Default for BatchNormSpec {
    fn default() -> Self {
        BatchNormSpec { eps: default_eps() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvLayer {
    #[serde(rename = "in")]
    pub in_channels: usize,
    #[serde(rename = "out")]
    pub out_channels: usize,
    #[serde(rename = "k")]
    pub kernel_size: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(rename = "pad", default)]
    pub padding: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(rename = "bias", default)]
    pub has_bias: bool,
    #[serde(default)]
    pub bn: Option<BatchNormSpec>,
    #[serde(rename = "act")]
    pub activation: ActivationKind,
}

fn one() -> usize {
    1
}

impl ConvLayer {
    /// Output spatial extent for one dimension, or `None` if non-positive.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return None;
        }
        Some((padded - self.kernel_size) / self.stride + 1)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }
}

/// Residual add: output at boundary `end` += input at boundary `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SkipConnection {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<ConvLayer>,
    #[serde(default)]
    pub skips: Vec<SkipConnection>,
}

impl NetworkSpec {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Activation at boundary `l`. Boundary 0 is the network input and is
    /// treated as non-identity for masking purposes; we report it as such.
    pub fn activation_at(&self, boundary: usize) -> ActivationKind {
        if boundary == 0 {
            // Input edge: treated like a live non-identity activation.
            ActivationKind::Relu6
        } else {
            self.layers[boundary - 1].activation
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, NetError> {
        let text = std::fs::read_to_string(path)?;
        let net: NetworkSpec = serde_json::from_str(&text)?;
        Ok(net)
    }

    pub fn to_path(&self, path: &Path) -> Result<(), NetError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Checks every structural invariant of the network description.
pub fn validate_network(net: &NetworkSpec) -> Result<(), NetError> {
    if net.layers.is_empty() {
        return Err(NetError::EmptyNetwork);
    }
    if net.input.channels == 0 || net.input.height == 0 || net.input.width == 0 {
        return Err(NetError::BadLayerParam {
            layer: 0,
            what: "input dimensions must be positive".into(),
        });
    }
    let mut prev_out = net.input.channels;
    for (idx, layer) in net.layers.iter().enumerate() {
        let l = idx + 1;
        if layer.in_channels == 0
            || layer.out_channels == 0
            || layer.kernel_size == 0
            || layer.stride == 0
            || layer.groups == 0
        {
            return Err(NetError::BadLayerParam {
                layer: l,
                what: "counts must be positive".into(),
            });
        }
        if layer.kernel_size % 2 == 0 {
            return Err(NetError::NonOddKernel {
                layer: l,
                kernel: layer.kernel_size,
            });
        }
        if layer.in_channels % layer.groups != 0 || layer.out_channels % layer.groups != 0 {
            return Err(NetError::BadLayerParam {
                layer: l,
                what: format!(
                    "groups {} must divide in {} and out {}",
                    layer.groups, layer.in_channels, layer.out_channels
                ),
            });
        }
        if let Some(bn) = &layer.bn {
            if !(bn.eps > 0.0) {
                return Err(NetError::BadLayerParam {
                    layer: l,
                    what: "bn eps must be positive".into(),
                });
            }
        }
        if layer.in_channels != prev_out {
            return Err(NetError::ChannelMismatch {
                layer: l,
                expected: prev_out,
                got: layer.in_channels,
            });
        }
        prev_out = layer.out_channels;
    }
    if !net.layers.last().unwrap().activation.is_identity() {
        return Err(NetError::NonIdentityLastActivation);
    }

    let len = net.layers.len();
    for (i, a) in net.skips.iter().enumerate() {
        if a.start >= a.end || a.end > len {
            return Err(NetError::BadSkipRange {
                start: a.start,
                end: a.end,
            });
        }
        for b in net.skips.iter().skip(i + 1) {
            if a.start == b.start && a.end == b.end {
                return Err(NetError::DuplicateSkip {
                    start: a.start,
                    end: a.end,
                });
            }
            // Crossing: one endpoint strictly inside the other span, the
            // other endpoint outside it.
            let crosses = (a.start < b.start && b.start < a.end && a.end < b.end)
                || (b.start < a.start && a.start < b.end && b.end < a.end);
            if crosses {
                return Err(NetError::CrossingSkips(*a, *b));
            }
        }
    }

    // Shape-level checks need the trace; these come after the structural ones.
    let trace = shape_trace(net)?;
    for skip in &net.skips {
        let (c0, h0, w0) = trace[skip.start];
        let (c1, h1, w1) = trace[skip.end];
        let cum_stride: usize = net.layers[skip.start..skip.end]
            .iter()
            .map(|l| l.stride)
            .product();
        if c0 != c1 || h0 != h1 || w0 != w1 || cum_stride != 1 {
            return Err(NetError::SkipShapeMismatch {
                start: skip.start,
                end: skip.end,
            });
        }
    }
    Ok(())
}

/// Per-boundary `(channels, height, width)`. Entry 0 is the input shape.
pub fn shape_trace(net: &NetworkSpec) -> Result<Vec<(usize, usize, usize)>, NetError> {
    let mut trace = Vec::with_capacity(net.layers.len() + 1);
    trace.push((net.input.channels, net.input.height, net.input.width));
    let (mut h, mut w) = (net.input.height, net.input.width);
    for (idx, layer) in net.layers.iter().enumerate() {
        let nh = layer.out_extent(h);
        let nw = layer.out_extent(w);
        match (nh, nw) {
            (Some(nh), Some(nw)) if nh > 0 && nw > 0 => {
                h = nh;
                w = nw;
                trace.push((layer.out_channels, h, w));
            }
            _ => return Err(NetError::NonPositiveSpatialDim { layer: idx + 1 }),
        }
    }
    Ok(trace)
}

/// View of layers `i+1..=j` with the skips they contain.
#[derive(Debug, Clone)]
pub struct SegmentView<'a> {
    pub start: usize,
    pub end: usize,
    pub layers: &'a [ConvLayer],
    /// Skips with both endpoints in `[start, end]`.
    pub contained_skips: Vec<SkipConnection>,
    /// Skips with exactly one endpoint strictly inside `(start, end)`.
    pub straddling_skips: Vec<SkipConnection>,
}

pub fn segment_view(net: &NetworkSpec, i: usize, j: usize) -> SegmentView<'_> {
    assert!(i < j && j <= net.layers.len(), "segment ({i},{j}) out of range");
    let mut contained = Vec::new();
    let mut straddling = Vec::new();
    for skip in &net.skips {
        if i <= skip.start && skip.end <= j {
            contained.push(*skip);
        } else {
            let start_in = i < skip.start && skip.start < j;
            let end_in = i < skip.end && skip.end < j;
            if start_in != end_in {
                straddling.push(*skip);
            }
        }
    }
    SegmentView {
        start: i,
        end: j,
        layers: &net.layers[i..j],
        contained_skips: contained,
        straddling_skips: straddling,
    }
}

/// Solution record of the planner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Plan {
    #[serde(rename = "A")]
    pub a: Vec<usize>,
    #[serde(rename = "S")]
    pub s: Vec<usize>,
    #[serde(rename = "B")]
    pub b: Vec<usize>,
    pub predicted_latency_ms: f64,
    pub predicted_importance: f64,
    pub budget_ms: f64,
    pub scale: u64,
}

impl Plan {
    /// `A ⊆ S`, `A ⊆ B`, indices in `1..=l_max-1`, strictly sorted.
    pub fn validate(&self, l_max: usize) -> Result<(), NetError> {
        for set in [&self.a, &self.s, &self.b] {
            if !set.windows(2).all(|w| w[0] < w[1]) {
                return Err(NetError::InvalidPlan("index sets must be strictly sorted".into()));
            }
            if set.iter().any(|&x| x == 0 || x >= l_max) {
                return Err(NetError::InvalidPlan(format!(
                    "indices must lie in 1..{l_max}"
                )));
            }
        }
        if !self.a.iter().all(|x| self.s.binary_search(x).is_ok()) {
            return Err(NetError::InvalidPlan("A must be a subset of S".into()));
        }
        if !self.a.iter().all(|x| self.b.binary_search(x).is_ok()) {
            return Err(NetError::InvalidPlan("A must be a subset of B".into()));
        }
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<Self, NetError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_path(&self, path: &Path) -> Result<(), NetError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Boundaries `{0} ∪ cuts ∪ {l}` as consecutive pairs.
pub fn partition_blocks(cuts: &[usize], k: usize, l: usize) -> Vec<(usize, usize)> {
    let mut prev = k;
    let mut blocks = Vec::with_capacity(cuts.len() + 1);
    for &c in cuts {
        blocks.push((prev, c));
        prev = c;
    }
    blocks.push((prev, l));
    blocks
}
