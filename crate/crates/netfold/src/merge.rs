//! Numeric execution of a plan: reference convolution, kernel composition,
//! batch-norm folding, depthwise expansion, skip fusion, padding
//! reordering, and equivalence verification.
//!
//! `forward_conv` is the ground-truth semantics (naive cross-correlation
//! with symmetric zero padding). Every transformation here is certified
//! against it; nothing is allowed to disagree with the naive loop beyond
//! element-type rounding.

use crate::net::{
    partition_blocks, validate_network, ActivationKind, ConvLayer, NetError,
    NetworkSpec, Plan, SkipConnection,
};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("not fusable: {0}")]
    NotFusable(String),
    #[error("segment ({i},{j}) cannot be merged: {reason}")]
    InfeasibleSegment { i: usize, j: usize, reason: String },
    #[error("activation at boundary {0} inside a merge segment is not identity")]
    ActivationInside(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Dense NCHW feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Float> Tensor4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }
}

/// Convolution kernel in (out, in/groups, kh, kw) layout with optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel4<T> {
    pub out_channels: usize,
    pub in_per_group: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub weights: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Float> Kernel4<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, k: usize, groups: usize) -> Self {
        let in_per_group = in_channels / groups;
        Kernel4 {
            out_channels,
            in_per_group,
            kh: k,
            kw: k,
            groups,
            weights: vec![T::zero(); out_channels * in_per_group * k * k],
            bias: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_per_group * self.groups
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, y: usize, x: usize) -> T {
        self.weights[((o * self.in_per_group + i) * self.kh + y) * self.kw + x]
    }

    #[inline]
    pub fn at_mut(&mut self, o: usize, i: usize, y: usize, x: usize) -> &mut T {
        &mut self.weights[((o * self.in_per_group + i) * self.kh + y) * self.kw + x]
    }

    /// 1x1 kernel carrying the channel identity map.
    pub fn channel_identity(channels: usize) -> Self {
        let mut k = Self::zeros(channels, channels, 1, 1);
        for c in 0..channels {
            *k.at_mut(c, c, 0, 0) = T::one();
        }
        k
    }
}

/// Naive direct cross-correlation with symmetric zero padding. This is the
/// reference semantics everything else is checked against.
pub fn forward_conv<T: Float>(
    x: &Tensor4<T>,
    k: &Kernel4<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor4<T>, MergeError> {
    if x.c != k.in_channels() {
        return Err(MergeError::ShapeMismatch(format!(
            "input has {} channels, kernel expects {}",
            x.c,
            k.in_channels()
        )));
    }
    let ph = x.h + 2 * padding;
    let pw = x.w + 2 * padding;
    if ph < k.kh || pw < k.kw {
        return Err(MergeError::ShapeMismatch(
            "kernel larger than padded input".into(),
        ));
    }
    let oh = (ph - k.kh) / stride + 1;
    let ow = (pw - k.kw) / stride + 1;
    let out_per_group = k.out_channels / k.groups;
    let mut out = Tensor4::zeros(x.n, k.out_channels, oh, ow);
    for n in 0..x.n {
        for oc in 0..k.out_channels {
            let g = oc / out_per_group;
            let bias = k.bias.as_ref().map_or(T::zero(), |b| b[oc]);
            for y in 0..oh {
                for xo in 0..ow {
                    // accumulate in f64 regardless of element type so the
                    // reference semantics only rounds once, at the output
                    let mut acc = bias.to_f64().unwrap();
                    for ic in 0..k.in_per_group {
                        let src_c = g * k.in_per_group + ic;
                        for ky in 0..k.kh {
                            let iy = y * stride + ky;
                            if iy < padding || iy >= padding + x.h {
                                continue;
                            }
                            for kx in 0..k.kw {
                                let ix = xo * stride + kx;
                                if ix < padding || ix >= padding + x.w {
                                    continue;
                                }
                                acc += k.at(oc, ic, ky, kx).to_f64().unwrap()
                                    * x.at(n, src_c, iy - padding, ix - padding)
                                        .to_f64()
                                        .unwrap();
                            }
                        }
                    }
                    *out.at_mut(n, oc, y, xo) = T::from(acc).unwrap();
                }
            }
        }
    }
    Ok(out)
}

/// Composes two dense kernels into the single kernel computing
/// `conv(conv(x, k1, s1, p1), k2, s2, 0)` as `conv(x, merged, s1*s2, p1)`.
///
/// The merged size is `K1 + (K2-1)*s1`: each tap of the second kernel is
/// spread out by the first stride. Requires zero padding on the second
/// stage, which padding reordering guarantees.
pub fn compose_kernels<T: Float>(
    k2: &Kernel4<T>,
    k1: &Kernel4<T>,
    s1: usize,
) -> Result<Kernel4<T>, MergeError> {
    if k1.groups != 1 || k2.groups != 1 {
        return Err(MergeError::ChannelMismatch(
            "compose_kernels requires dense (groups=1) kernels; expand first".into(),
        ));
    }
    if k2.in_per_group != k1.out_channels {
        return Err(MergeError::ChannelMismatch(format!(
            "second kernel expects {} channels, first produces {}",
            k2.in_per_group, k1.out_channels
        )));
    }
    let km = k1.kh + (k2.kh - 1) * s1;
    let mut merged = Kernel4::zeros(k2.out_channels, k1.in_per_group, km, 1);
    // merged[o,c,ty,tx] = sum over mid,(u,v) of k2[o,mid,u,v] * k1[mid,c,ty-u*s1,tx-v*s1]
    // accumulated in f64: composing many kernels in 32-bit loses precision
    let mut accum = vec![0.0f64; merged.weights.len()];
    let taps = k1.in_per_group * km * km;
    for o in 0..k2.out_channels {
        for mid in 0..k1.out_channels {
            for u in 0..k2.kh {
                for v in 0..k2.kw {
                    let w2 = k2.at(o, mid, u, v).to_f64().unwrap();
                    if w2 == 0.0 {
                        continue;
                    }
                    for a in 0..k1.kh {
                        for b in 0..k1.kw {
                            for c in 0..k1.in_per_group {
                                let ty = u * s1 + a;
                                let tx = v * s1 + b;
                                accum[o * taps + c * km * km + ty * km + tx] +=
                                    w2 * k1.at(mid, c, a, b).to_f64().unwrap();
                            }
                        }
                    }
                }
            }
        }
    }
    for (dst, &src) in merged.weights.iter_mut().zip(&accum) {
        *dst = T::from(src).unwrap();
    }
    // Bias: the first-stage bias is a constant map; with zero padding on
    // the second stage it contributes b1 summed through every tap of k2.
    let need_bias = k1.bias.is_some() || k2.bias.is_some();
    if need_bias {
        let mut bias = vec![T::zero(); k2.out_channels];
        for o in 0..k2.out_channels {
            let mut acc = k2
                .bias
                .as_ref()
                .map_or(0.0, |b| b[o].to_f64().unwrap());
            if let Some(b1) = &k1.bias {
                for mid in 0..k1.out_channels {
                    let mut tap_sum = 0.0f64;
                    for u in 0..k2.kh {
                        for v in 0..k2.kw {
                            tap_sum += k2.at(o, mid, u, v).to_f64().unwrap();
                        }
                    }
                    acc += b1[mid].to_f64().unwrap() * tap_sum;
                }
            }
            bias[o] = T::from(acc).unwrap();
        }
        merged.bias = Some(bias);
    }
    Ok(merged)
}

/// Expands a grouped kernel to an equivalent dense one, zero for
/// cross-group channel pairs.
pub fn expand_depthwise<T: Float>(k: &Kernel4<T>) -> Kernel4<T> {
    if k.groups == 1 {
        return k.clone();
    }
    let in_channels = k.in_channels();
    let out_per_group = k.out_channels / k.groups;
    let mut dense = Kernel4::zeros(k.out_channels, in_channels, k.kh, 1);
    dense.kw = k.kw;
    dense.kh = k.kh;
    dense.weights = vec![T::zero(); k.out_channels * in_channels * k.kh * k.kw];
    for o in 0..k.out_channels {
        let g = o / out_per_group;
        for i in 0..k.in_per_group {
            let src_c = g * k.in_per_group + i;
            for y in 0..k.kh {
                for x in 0..k.kw {
                    *dense.at_mut(o, src_c, y, x) = k.at(o, i, y, x);
                }
            }
        }
    }
    dense.bias = k.bias.clone();
    dense
}

/// Inference-mode batch-norm statistics for one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

/// Absorbs batch norm into the convolution kernel and bias.
pub fn fold_bn<T: Float>(bn: &BatchNormParams, k: &Kernel4<T>) -> Kernel4<T> {
    let mut folded = k.clone();
    let mut bias = vec![T::zero(); k.out_channels];
    let taps = k.in_per_group * k.kh * k.kw;
    for o in 0..k.out_channels {
        let scale = bn.gamma[o] / (bn.var[o] + bn.eps).sqrt();
        let scale_t = T::from(scale).unwrap();
        for t in 0..taps {
            let idx = o * taps + t;
            folded.weights[idx] = k.weights[idx] * scale_t;
        }
        let b0 = k.bias.as_ref().map_or(T::zero(), |b| b[o]);
        bias[o] = T::from(bn.beta[o]).unwrap()
            + scale_t * (b0 - T::from(bn.mean[o]).unwrap());
    }
    folded.bias = Some(bias);
    folded
}

/// Absorbs a residual add `f(x) + x` by adding identity at the kernel
/// center. Valid only for stride-1 merged blocks with matching channels;
/// the stride is the caller's to check (a kernel does not know it).
pub fn fuse_skip<T: Float>(k: &Kernel4<T>) -> Result<Kernel4<T>, MergeError> {
    if k.out_channels != k.in_channels() {
        return Err(MergeError::NotFusable(format!(
            "skip needs matching channels, got {} -> {}",
            k.in_channels(),
            k.out_channels
        )));
    }
    if k.kh % 2 == 0 || k.kh != k.kw {
        return Err(MergeError::NotFusable("kernel has no center tap".into()));
    }
    let center = k.kh / 2;
    let mut fused = k.clone();
    for c in 0..k.out_channels {
        // channel c maps to itself: same group on both sides since in==out
        let i = c % k.in_per_group;
        *fused.at_mut(c, i, center, center) = fused.at(c, i, center, center) + T::one();
    }
    Ok(fused)
}

/// Moves all zero padding of a merge segment onto its first layer:
/// `P = sum over layers of p_l * (product of earlier strides)`.
/// Returns the per-layer paddings after reordering.
pub fn reorder_padding(segment: &[ConvLayer]) -> Vec<usize> {
    let mut total = 0usize;
    let mut stride_acc = 1usize;
    for layer in segment {
        total += layer.padding * stride_acc;
        stride_acc *= layer.stride;
    }
    let mut out = vec![0; segment.len()];
    if !out.is_empty() {
        out[0] = total;
    }
    out
}

/// Shape of the convolution equivalent to layers `i+1..=j`, without
/// touching weights. Single-layer spans keep their grouping; longer spans
/// are dense after merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergedShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

pub fn merged_shape(net: &NetworkSpec, i: usize, j: usize) -> Result<MergedShape, MergeError> {
    check_segment_bounds(net, i, j)?;
    let view = crate::net::segment_view(net, i, j);
    if !view.straddling_skips.is_empty() {
        return Err(MergeError::InfeasibleSegment {
            i,
            j,
            reason: format!("skip {:?} straddles the segment", view.straddling_skips[0]),
        });
    }
    let first = &net.layers[i];
    let mut kernel = first.kernel_size;
    let mut stride = first.stride;
    let mut padding = first.padding;
    for layer in &net.layers[i + 1..j] {
        kernel += (layer.kernel_size - 1) * stride;
        padding += layer.padding * stride;
        stride *= layer.stride;
    }
    Ok(MergedShape {
        in_channels: first.in_channels,
        out_channels: net.layers[j - 1].out_channels,
        kernel_size: kernel,
        stride,
        padding,
        groups: if j - i == 1 { first.groups } else { 1 },
    })
}

fn check_segment_bounds(net: &NetworkSpec, i: usize, j: usize) -> Result<(), MergeError> {
    if i >= j || j > net.layers.len() {
        return Err(MergeError::InfeasibleSegment {
            i,
            j,
            reason: "indices out of range".into(),
        });
    }
    Ok(())
}

/// Weights of one layer: kernel (+bias) and optional batch norm.
#[derive(Debug, Clone)]
pub struct LayerWeights<T> {
    pub kernel: Kernel4<T>,
    pub bn: Option<BatchNormParams>,
}

#[derive(Debug, Clone)]
pub struct NetworkWeights<T> {
    pub layers: Vec<LayerWeights<T>>,
}

#[derive(Serialize, Deserialize)]
struct LayerWeightsFile {
    out: usize,
    in_per_group: usize,
    k: usize,
    groups: usize,
    values: Vec<f64>,
    bias: Option<Vec<f64>>,
    bn: Option<BatchNormParams>,
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    layers: Vec<LayerWeightsFile>,
}

impl<T: Float> NetworkWeights<T> {
    pub fn from_path(path: &Path) -> Result<Self, MergeError> {
        let text = std::fs::read_to_string(path)?;
        let file: WeightsFile = serde_json::from_str(&text)?;
        let layers = file
            .layers
            .into_iter()
            .map(|l| LayerWeights {
                kernel: Kernel4 {
                    out_channels: l.out,
                    in_per_group: l.in_per_group,
                    kh: l.k,
                    kw: l.k,
                    groups: l.groups,
                    weights: l.values.iter().map(|&v| T::from(v).unwrap()).collect(),
                    bias: l
                        .bias
                        .map(|b| b.iter().map(|&v| T::from(v).unwrap()).collect()),
                },
                bn: l.bn,
            })
            .collect();
        Ok(NetworkWeights { layers })
    }

    pub fn to_path(&self, path: &Path) -> Result<(), MergeError> {
        let file = WeightsFile {
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeightsFile {
                    out: l.kernel.out_channels,
                    in_per_group: l.kernel.in_per_group,
                    k: l.kernel.kh,
                    groups: l.kernel.groups,
                    values: l.kernel.weights.iter().map(|v| v.to_f64().unwrap()).collect(),
                    bias: l
                        .kernel
                        .bias
                        .as_ref()
                        .map(|b| b.iter().map(|v| v.to_f64().unwrap()).collect()),
                    bn: l.bn.clone(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }
}

/// Seeded random weights matching a network description.
pub fn random_weights<T: Float>(net: &NetworkSpec, seed: u64) -> NetworkWeights<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let layers = net
        .layers
        .iter()
        .map(|layer| {
            let in_per_group = layer.in_channels / layer.groups;
            let fan_in = (in_per_group * layer.kernel_size * layer.kernel_size) as f64;
            let scale = fan_in.sqrt().recip();
            let count =
                layer.out_channels * in_per_group * layer.kernel_size * layer.kernel_size;
            let weights = (0..count)
                .map(|_| {
                    let v: f64 = normal.sample(&mut rng);
                    T::from(v * scale).unwrap()
                })
                .collect();
            let bias = layer.has_bias.then(|| {
                (0..layer.out_channels)
                    .map(|_| {
                        let v: f64 = normal.sample(&mut rng);
                        T::from(v * 0.1).unwrap()
                    })
                    .collect()
            });
            let bn = layer.bn.as_ref().map(|spec| BatchNormParams {
                gamma: (0..layer.out_channels)
                    .map(|_| rng.gen_range(0.5..1.5))
                    .collect(),
                beta: (0..layer.out_channels)
                    .map(|_| {
                        let v: f64 = normal.sample(&mut rng);
                        v * 0.1
                    })
                    .collect(),
                mean: (0..layer.out_channels)
                    .map(|_| {
                        let v: f64 = normal.sample(&mut rng);
                        v * 0.1
                    })
                    .collect(),
                var: (0..layer.out_channels)
                    .map(|_| rng.gen_range(0.25..1.0))
                    .collect(),
                eps: spec.eps,
            });
            LayerWeights {
                kernel: Kernel4 {
                    out_channels: layer.out_channels,
                    in_per_group,
                    kh: layer.kernel_size,
                    kw: layer.kernel_size,
                    groups: layer.groups,
                    weights,
                    bias,
                },
                bn,
            }
        })
        .collect();
    NetworkWeights { layers }
}

/// The convolution equivalent to layers `i+1..=j`, padding hoisted to the
/// front, contained skips fused.
#[derive(Debug, Clone)]
pub struct MergedLayer<T> {
    pub kernel: Kernel4<T>,
    pub stride: usize,
    pub padding: usize,
    pub source_span: (usize, usize),
}

struct EffUnit<T> {
    kernel: Kernel4<T>,
    stride: usize,
    padding: usize,
}

fn fold_unit<T: Float>(
    acc: Option<EffUnit<T>>,
    unit: EffUnit<T>,
) -> Result<EffUnit<T>, MergeError> {
    match acc {
        None => Ok(unit),
        Some(acc) => Ok(EffUnit {
            kernel: compose_kernels(&unit.kernel, &acc.kernel, acc.stride)?,
            padding: acc.padding + acc.stride * unit.padding,
            stride: acc.stride * unit.stride,
        }),
    }
}

/// Composes the span `(u, v)` of `eff` (relative boundaries), recursing
/// into contained skips: a skip's span collapses to one convolution first
/// and its residual add becomes an identity tap at the kernel center.
fn compose_span<T: Float>(
    eff: &[EffUnit<T>],
    skips: &[(usize, usize)],
    u: usize,
    v: usize,
) -> Result<EffUnit<T>, MergeError> {
    let mut acc: Option<EffUnit<T>> = None;
    let mut pos = u;
    while pos < v {
        let sub_end = skips
            .iter()
            .filter(|&&(s, e)| s == pos && e <= v && !(s == u && e == v))
            .map(|&(_, e)| e)
            .max();
        let unit = if let Some(end) = sub_end {
            let inner = compose_span(eff, skips, pos, end)?;
            if inner.stride != 1 {
                return Err(MergeError::NotFusable(
                    "skip span has cumulative stride > 1".into(),
                ));
            }
            let fused = fuse_skip(&inner.kernel)?;
            pos = end;
            EffUnit {
                kernel: fused,
                stride: 1,
                padding: inner.padding,
            }
        } else {
            let unit = EffUnit {
                kernel: eff[pos].kernel.clone(),
                stride: eff[pos].stride,
                padding: eff[pos].padding,
            };
            pos += 1;
            unit
        };
        acc = Some(fold_unit(acc, unit)?);
    }
    Ok(acc.expect("non-empty span"))
}

/// Merges layers `i+1..=j` into a single convolution. Interior activations
/// must be identity; no skip may straddle the segment.
pub fn merge_segment<T: Float>(
    net: &NetworkSpec,
    weights: &NetworkWeights<T>,
    i: usize,
    j: usize,
) -> Result<MergedLayer<T>, MergeError> {
    check_segment_bounds(net, i, j)?;
    let view = crate::net::segment_view(net, i, j);
    if !view.straddling_skips.is_empty() {
        return Err(MergeError::InfeasibleSegment {
            i,
            j,
            reason: format!("skip {:?} straddles the segment", view.straddling_skips[0]),
        });
    }
    for l in i + 1..j {
        if !net.layers[l - 1].activation.is_identity() {
            return Err(MergeError::ActivationInside(l));
        }
    }
    let single = j - i == 1;
    let eff: Vec<EffUnit<T>> = (i..j)
        .map(|idx| {
            let layer = &net.layers[idx];
            let lw = &weights.layers[idx];
            let mut kernel = match &lw.bn {
                Some(bn) => fold_bn(bn, &lw.kernel),
                None => lw.kernel.clone(),
            };
            if !single {
                kernel = expand_depthwise(&kernel);
            }
            EffUnit {
                kernel,
                stride: layer.stride,
                padding: layer.padding,
            }
        })
        .collect();
    let rel_skips: Vec<(usize, usize)> = view
        .contained_skips
        .iter()
        .map(|s| (s.start - i, s.end - i))
        .collect();
    let n = j - i;
    let mut unit = compose_span(&eff, &rel_skips, 0, n)?;
    if rel_skips.contains(&(0, n)) {
        if unit.stride != 1 {
            return Err(MergeError::NotFusable(
                "skip span has cumulative stride > 1".into(),
            ));
        }
        unit.kernel = fuse_skip(&unit.kernel)?;
    }
    Ok(MergedLayer {
        kernel: unit.kernel,
        stride: unit.stride,
        padding: unit.padding,
        source_span: (i, j),
    })
}

/// Result of applying a plan: the prepared network (activations replaced,
/// padding reordered, weights untouched) and the merged network. The two
/// compute the same function; the prepared one is what finetuning would
/// operate on, the merged one is what ships.
pub struct AppliedPlan<T> {
    pub prepared_net: NetworkSpec,
    pub prepared_weights: NetworkWeights<T>,
    pub merged_net: NetworkSpec,
    pub merged_weights: NetworkWeights<T>,
}

/// Partitions the network at `{0} ∪ S ∪ {L}` and merges each part.
/// Activations at indices outside `A` become identity first; an index in
/// `A` whose original activation is identity gets relu6 (the extended
/// search inserts a non-linearity there).
pub fn apply_plan<T: Float>(
    net: &NetworkSpec,
    weights: &NetworkWeights<T>,
    plan: &Plan,
) -> Result<AppliedPlan<T>, MergeError> {
    validate_network(net)?;
    let l_max = net.layers.len();
    plan.validate(l_max)?;
    if weights.layers.len() != l_max {
        return Err(MergeError::ShapeMismatch(format!(
            "weights have {} layers, network has {}",
            weights.layers.len(),
            l_max
        )));
    }

    // Activation replacement on the original-padding network.
    let mut work = net.clone();
    for l in 1..=l_max {
        let layer = &mut work.layers[l - 1];
        layer.activation = if l == l_max {
            ActivationKind::Identity
        } else if plan.a.binary_search(&l).is_ok() {
            if layer.activation.is_identity() {
                ActivationKind::Relu6
            } else {
                layer.activation
            }
        } else {
            ActivationKind::Identity
        };
    }

    let blocks = partition_blocks(&plan.s, 0, l_max);

    // Merge each part.
    let mut merged_layers = Vec::with_capacity(blocks.len());
    let mut merged_weights = Vec::with_capacity(blocks.len());
    for &(bi, bj) in &blocks {
        let merged = merge_segment(&work, weights, bi, bj)?;
        let single = bj - bi == 1;
        let kernel = merged.kernel;
        merged_layers.push(ConvLayer {
            in_channels: kernel.in_channels(),
            out_channels: kernel.out_channels,
            kernel_size: kernel.kh,
            stride: merged.stride,
            padding: merged.padding,
            groups: if single { kernel.groups } else { 1 },
            has_bias: kernel.bias.is_some(),
            bn: None,
            activation: work.layers[bj - 1].activation,
        });
        merged_weights.push(LayerWeights { kernel, bn: None });
    }

    // Skips surviving the merge: endpoints on block boundaries, spanning
    // more than one block. Contained skips were fused above.
    let boundaries: Vec<usize> = std::iter::once(0)
        .chain(plan.s.iter().copied())
        .chain(std::iter::once(l_max))
        .collect();
    let mut merged_skips = Vec::new();
    for skip in &net.skips {
        let inside_one = blocks
            .iter()
            .any(|&(bi, bj)| bi <= skip.start && skip.end <= bj);
        if inside_one {
            continue;
        }
        let rank = |b: usize| boundaries.binary_search(&b);
        match (rank(skip.start), rank(skip.end)) {
            (Ok(rs), Ok(re)) => merged_skips.push(SkipConnection { start: rs, end: re }),
            _ => {
                return Err(MergeError::InfeasibleSegment {
                    i: skip.start,
                    j: skip.end,
                    reason: "skip endpoint falls inside a merge segment".into(),
                })
            }
        }
    }

    // Prepared network: same layers as `work` but with each segment's
    // padding hoisted to its first layer.
    let mut prepared_net = work;
    for &(bi, bj) in &blocks {
        let hoisted = reorder_padding(&prepared_net.layers[bi..bj]);
        for (offset, pad) in hoisted.into_iter().enumerate() {
            prepared_net.layers[bi + offset].padding = pad;
        }
    }

    let merged_net = NetworkSpec {
        input: net.input,
        layers: merged_layers,
        skips: merged_skips,
    };
    Ok(AppliedPlan {
        prepared_net,
        prepared_weights: NetworkWeights {
            layers: weights.layers.clone(),
        },
        merged_net,
        merged_weights: NetworkWeights {
            layers: merged_weights,
        },
    })
}

fn apply_activation<T: Float>(kind: ActivationKind, x: &mut Tensor4<T>) {
    match kind {
        ActivationKind::Identity => {}
        ActivationKind::Relu => {
            for v in &mut x.data {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        ActivationKind::Relu6 => {
            let six = T::from(6.0).unwrap();
            for v in &mut x.data {
                if *v < T::zero() {
                    *v = T::zero();
                } else if *v > six {
                    *v = six;
                }
            }
        }
    }
}

fn apply_bn<T: Float>(bn: &BatchNormParams, x: &mut Tensor4<T>) {
    for c in 0..x.c {
        let scale = T::from(bn.gamma[c] / (bn.var[c] + bn.eps).sqrt()).unwrap();
        let shift = T::from(bn.beta[c]).unwrap() - scale * T::from(bn.mean[c]).unwrap();
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = x.at(n, c, y, xx);
                    *x.at_mut(n, c, y, xx) = v * scale + shift;
                }
            }
        }
    }
}

/// Adds `src` into `dst` aligning centers. Hoisted padding makes the
/// residual source larger (or smaller) than the destination by an even
/// margin; the identity tap of a fused skip sees exactly the central crop.
fn residual_add<T: Float>(dst: &mut Tensor4<T>, src: &Tensor4<T>) -> Result<(), MergeError> {
    if src.c != dst.c || src.n != dst.n {
        return Err(MergeError::ShapeMismatch(
            "residual add channel mismatch".into(),
        ));
    }
    let dh = src.h as isize - dst.h as isize;
    let dw = src.w as isize - dst.w as isize;
    if dh % 2 != 0 || dw % 2 != 0 {
        return Err(MergeError::ShapeMismatch(
            "residual add offset is not centered".into(),
        ));
    }
    let oy = dh / 2;
    let ox = dw / 2;
    for n in 0..dst.n {
        for c in 0..dst.c {
            for y in 0..dst.h {
                let sy = y as isize + oy;
                if sy < 0 || sy >= src.h as isize {
                    continue;
                }
                for x in 0..dst.w {
                    let sx = x as isize + ox;
                    if sx < 0 || sx >= src.w as isize {
                        continue;
                    }
                    let v = dst.at(n, c, y, x) + src.at(n, c, sy as usize, sx as usize);
                    *dst.at_mut(n, c, y, x) = v;
                }
            }
        }
    }
    Ok(())
}

/// Sequential forward pass: conv -> batch norm -> activation per layer,
/// residual adds at skip endpoints (center-aligned when padding has been
/// hoisted past a skip source).
pub fn forward_network<T: Float>(
    net: &NetworkSpec,
    weights: &NetworkWeights<T>,
    input: &Tensor4<T>,
) -> Result<Tensor4<T>, MergeError> {
    if weights.layers.len() != net.layers.len() {
        return Err(MergeError::ShapeMismatch(
            "weights/layer count mismatch".into(),
        ));
    }
    let mut saved: Vec<Option<Tensor4<T>>> = vec![None; net.layers.len() + 1];
    let needs_save: Vec<bool> = (0..=net.layers.len())
        .map(|b| net.skips.iter().any(|s| s.start == b))
        .collect();
    let mut x = input.clone();
    if needs_save[0] {
        saved[0] = Some(x.clone());
    }
    for (idx, layer) in net.layers.iter().enumerate() {
        let lw = &weights.layers[idx];
        x = forward_conv(&x, &lw.kernel, layer.stride, layer.padding)?;
        if let Some(bn) = &lw.bn {
            apply_bn(bn, &mut x);
        }
        let boundary = idx + 1;
        for skip in net.skips.iter().filter(|s| s.end == boundary) {
            let src = saved[skip.start]
                .as_ref()
                .ok_or_else(|| MergeError::ShapeMismatch("skip source missing".into()))?;
            residual_add(&mut x, src)?;
        }
        apply_activation(layer.activation, &mut x);
        if needs_save[boundary] {
            saved[boundary] = Some(x.clone());
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
}

impl EquivalenceReport {
    /// Pass thresholds: 1e-9 absolute at 64-bit; 1e-4 relative (on
    /// outputs with magnitude > 1e-3) at 32-bit.
    pub fn passes(&self, is_f64: bool) -> bool {
        if is_f64 {
            self.max_abs_diff <= 1e-9
        } else {
            self.max_rel_diff <= 1e-4
        }
    }
}

/// Runs seeded standard-normal inputs through both networks and reports
/// worst-case output differences.
pub fn verify_equivalence<T: Float>(
    net_a: &NetworkSpec,
    weights_a: &NetworkWeights<T>,
    net_b: &NetworkSpec,
    weights_b: &NetworkWeights<T>,
    trials: usize,
    seed: u64,
) -> Result<EquivalenceReport, MergeError> {
    if net_a.input.channels != net_b.input.channels
        || net_a.input.height != net_b.input.height
        || net_a.input.width != net_b.input.width
    {
        return Err(MergeError::ShapeMismatch(
            "networks expect different input shapes".into(),
        ));
    }
    let mut max_abs = 0f64;
    let mut max_rel = 0f64;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
        let mut input = Tensor4::zeros(1, net_a.input.channels, net_a.input.height, net_a.input.width);
        for v in &mut input.data {
            let s: f64 = StandardNormal.sample(&mut rng);
            *v = T::from(s).unwrap();
        }
        let out_a = forward_network(net_a, weights_a, &input)?;
        let out_b = forward_network(net_b, weights_b, &input)?;
        if out_a.data.len() != out_b.data.len() {
            return Err(MergeError::ShapeMismatch(format!(
                "outputs differ in shape: {}x{}x{} vs {}x{}x{}",
                out_a.c, out_a.h, out_a.w, out_b.c, out_b.h, out_b.w
            )));
        }
        for (a, b) in out_a.data.iter().zip(out_b.data.iter()) {
            let a = a.to_f64().unwrap();
            let b = b.to_f64().unwrap();
            let abs = (a - b).abs();
            max_abs = max_abs.max(abs);
            if a.abs() > 1e-3 {
                max_rel = max_rel.max(abs / a.abs());
            }
        }
    }
    Ok(EquivalenceReport {
        trials,
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{BatchNormSpec, InputShape};

    fn rng_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor4::zeros(n, c, h, w);
        for v in &mut t.data {
            *v = StandardNormal.sample(&mut rng);
        }
        t
    }

    fn rng_kernel(out: usize, inc: usize, k: usize, groups: usize, seed: u64) -> Kernel4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kernel = Kernel4::zeros(out, inc, k, groups);
        for v in &mut kernel.weights {
            *v = StandardNormal.sample(&mut rng);
        }
        kernel
    }

    fn max_abs_diff(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
        assert_eq!((a.c, a.h, a.w), (b.c, b.h, b.w));
        a.data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = rng_tensor(1, 3, 5, 5, 1);
        let k = Kernel4::channel_identity(3);
        let y = forward_conv(&x, &k, 1, 0).unwrap();
        assert_eq!(x.data, y.data);
    }

    #[test]
    fn centered_delta_kernel() {
        let x = rng_tensor(1, 2, 6, 6, 2);
        let mut k = Kernel4::zeros(2, 2, 3, 1);
        *k.at_mut(0, 0, 1, 1) = 1.0;
        *k.at_mut(1, 1, 1, 1) = 1.0;
        let y = forward_conv(&x, &k, 1, 1).unwrap();
        assert!(max_abs_diff(&x, &y) == 0.0);
    }

    #[test]
    fn hand_computed_pointwise_with_bias() {
        let mut x = Tensor4::zeros(1, 1, 2, 2);
        x.data = vec![1.0, 2.0, 3.0, 4.0];
        let mut k = Kernel4::zeros(1, 1, 1, 1);
        k.weights[0] = 2.0;
        k.bias = Some(vec![0.5]);
        let y = forward_conv(&x, &k, 1, 0).unwrap();
        assert_eq!(y.data, vec![2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn compose_with_identity_is_neutral() {
        let mut k1 = rng_kernel(3, 2, 3, 1, 3);
        k1.bias = Some(vec![0.1, -0.2, 0.3]);
        let k2 = Kernel4::channel_identity(3);
        let merged = compose_kernels(&k2, &k1, 1).unwrap();
        assert_eq!(merged.kh, 3);
        assert_eq!(merged.weights, k1.weights);
        assert_eq!(merged.bias, k1.bias);
    }

    #[test]
    fn compose_two_3x3_gives_5x5() {
        let k1 = rng_kernel(4, 2, 3, 1, 4);
        let k2 = rng_kernel(3, 4, 3, 1, 5);
        let merged = compose_kernels(&k2, &k1, 1).unwrap();
        assert_eq!((merged.kh, merged.kw), (5, 5));
    }

    #[test]
    fn compose_matches_sequential_forward_with_stride() {
        let mut k1 = rng_kernel(3, 2, 3, 1, 6);
        k1.bias = Some(vec![0.3, -0.1, 0.2]);
        let mut k2 = rng_kernel(4, 3, 3, 1, 7);
        k2.bias = Some(vec![0.05, 0.1, -0.3, 0.0]);
        let (s1, p1, s2) = (2, 1, 1);
        let merged = compose_kernels(&k2, &k1, s1).unwrap();
        assert_eq!(merged.kh, 3 + 2 * s1);
        let x = rng_tensor(1, 2, 16, 16, 8);
        let seq = forward_conv(&forward_conv(&x, &k1, s1, p1).unwrap(), &k2, s2, 0).unwrap();
        let one = forward_conv(&x, &merged, s1 * s2, p1).unwrap();
        assert!(max_abs_diff(&seq, &one) < 1e-10);
    }

    #[test]
    fn expand_depthwise_preserves_forward() {
        let k = rng_kernel(4, 4, 3, 4, 9);
        let dense = expand_depthwise(&k);
        assert_eq!(dense.groups, 1);
        let nonzero = dense
            .weights
            .chunks(9)
            .filter(|c| c.iter().any(|&v| v != 0.0))
            .count();
        assert_eq!(nonzero, 4);
        let x = rng_tensor(1, 4, 7, 7, 10);
        let a = forward_conv(&x, &k, 1, 1).unwrap();
        let b = forward_conv(&x, &dense, 1, 1).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn grouped_expand_preserves_forward() {
        let k = rng_kernel(6, 4, 3, 2, 11);
        let dense = expand_depthwise(&k);
        let x = rng_tensor(1, 4, 8, 8, 12);
        let a = forward_conv(&x, &k, 1, 1).unwrap();
        let b = forward_conv(&x, &dense, 1, 1).unwrap();
        assert!(max_abs_diff(&a, &b) == 0.0);
    }

    #[test]
    fn fold_bn_identity_params() {
        let k = rng_kernel(3, 2, 3, 1, 13);
        let eps = 1e-5;
        let bn = BatchNormParams {
            gamma: vec![1.0; 3],
            beta: vec![0.0; 3],
            mean: vec![0.0; 3],
            var: vec![1.0 - eps; 3],
            eps,
        };
        let folded = fold_bn(&bn, &k);
        for (a, b) in folded.weights.iter().zip(&k.weights) {
            assert!((a - b).abs() < 1e-12);
        }
        for b in folded.bias.unwrap() {
            assert!(b.abs() < 1e-12);
        }
    }

    #[test]
    fn fold_bn_scale_two() {
        let k = rng_kernel(2, 2, 1, 1, 14);
        let eps = 1e-5;
        let bn = BatchNormParams {
            gamma: vec![2.0; 2],
            beta: vec![1.0; 2],
            mean: vec![0.0; 2],
            var: vec![1.0 - eps; 2],
            eps,
        };
        let folded = fold_bn(&bn, &k);
        for (a, b) in folded.weights.iter().zip(&k.weights) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        for b in folded.bias.unwrap() {
            assert!((b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fold_bn_matches_pipeline() {
        let mut k = rng_kernel(3, 2, 3, 1, 15);
        k.bias = Some(vec![0.2, -0.4, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let bn = BatchNormParams {
            gamma: (0..3).map(|_| rng.gen_range(0.5..1.5)).collect(),
            beta: (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            mean: (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            var: (0..3).map(|_| rng.gen_range(0.25..1.0)).collect(),
            eps: 1e-5,
        };
        let x = rng_tensor(1, 2, 6, 6, 17);
        let mut unfolded = forward_conv(&x, &k, 1, 1).unwrap();
        apply_bn(&bn, &mut unfolded);
        let folded = forward_conv(&x, &fold_bn(&bn, &k), 1, 1).unwrap();
        assert!(max_abs_diff(&unfolded, &folded) < 1e-12);
    }

    #[test]
    fn fuse_skip_zero_kernel_is_identity() {
        let k = Kernel4::<f64>::zeros(4, 4, 3, 1);
        let fused = fuse_skip(&k).unwrap();
        let x = rng_tensor(1, 4, 6, 6, 18);
        let y = forward_conv(&x, &fused, 1, 1).unwrap();
        assert!(max_abs_diff(&x, &y) == 0.0);
    }

    #[test]
    fn fuse_skip_channel_mismatch() {
        let k = Kernel4::<f64>::zeros(4, 3, 3, 1);
        assert!(matches!(fuse_skip(&k), Err(MergeError::NotFusable(_))));
    }

    #[test]
    fn fuse_skip_adds_input() {
        let k = rng_kernel(4, 4, 3, 1, 19);
        let fused = fuse_skip(&k).unwrap();
        let x = rng_tensor(1, 4, 6, 6, 20);
        let plain = forward_conv(&x, &k, 1, 1).unwrap();
        let with_skip = forward_conv(&x, &fused, 1, 1).unwrap();
        for n in 0..1 {
            for c in 0..4 {
                for y in 0..6 {
                    for xx in 0..6 {
                        let expect = plain.at(n, c, y, xx) + x.at(n, c, y, xx);
                        assert!((with_skip.at(n, c, y, xx) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    fn layer(
        inc: usize,
        out: usize,
        k: usize,
        s: usize,
        p: usize,
        groups: usize,
        bn: bool,
    ) -> ConvLayer {
        ConvLayer {
            in_channels: inc,
            out_channels: out,
            kernel_size: k,
            stride: s,
            padding: p,
            groups,
            has_bias: true,
            bn: bn.then(BatchNormSpec::default),
            activation: ActivationKind::Identity,
        }
    }

    #[test]
    fn reorder_padding_two_3x3() {
        let seg = vec![layer(4, 4, 3, 1, 1, 1, false), layer(4, 4, 3, 1, 1, 1, false)];
        assert_eq!(reorder_padding(&seg), vec![2, 0]);
    }

    #[test]
    fn reorder_padding_single_layer() {
        let seg = vec![layer(4, 4, 3, 1, 1, 1, false)];
        assert_eq!(reorder_padding(&seg), vec![1]);
    }

    #[test]
    fn reorder_padding_with_stride() {
        let seg = vec![layer(4, 4, 3, 2, 1, 1, false), layer(4, 4, 3, 1, 1, 1, false)];
        assert_eq!(reorder_padding(&seg), vec![3, 0]);
    }

    #[test]
    fn merged_shape_laws() {
        let net = NetworkSpec {
            input: InputShape {
                channels: 4,
                height: 16,
                width: 16,
            },
            layers: vec![
                layer(4, 8, 3, 1, 1, 1, false),
                layer(8, 8, 3, 2, 1, 8, false),
                layer(8, 6, 1, 1, 0, 1, false),
            ],
            skips: vec![],
        };
        let two = merged_shape(&net, 0, 2).unwrap();
        assert_eq!(two.kernel_size, 5);
        assert_eq!(two.stride, 2);
        let all = merged_shape(&net, 0, 3).unwrap();
        assert_eq!(all.kernel_size, 5);
        assert_eq!(all.stride, 2);
        assert_eq!(all.out_channels, 6);
        let single = merged_shape(&net, 1, 2).unwrap();
        assert_eq!(single.groups, 8);
    }

    #[test]
    fn merge_segment_matches_sequential() {
        // dense 3x3 / depthwise 3x3 (s=2) / 1x1, BN everywhere.
        let net = NetworkSpec {
            input: InputShape {
                channels: 3,
                height: 11,
                width: 11,
            },
            layers: vec![
                layer(3, 8, 3, 1, 1, 1, true),
                layer(8, 8, 3, 2, 1, 8, true),
                layer(8, 5, 1, 1, 0, 1, true),
            ],
            skips: vec![],
        };
        let weights = random_weights::<f64>(&net, 21);
        let merged = merge_segment(&net, &weights, 0, 3).unwrap();
        let shape = merged_shape(&net, 0, 3).unwrap();
        assert_eq!(merged.kernel.kh, shape.kernel_size);
        assert_eq!(merged.stride, shape.stride);
        assert_eq!(merged.padding, shape.padding);

        // Reference: reordered-padding sequential forward.
        let mut seq = net.clone();
        let hoisted = reorder_padding(&seq.layers);
        for (l, p) in seq.layers.iter_mut().zip(hoisted) {
            l.padding = p;
        }
        let x = rng_tensor(1, 3, 11, 11, 22);
        let expect = forward_network(&seq, &weights, &x).unwrap();
        let got = forward_conv(&x, &merged.kernel, merged.stride, merged.padding).unwrap();
        assert!(max_abs_diff(&expect, &got) < 1e-10);
    }

    #[test]
    fn merge_segment_rejects_interior_activation() {
        let mut net = NetworkSpec {
            input: InputShape {
                channels: 4,
                height: 8,
                width: 8,
            },
            layers: vec![layer(4, 4, 3, 1, 1, 1, false), layer(4, 4, 3, 1, 1, 1, false)],
            skips: vec![],
        };
        net.layers[0].activation = ActivationKind::Relu;
        let weights = random_weights::<f64>(&net, 23);
        assert!(matches!(
            merge_segment(&net, &weights, 0, 2),
            Err(MergeError::ActivationInside(1))
        ));
    }

    #[test]
    fn merge_segment_with_contained_skip() {
        // skip over the middle layer only; merged with neighbors.
        let net = NetworkSpec {
            input: InputShape {
                channels: 4,
                height: 9,
                width: 9,
            },
            layers: vec![
                layer(4, 4, 3, 1, 1, 1, false),
                layer(4, 4, 3, 1, 1, 1, false),
                layer(4, 4, 1, 1, 0, 1, false),
            ],
            skips: vec![SkipConnection { start: 1, end: 2 }],
        };
        let weights = random_weights::<f64>(&net, 24);
        let merged = merge_segment(&net, &weights, 0, 3).unwrap();
        let mut seq = net.clone();
        let hoisted = reorder_padding(&seq.layers);
        for (l, p) in seq.layers.iter_mut().zip(hoisted) {
            l.padding = p;
        }
        let x = rng_tensor(1, 4, 9, 9, 25);
        let expect = forward_network(&seq, &weights, &x).unwrap();
        let got = forward_conv(&x, &merged.kernel, merged.stride, merged.padding).unwrap();
        assert!(max_abs_diff(&expect, &got) < 1e-10);
    }

    #[test]
    fn bias_probe_on_zero_input() {
        // All-zero input through a zero-padding merged layer yields the
        // bias broadcast: certifies the merged bias formula.
        let net = NetworkSpec {
            input: InputShape {
                channels: 3,
                height: 9,
                width: 9,
            },
            layers: vec![layer(3, 4, 3, 1, 0, 1, false), layer(4, 5, 3, 1, 0, 1, false)],
            skips: vec![],
        };
        let weights = random_weights::<f64>(&net, 26);
        let merged = merge_segment(&net, &weights, 0, 2).unwrap();
        let x = Tensor4::zeros(1, 3, 9, 9);
        let y = forward_conv(&x, &merged.kernel, merged.stride, 0).unwrap();
        let bias = merged.kernel.bias.as_ref().unwrap();
        for c in 0..y.c {
            for yy in 0..y.h {
                for xx in 0..y.w {
                    assert!((y.at(0, c, yy, xx) - bias[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weights_roundtrip() {
        let net = NetworkSpec {
            input: InputShape {
                channels: 3,
                height: 8,
                width: 8,
            },
            layers: vec![layer(3, 4, 3, 1, 1, 1, true)],
            skips: vec![],
        };
        let weights = random_weights::<f64>(&net, 27);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        weights.to_path(&path).unwrap();
        let loaded = NetworkWeights::<f64>::from_path(&path).unwrap();
        assert_eq!(loaded.layers[0].kernel.weights, weights.layers[0].kernel.weights);
    }
}
