//! Receptive fields and patch influence regions.
//!
//! Per axis, a forward convolution with kernel `k` and stride `s` updates
//! the receptive field `r`, jump `j` and centre offset as
//! `r += (k - 1) * j; j *= s`. A transposed convolution divides the jump
//! first, `j /= s; r += (k - 1) * j`, so jumps and offsets are kept as exact
//! rationals.
//!
//! Influence regions are computed separately by propagating the patch's
//! pixel interval through every layer, including concatenated skips.

use thiserror::Error;

use crate::archspec::{LayerKind, LayerSpec, NetworkSpec};
use crate::geometry::RectPlacement;
use crate::Rational;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RfError {
    #[error("patch {patch:?} lies outside the {height}x{width} input")]
    OutOfBounds {
        patch: RectPlacement,
        height: usize,
        width: usize,
    },
    #[error("network shapes have not been propagated")]
    NotPropagated,
}

/// Receptive-field geometry after one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerRf {
    pub layer: usize,
    pub rf_h: Rational,
    pub rf_w: Rational,
    /// Input pixels per output step (equal on both axes).
    pub jump: Rational,
    /// Input coordinate of the centre of output `(0, 0)`'s field.
    pub offset_h: Rational,
    pub offset_w: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfDescriptor {
    pub layers: Vec<LayerRf>,
}

impl RfDescriptor {
    pub fn last(&self) -> Option<&LayerRf> {
        self.layers.last()
    }

    /// One row per layer: `layer,rf_h,rf_w,jump,offset` (offset on the
    /// vertical axis).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,rf_h,rf_w,jump,offset\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.layer, l.rf_h, l.rf_w, l.jump, l.offset_h
            ));
        }
        out
    }
}

#[derive(Clone, Copy)]
struct Axis {
    rf: Rational,
    jump: Rational,
    offset: Rational,
}

fn step_axis(a: Axis, layer: &LayerSpec, k: usize, input_extent: usize) -> Axis {
    let k = k as i64;
    let s = Rational::from_integer(layer.stride as i64);
    let pad = (k - 1) / 2;
    // Half-pixel shift of even kernels under floor((k-1)/2) padding.
    let shift = Rational::new(k - 1, 2) - pad;
    match layer.kind {
        LayerKind::Relu => a,
        LayerKind::Conv | LayerKind::ConvStrided => Axis {
            rf: a.rf + a.jump * (k - 1),
            jump: a.jump * s,
            offset: a.offset + a.jump * shift,
        },
        LayerKind::ConvTranspose => {
            let jump = a.jump / s;
            Axis {
                rf: a.rf + jump * (k - 1),
                jump,
                offset: a.offset - a.jump * shift / s,
            }
        }
        LayerKind::FullyConnected => Axis {
            rf: a.rf + a.jump * (input_extent as i64 - 1),
            jump: a.jump,
            offset: a.offset + a.jump * Rational::new(input_extent as i64 - 1, 2),
        },
    }
}

/// Receptive field of every layer along the layer list.
///
/// Concatenated skips are ignored: the walk follows the main chain.
pub fn receptive_field(net: &NetworkSpec) -> Result<RfDescriptor, RfError> {
    if net.shapes.len() != net.layers.len() {
        return Err(RfError::NotPropagated);
    }
    let unit = Axis {
        rf: Rational::from_integer(1),
        jump: Rational::from_integer(1),
        offset: Rational::from_integer(0),
    };
    let (mut ah, mut aw) = (unit, unit);
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let input = net.layer_input_shape(i);
        ah = step_axis(ah, layer, layer.kernel.0, input.h);
        aw = step_axis(aw, layer, layer.kernel.1, input.w);
        layers.push(LayerRf {
            layer: i,
            rf_h: ah.rf,
            rf_w: aw.rf,
            jump: ah.jump,
            offset_h: ah.offset,
            offset_w: aw.offset,
        });
    }
    Ok(RfDescriptor { layers })
}

/// Inclusive index interval, `None` when empty.
type Span = Option<(i64, i64)>;

fn hull(a: Span, b: Span) -> Span {
    match (a, b) {
        (Some((a0, a1)), Some((b0, b1))) => Some((a0.min(b0), a1.max(b1))),
        (x, None) | (None, x) => x,
    }
}

fn ceil_div(a: i64, b: i64) -> i64 {
    a.div_euclid(b) + i64::from(a.rem_euclid(b) != 0)
}

fn span_through(span: Span, layer: &LayerSpec, k: usize, out_extent: usize) -> Span {
    let (a, b) = span?;
    let k = k as i64;
    let s = layer.stride as i64;
    let pad = (k - 1) / 2;
    let (lo, hi) = match layer.kind {
        LayerKind::Relu => (a, b),
        // Output o reads inputs [o*s - pad, o*s - pad + k - 1].
        LayerKind::Conv | LayerKind::ConvStrided => {
            (ceil_div(a + pad - k + 1, s), (b + pad).div_euclid(s))
        }
        // Input i writes outputs [i*s - pad, i*s - pad + k - 1].
        LayerKind::ConvTranspose => (a * s - pad, b * s - pad + k - 1),
        LayerKind::FullyConnected => (0, out_extent as i64 - 1),
    };
    let (lo, hi) = (lo.max(0), hi.min(out_extent as i64 - 1));
    (lo <= hi).then_some((lo, hi))
}

/// Output box of every layer that the patch can influence.
pub fn influence_boxes(
    net: &NetworkSpec,
    patch: &RectPlacement,
) -> Result<Vec<Option<RectPlacement>>, RfError> {
    if net.shapes.len() != net.layers.len() {
        return Err(RfError::NotPropagated);
    }
    let input = net.input;
    if patch.height == 0
        || patch.width == 0
        || patch.top + patch.height > input.h
        || patch.left + patch.width > input.w
    {
        return Err(RfError::OutOfBounds {
            patch: *patch,
            height: input.h,
            width: input.w,
        });
    }
    let to_box = |(v, h): (Span, Span)| match (v, h) {
        (Some((t, b)), Some((l, r))) => Some(RectPlacement {
            top: t as usize,
            left: l as usize,
            height: (b - t + 1) as usize,
            width: (r - l + 1) as usize,
        }),
        _ => None,
    };
    let mut spans: Vec<(Span, Span)> = Vec::with_capacity(net.layers.len());
    let source = (
        Some((patch.top as i64, (patch.top + patch.height - 1) as i64)),
        Some((patch.left as i64, (patch.left + patch.width - 1) as i64)),
    );
    for (i, layer) in net.layers.iter().enumerate() {
        let prev = if i == 0 { source } else { spans[i - 1] };
        let (v, h) = match layer.concat {
            Some(src) => (hull(prev.0, spans[src].0), hull(prev.1, spans[src].1)),
            None => prev,
        };
        let out_shape = net.shapes[i];
        let next = if layer.kind == LayerKind::FullyConnected && (v.is_none() || h.is_none()) {
            (None, None)
        } else {
            (
                span_through(v, layer, layer.kernel.0, out_shape.h),
                span_through(h, layer, layer.kernel.1, out_shape.w),
            )
        };
        spans.push(next);
    }
    Ok(spans.into_iter().map(to_box).collect())
}

/// Box of output pixels whose receptive field intersects the patch, clipped
/// to the output map. `None` if no output can be affected.
pub fn influence_region(
    net: &NetworkSpec,
    patch: &RectPlacement,
) -> Result<Option<RectPlacement>, RfError> {
    let boxes = influence_boxes(net, patch)?;
    Ok(match boxes.last() {
        Some(b) => *b,
        None => Some(*patch),
    })
}
