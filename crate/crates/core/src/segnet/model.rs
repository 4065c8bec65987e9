use std::io::{Read, Write};

use ndarray::{Array1, Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EngineError;
use crate::archspec::{parse_spec, propagate_shapes, LayerKind, LayerSpec, NetworkSpec, Shape3};
use crate::Scalar;

pub const MODEL_MAGIC: &[u8; 5] = b"PSEG1";

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

/// Weights and biases for every affine layer of a spec; `None` for ReLUs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

/// Weight shape of a layer given its (propagated) input shape.
pub fn weight_shape(layer: &LayerSpec, input: Shape3) -> Option<(usize, usize, usize, usize)> {
    let (kh, kw) = layer.kernel;
    match layer.kind {
        LayerKind::Relu => None,
        LayerKind::Conv | LayerKind::ConvStrided => {
            Some((layer.out_channels, layer.in_channels, kh, kw))
        }
        LayerKind::ConvTranspose => Some((layer.in_channels, layer.out_channels, kh, kw)),
        LayerKind::FullyConnected => Some((layer.out_channels, input.volume(), 1, 1)),
    }
}

fn fan_in(layer: &LayerSpec) -> usize {
    let k = layer.kernel.0 * layer.kernel.1;
    match layer.kind {
        LayerKind::ConvTranspose => (layer.in_channels * k / (layer.stride * layer.stride)).max(1),
        _ => layer.in_channels * k,
    }
}

impl<T: Scalar> ModelParams<T> {
    /// He-style uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases. `spec` must have propagated shapes.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                weight_shape(layer, spec.layer_input_shape(i)).map(|shape| {
                    let limit = (6.0 / fan_in(layer) as f64).sqrt();
                    let weight =
                        Array4::from_shape_simple_fn(shape, || T::of(rng.gen_range(-limit..limit)));
                    LayerParams {
                        weight,
                        bias: Array1::zeros(layer.out_channels),
                    }
                })
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight: Array4::zeros(p.weight.raw_dim()),
                        bias: Array1::zeros(p.bias.raw_dim()),
                    })
                })
                .collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn scaled_add(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                a.weight.scaled_add(alpha, &b.weight);
                a.bias.scaled_add(alpha, &b.bias);
            }
        }
    }

    /// `self = momentum * self + grad`, the velocity update of SGD.
    pub fn momentum_update(&mut self, momentum: T, grad: &Self) {
        for (v, g) in self.layers.iter_mut().zip(&grad.layers) {
            if let (Some(v), Some(g)) = (v.as_mut(), g.as_ref()) {
                Zip::from(&mut v.weight)
                    .and(&g.weight)
                    .for_each(|v, &g| *v = momentum * *v + g);
                Zip::from(&mut v.bias)
                    .and(&g.bias)
                    .for_each(|v, &g| *v = momentum * *v + g);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for p in self.layers.iter_mut().flatten() {
            p.weight.mapv_inplace(|v| v * factor);
            p.bias.mapv_inplace(|v| v * factor);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|p| p.weight.iter().chain(p.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight: p.weight.mapv(|v| U::of(v.to_f64_lossy())),
                        bias: p.bias.mapv(|v| U::of(v.to_f64_lossy())),
                    })
                })
                .collect(),
        }
    }

    /// Check that every layer has parameters of the shape `spec` requires.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<(), EngineError> {
        if self.layers.len() != spec.layers.len() {
            return Err(EngineError::ParamMismatch(format!(
                "{} parameter slots for {} layers",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (i, (layer, params)) in spec.layers.iter().zip(&self.layers).enumerate() {
            let expected = weight_shape(layer, spec.layer_input_shape(i));
            let found = params.as_ref().map(|p| p.weight.dim());
            let bias_ok = params
                .as_ref()
                .is_none_or(|p| p.bias.len() == layer.out_channels);
            if expected != found || !bias_ok {
                return Err(EngineError::ParamMismatch(format!(
                    "layer {i}: expected weights {expected:?}, found {found:?}"
                )));
            }
        }
        Ok(())
    }

    /// Encode as a model file: magic, length-prefixed spec JSON, then the
    /// `f32` weight and bias blobs of each affine layer in layer order.
    pub fn to_bytes(&self, spec: &NetworkSpec) -> Vec<u8> {
        let json = spec.to_json();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.parameter_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        for p in self.layers.iter().flatten() {
            for v in p.weight.iter().chain(p.bias.iter()) {
                out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn write_to(&self, spec: &NetworkSpec, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes(spec))
    }
}

/// Decode a model file into its (shape-propagated) spec and parameters.
pub fn read_model<T: Scalar>(
    mut r: impl Read,
) -> Result<(NetworkSpec, ModelParams<T>), EngineError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

pub fn model_from_bytes<T: Scalar>(
    bytes: &[u8],
) -> Result<(NetworkSpec, ModelParams<T>), EngineError> {
    let bad = |m: &str| EngineError::ModelFormat(m.to_string());
    if bytes.len() < 9 || &bytes[..5] != MODEL_MAGIC {
        return Err(bad("missing PSEG1 magic"));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let json = bytes
        .get(9..9 + len)
        .ok_or_else(|| bad("truncated spec section"))?;
    let json = std::str::from_utf8(json).map_err(|_| bad("spec section is not UTF-8"))?;
    let spec = parse_spec(json)?;
    let spec = propagate_shapes(&spec, spec.input)?;
    let mut floats = bytes[9 + len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    if !(bytes.len() - 9 - len).is_multiple_of(4) {
        return Err(bad("parameter section is not a whole number of f32 values"));
    }
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let Some(shape) = weight_shape(layer, spec.layer_input_shape(i)) else {
            layers.push(None);
            continue;
        };
        let mut take = |n: usize| -> Result<Vec<T>, EngineError> {
            let v: Vec<T> = floats.by_ref().take(n).map(|f| T::of(f as f64)).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(bad("truncated parameter section"))
            }
        };
        let weight =
            Array4::from_shape_vec(shape, take(shape.0 * shape.1 * shape.2 * shape.3)?).unwrap();
        let bias = Array1::from(take(layer.out_channels)?);
        layers.push(Some(LayerParams { weight, bias }));
    }
    if floats.next().is_some() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok((spec, ModelParams { layers }))
}
