use ndarray::Array4;

use super::ops;
use super::{EngineError, ModelParams, Tensor};
use crate::archspec::{LayerKind, NetworkSpec};
use crate::Scalar;

/// A spec bound to parameters, ready to run.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    params: ModelParams<T>,
}

/// Activations of one forward pass. After [`Network::backward`] every
/// tensor's gradient buffer holds the loss gradient at that point.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub input: Tensor<T>,
    pub layers: Vec<Tensor<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.layers.last().unwrap_or(&self.input)
    }
}

impl<T: Scalar> Network<T> {
    /// `spec` must carry propagated shapes for the input size it will see.
    pub fn new(spec: NetworkSpec, params: ModelParams<T>) -> Result<Self, EngineError> {
        if spec.shapes.len() != spec.layers.len() {
            return Err(EngineError::ShapeMismatch(
                "spec shapes have not been propagated".into(),
            ));
        }
        spec.check_skip_alignment()?;
        params.check_against(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    fn check_input(&self, x: &Array4<T>) -> Result<(), EngineError> {
        let (_, c, h, w) = x.dim();
        let s = self.spec.input;
        if (c, h, w) != (s.c, s.h, s.w) {
            return Err(EngineError::ShapeMismatch(format!(
                "network expects input {s}, got ({c},{h},{w})"
            )));
        }
        Ok(())
    }

    /// Run layer `index` on an explicit input (which must already include any
    /// concatenated channels).
    pub fn layer_forward(&self, index: usize, x: &Array4<T>) -> Result<Array4<T>, EngineError> {
        let layer = &self.spec.layers[index];
        let expected = self.spec.layer_input_shape(index);
        let (_, c, h, w) = x.dim();
        if (c, h, w) != (expected.c, expected.h, expected.w) {
            return Err(EngineError::ShapeMismatch(format!(
                "layer {index} expects {expected}, got ({c},{h},{w})"
            )));
        }
        let p = self.params.layers[index].as_ref();
        Ok(match layer.kind {
            LayerKind::Relu => ops::relu_forward(x),
            LayerKind::Conv | LayerKind::ConvStrided => {
                let p = p.unwrap();
                ops::conv2d_forward(x, &p.weight, &p.bias, layer.stride)
            }
            LayerKind::ConvTranspose => {
                let p = p.unwrap();
                ops::conv_transpose_forward(x, &p.weight, &p.bias, layer.stride)
            }
            LayerKind::FullyConnected => {
                let p = p.unwrap();
                ops::fc_forward(x, &p.weight, &p.bias)
            }
        })
    }

    fn layer_input(&self, pass_input: &Array4<T>, outs: &[Tensor<T>], index: usize) -> Array4<T> {
        let prev = if index == 0 {
            pass_input
        } else {
            outs[index - 1].data()
        };
        match self.spec.layers[index].concat {
            Some(src) => ops::concat_channels(prev, outs[src].data()),
            None => prev.clone(),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<ForwardPass<T>, EngineError> {
        self.check_input(x)?;
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.spec.layers.len());
        for i in 0..self.spec.layers.len() {
            let input = self.layer_input(x, &outs, i);
            let y = self.layer_forward(i, &input)?;
            debug_assert!(
                y.iter().all(|v| v.is_finite()),
                "non-finite activation at layer {i}"
            );
            outs.push(Tensor::new(y));
        }
        Ok(ForwardPass {
            input: Tensor::new(x.clone()),
            layers: outs,
        })
    }

    /// Network output for `x`.
    pub fn logits(&self, x: &Array4<T>) -> Result<Array4<T>, EngineError> {
        let pass = self.forward(x)?;
        Ok(pass.output().data().clone())
    }

    /// Back-propagate `d_output` through `pass`. Fills every gradient buffer
    /// in `pass` (the input gradient ends up in `pass.input`) and returns
    /// parameter gradients when `param_grads` is set.
    pub fn backward(
        &self,
        pass: &mut ForwardPass<T>,
        d_output: &Array4<T>,
        param_grads: bool,
    ) -> Result<Option<ModelParams<T>>, EngineError> {
        let n = self.spec.layers.len();
        if n == 0 {
            pass.input.accumulate_grad(d_output);
            return Ok(param_grads.then(|| self.params.zeros_like()));
        }
        if d_output.dim() != pass.layers[n - 1].shape() {
            return Err(EngineError::ShapeMismatch("output gradient shape".into()));
        }
        pass.input.zero_grad();
        for t in pass.layers.iter_mut() {
            t.zero_grad();
        }
        pass.layers[n - 1].accumulate_grad(d_output);
        let mut grads = param_grads.then(|| self.params.zeros_like());
        for i in (0..n).rev() {
            let layer = &self.spec.layers[i];
            let input = self.layer_input(pass.input.data(), &pass.layers, i);
            let dy = pass.layers[i].grad().clone();
            let p = self.params.layers[i].as_ref();
            let (dx, pg) = match layer.kind {
                LayerKind::Relu => (ops::relu_backward(&input, &dy), None),
                LayerKind::Conv | LayerKind::ConvStrided => {
                    let g = ops::conv2d_backward(
                        &input,
                        &p.unwrap().weight,
                        &dy,
                        layer.stride,
                        param_grads,
                    );
                    (g.dx, g.params)
                }
                LayerKind::ConvTranspose => {
                    let g = ops::conv_transpose_backward(
                        &input,
                        &p.unwrap().weight,
                        &dy,
                        layer.stride,
                        param_grads,
                    );
                    (g.dx, g.params)
                }
                LayerKind::FullyConnected => {
                    let g = ops::fc_backward(&input, &p.unwrap().weight, &dy, param_grads);
                    (g.dx, g.params)
                }
            };
            if let (Some(grads), Some((dw, db))) = (grads.as_mut(), pg) {
                let slot = grads.layers[i].as_mut().unwrap();
                slot.weight = dw;
                slot.bias = db;
            }
            let d_prev = match layer.concat {
                Some(src) => {
                    let prev_c = if i == 0 {
                        pass.input.shape().1
                    } else {
                        pass.layers[i - 1].shape().1
                    };
                    let (a, b) = ops::split_channels(&dx, prev_c);
                    pass.layers[src].accumulate_grad(&b);
                    a
                }
                None => dx,
            };
            if i == 0 {
                pass.input.accumulate_grad(&d_prev);
            } else {
                pass.layers[i - 1].accumulate_grad(&d_prev);
            }
        }
        Ok(grads)
    }
}
