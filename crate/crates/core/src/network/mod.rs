//! Layer composition: forward passes with activation caching, cross-entropy
//! backpropagation and guided backpropagation.

pub mod checkpoint;
pub mod spec;

pub use checkpoint::{arch_sidecar, Checkpoint, LayerParams};
pub use spec::{LayerKind, LayerSpec, NetworkSpec};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Element, Tensor};

/// Cached activations from one forward pass.
///
/// `activations[0]` is the input image and `activations[i + 1]` is the output
/// of layer `i`, so the last entry holds the class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<E = f32> {
    activations: Vec<Tensor<E>>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl<E: Element> ActivationTrace<E> {
    pub fn layer_count(&self) -> usize {
        self.argmax.len()
    }

    pub fn input(&self) -> &Tensor<E> {
        &self.activations[0]
    }

    pub fn layer_input(&self, i: usize) -> &Tensor<E> {
        &self.activations[i]
    }

    pub fn layer_output(&self, i: usize) -> &Tensor<E> {
        &self.activations[i + 1]
    }

    /// Argmax positions recorded by a max-pool layer.
    pub fn pool_argmax(&self, i: usize) -> Option<&[usize]> {
        self.argmax.get(i).and_then(|a| a.as_deref())
    }

    pub fn probs(&self) -> &Tensor<E> {
        self.activations.last().unwrap()
    }
}

/// Gradients from [`Checkpoint::backward`]. Parameter entries are `None` for
/// layers without parameters and for frozen layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<E = f32> {
    pub input: Tensor<E>,
    pub params: Vec<Option<LayerParams<E>>>,
}

impl<E: Element> Checkpoint<E> {
    pub fn forward(&self, image: &Tensor<E>) -> Result<(Tensor<E>, ActivationTrace<E>)> {
        let spec = self.spec();
        image.expect_shape(&spec.input_shape()).map_err(|_| {
            Error::dim(format!(
                "image shape {:?} does not match network input {:?}",
                image.shape(),
                spec.input_shape()
            ))
        })?;
        let n = spec.layers().len();
        let mut activations = Vec::with_capacity(n + 1);
        let mut argmax = Vec::with_capacity(n);
        activations.push(image.clone());
        for (i, layer) in spec.layers().iter().enumerate() {
            let x = &activations[i];
            let (out, pool) = match layer.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let p = self.layer_params(i).expect("validated");
                    (ops::conv2d_forward(x, &p.weights, &p.bias, stride, pad)?, None)
                }
                LayerKind::Relu => (ops::relu(x), None),
                LayerKind::MaxPool { window, stride } => {
                    let pooled = ops::maxpool_forward(x, window, stride)?;
                    (pooled.output, Some(pooled.argmax))
                }
                LayerKind::Flatten => (x.clone().reshape([x.len()])?, None),
                LayerKind::Dense { .. } => {
                    let p = self.layer_params(i).expect("validated");
                    (ops::dense_forward(x, &p.weights, &p.bias)?, None)
                }
                LayerKind::Softmax => (ops::softmax(x), None),
            };
            activations.push(out);
            argmax.push(pool);
        }
        let trace = ActivationTrace { activations, argmax };
        Ok((trace.probs().clone(), trace))
    }

    /// Class probabilities only.
    pub fn predict(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        self.forward(image).map(|(probs, _)| probs)
    }

    /// Exact gradient of `−ln P(target)` with respect to the input and every
    /// trainable parameter.
    pub fn backward(&self, trace: &ActivationTrace<E>, target: usize) -> Result<Gradients<E>> {
        self.backward_masked(trace, target, &self.spec().trainable_mask())
    }

    /// Like [`backward`](Self::backward), but only layers selected by `mask`
    /// receive parameter gradients.
    pub fn backward_masked(
        &self,
        trace: &ActivationTrace<E>,
        target: usize,
        mask: &[bool],
    ) -> Result<Gradients<E>> {
        self.check_trace(trace)?;
        let probs = trace.probs();
        let k = probs.len();
        if target >= k {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: target,
                len: k,
            });
        }
        // Softmax and cross-entropy fused: dL/dz = p − onehot(target).
        let mut logit_grad = probs.clone();
        logit_grad.data_mut()[target] = logit_grad.data()[target] - E::one();
        let n = self.spec().layers().len();
        let mut params = vec![None; n];
        let mut grad = logit_grad;
        for i in (0..n - 1).rev() {
            let (input_grad, param_grad) = self.layer_backward(trace, i, &grad, mask[i])?;
            params[i] = param_grad;
            grad = input_grad;
        }
        Ok(Gradients { input: grad, params })
    }

    /// Plain backpropagation of `seed` (a gradient with respect to the
    /// logits, i.e. the output of the layer before softmax) down to the input.
    pub fn backprop_to_input(&self, trace: &ActivationTrace<E>, seed: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_trace(trace)?;
        let n = self.spec().layers().len();
        seed.expect_shape(trace.layer_input(n - 1).shape())?;
        let mut grad = seed.clone();
        for i in (0..n - 1).rev() {
            grad = self.layer_backward(trace, i, &grad, false)?.0;
        }
        Ok(grad)
    }

    /// Gradient of the class probability `P(y)` with respect to the logits.
    pub fn probability_logit_grad(&self, trace: &ActivationTrace<E>, y: usize) -> Result<Tensor<E>> {
        let probs = trace.probs();
        if y >= probs.len() {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: y,
                len: probs.len(),
            });
        }
        let onehot = Tensor::from_fn([probs.len()], |k| if k == y { E::one() } else { E::zero() })?;
        ops::softmax_backward(probs, &onehot)
    }

    /// Guided backpropagation of class `y`.
    ///
    /// Starts from `relu(dP(y)/dL_N)` and rectifies after every layer's
    /// backward step, including the final step onto the input, so the result
    /// is elementwise non-negative.
    pub fn guided_backward(&self, trace: &ActivationTrace<E>, y: usize) -> Result<Tensor<E>> {
        self.check_trace(trace)?;
        let mut grad = ops::relu(&self.probability_logit_grad(trace, y)?);
        for i in (0..self.spec().layers().len() - 1).rev() {
            grad = ops::relu(&self.layer_backward(trace, i, &grad, false)?.0);
        }
        Ok(grad)
    }

    fn check_trace(&self, trace: &ActivationTrace<E>) -> Result<()> {
        let spec = self.spec();
        if trace.layer_count() != spec.layers().len() {
            return Err(Error::dim(format!(
                "trace has {} layers, network has {}",
                trace.layer_count(),
                spec.layers().len()
            )));
        }
        for i in 0..spec.layers().len() {
            if trace.layer_output(i).shape() != spec.layer_output_shape(i) {
                return Err(Error::dim(format!("trace does not match network at layer {i}")));
            }
        }
        Ok(())
    }

    /// One layer's backward step: input gradient, plus parameter gradients
    /// when `want_params` and the layer has parameters.
    fn layer_backward(
        &self,
        trace: &ActivationTrace<E>,
        i: usize,
        upstream: &Tensor<E>,
        want_params: bool,
    ) -> Result<(Tensor<E>, Option<LayerParams<E>>)> {
        let x = trace.layer_input(i);
        match self.spec().layers()[i].kind {
            LayerKind::Conv { stride, pad, .. } => {
                let p = self.layer_params(i).expect("validated");
                if want_params {
                    let g = ops::conv2d_backward(x, &p.weights, stride, pad, upstream)?;
                    Ok((
                        g.input,
                        Some(LayerParams {
                            weights: g.kernels,
                            bias: g.bias,
                        }),
                    ))
                } else {
                    Ok((ops::conv2d_backward_input(x, &p.weights, stride, pad, upstream)?, None))
                }
            }
            LayerKind::Dense { .. } => {
                let p = self.layer_params(i).expect("validated");
                if want_params {
                    let g = ops::dense_backward(x, &p.weights, upstream)?;
                    Ok((
                        g.input,
                        Some(LayerParams {
                            weights: g.weights,
                            bias: g.bias,
                        }),
                    ))
                } else {
                    Ok((ops::dense_backward_input(x.shape(), &p.weights, upstream)?, None))
                }
            }
            LayerKind::Relu => Ok((ops::relu_backward(x, upstream)?, None)),
            LayerKind::MaxPool { .. } => {
                let argmax = trace.pool_argmax(i).expect("pool layers record argmax");
                Ok((ops::maxpool_backward(x.shape(), argmax, upstream)?, None))
            }
            LayerKind::Flatten => Ok((upstream.clone().reshape(x.shape().to_vec())?, None)),
            LayerKind::Softmax => Ok((ops::softmax_backward(trace.layer_output(i), upstream)?, None)),
        }
    }
}
