//! Forward execution with BN-tap capture and reverse-mode differentiation
//! with respect to the model input. Layer parameters are always frozen.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Layer, ModelGraph};
use crate::ops;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Captured inputs of batch-norm layers, keyed by layer index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationTrace<T> {
    pub taps: BTreeMap<usize, Tensor<T>>,
}

impl<T> ActivationTrace<T> {
    pub fn tap(&self, layer: usize) -> Option<&Tensor<T>> {
        self.taps.get(&layer)
    }
}

/// Value and partial derivatives of a scalar objective over a trace.
#[derive(Debug, Clone)]
pub struct ObjectiveGrad<T> {
    pub loss: T,
    /// d loss / d tap, keyed like [`ActivationTrace::taps`].
    pub tap_grads: BTreeMap<usize, Tensor<T>>,
    /// d loss / d output; `None` when the objective ignores the output.
    pub output_grad: Option<Tensor<T>>,
}

/// Differentiable scalar function of the BN taps and (optionally) the final
/// output.
pub trait Objective<T: Real> {
    /// Whether the objective reads the final model output. When false the
    /// forward pass stops after the last batch-norm tap.
    fn uses_output(&self) -> bool;

    fn evaluate(&self, trace: &ActivationTrace<T>, output: Option<&Tensor<T>>) -> Result<ObjectiveGrad<T>>;
}

/// `loss = <weights, output>`; all-ones weights give the plain output sum.
#[derive(Debug, Clone)]
pub struct OutputDot<T> {
    pub weights: Tensor<T>,
}

impl<T: Real> Objective<T> for OutputDot<T> {
    fn uses_output(&self) -> bool {
        true
    }

    fn evaluate(&self, _: &ActivationTrace<T>, output: Option<&Tensor<T>>) -> Result<ObjectiveGrad<T>> {
        let out = output.ok_or_else(|| Error::Empty("objective needs the model output".into()))?;
        if out.shape() != self.weights.shape() {
            return Err(Error::shape(None, "objective weights differ from output shape"));
        }
        let loss = out
            .data()
            .iter()
            .zip(self.weights.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        Ok(ObjectiveGrad {
            loss,
            tap_grads: BTreeMap::new(),
            output_grad: Some(self.weights.clone()),
        })
    }
}

/// `loss = 0.5 * ||output||^2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HalfSquaredNorm;

impl<T: Real> Objective<T> for HalfSquaredNorm {
    fn uses_output(&self) -> bool {
        true
    }

    fn evaluate(&self, _: &ActivationTrace<T>, output: Option<&Tensor<T>>) -> Result<ObjectiveGrad<T>> {
        let out = output.ok_or_else(|| Error::Empty("objective needs the model output".into()))?;
        let loss = out.data().iter().fold(T::zero(), |acc, &v| acc + v * v) * T::of(0.5);
        Ok(ObjectiveGrad {
            loss,
            tap_grads: BTreeMap::new(),
            output_grad: Some(out.clone()),
        })
    }
}

fn check_input<T: Real>(model: &ModelGraph<T>, input: &Tensor<T>) -> Result<()> {
    if input.rank() != model.input_shape().len() + 1 || &input.shape()[1..] != model.input_shape() {
        return Err(Error::shape(
            None,
            format!(
                "input shape {:?} does not match (N,) + {:?}",
                input.shape(),
                model.input_shape()
            ),
        ));
    }
    Ok(())
}

fn batched(n: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(per_sample);
    s
}

pub(crate) fn apply_layer<T: Real>(model: &ModelGraph<T>, i: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let expected_in = batched(n, model.layer_input_shape(i));
    if x.shape() != expected_in.as_slice() {
        return Err(Error::shape(
            Some(i),
            format!("layer input {:?} differs from expected {expected_in:?}", x.shape()),
        ));
    }
    let out_shape = model.layer_output_shape(i);
    let y = match &model.layers()[i] {
        Layer::Conv2d(c) => ops::conv2d_forward(c, x, out_shape),
        Layer::BatchNorm2d(bn) => ops::batchnorm_forward(bn, x),
        Layer::Relu => ops::relu_forward(x),
        Layer::MaxPool2d(p) => ops::maxpool_forward(p, x, out_shape),
        Layer::AvgPool2d(p) => ops::avgpool_forward(p, x, out_shape),
        Layer::Flatten => x.clone().reshape(batched(n, out_shape))?,
        Layer::Linear(l) => ops::linear_forward(l, x),
    };
    if !y.is_finite() {
        return Err(Error::NonFinite { layer: Some(i) });
    }
    debug_assert_eq!(y.shape(), batched(n, out_shape).as_slice());
    Ok(y)
}

/// Runs layers `[0, stop)`, returning every layer input and the final tensor.
fn run_cached<T: Real>(model: &ModelGraph<T>, input: &Tensor<T>, stop: usize) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let mut inputs = Vec::with_capacity(stop);
    let mut cur = input.clone();
    for i in 0..stop {
        let next = apply_layer(model, i, &cur)?;
        inputs.push(std::mem::replace(&mut cur, next));
    }
    Ok((inputs, cur))
}

/// Forward pass in inference mode. With `capture_bn_taps`, the input of
/// every batch-norm layer is recorded in the returned trace.
pub fn forward<T: Real>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    capture_bn_taps: bool,
) -> Result<(Tensor<T>, ActivationTrace<T>)> {
    check_input(model, input)?;
    if !input.is_finite() {
        return Err(Error::NonFinite { layer: None });
    }
    let mut trace = ActivationTrace::default();
    let mut cur = input.clone();
    for i in 0..model.layers().len() {
        if capture_bn_taps && model.batch_norm(i).is_some() {
            trace.taps.insert(i, cur.clone());
        }
        cur = apply_layer(model, i, &cur)?;
    }
    Ok((cur, trace))
}

/// Captures every batch-norm input, running only up to the last BN layer.
pub fn capture_taps<T: Real>(model: &ModelGraph<T>, input: &Tensor<T>) -> Result<ActivationTrace<T>> {
    check_input(model, input)?;
    if !input.is_finite() {
        return Err(Error::NonFinite { layer: None });
    }
    let mut trace = ActivationTrace::default();
    let Some(&last) = model.bn_indices().last() else {
        return Ok(trace);
    };
    let mut cur = input.clone();
    for i in 0..=last {
        if model.batch_norm(i).is_some() {
            trace.taps.insert(i, cur.clone());
        }
        if i < last {
            cur = apply_layer(model, i, &cur)?;
        }
    }
    Ok(trace)
}

/// Loss value and its exact gradient with respect to `input`.
pub fn grad_input<T: Real, O: Objective<T> + ?Sized>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    objective: &O,
) -> Result<(T, Tensor<T>)> {
    let (loss, grad, _) = grad_input_with_trace(model, input, objective)?;
    Ok((loss, grad))
}

/// Like [`grad_input`], also returning the captured trace.
pub fn grad_input_with_trace<T: Real, O: Objective<T> + ?Sized>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    objective: &O,
) -> Result<(T, Tensor<T>, ActivationTrace<T>)> {
    check_input(model, input)?;
    if !input.is_finite() {
        return Err(Error::NonFinite { layer: None });
    }
    let n_layers = model.layers().len();
    let uses_output = objective.uses_output();
    let stop = if uses_output {
        n_layers
    } else {
        match model.bn_indices().last() {
            Some(&last) => last,
            None => 0,
        }
    };
    let (inputs, last) = run_cached(model, input, stop)?;
    let mut trace = ActivationTrace::default();
    for &b in model.bn_indices() {
        if b < stop {
            trace.taps.insert(b, inputs[b].clone());
        } else if b == stop {
            trace.taps.insert(b, last.clone());
        }
    }
    let output = if uses_output { Some(&last) } else { None };
    let og = objective.evaluate(&trace, output)?;
    if !og.loss.is_finite() {
        return Err(Error::NonFinite { layer: None });
    }

    let mut grad = match (uses_output, og.output_grad) {
        (true, Some(g)) => g,
        _ => Tensor::zeros(last.shape().to_vec()),
    };
    if grad.shape() != last.shape() {
        return Err(Error::shape(None, "output gradient shape mismatch"));
    }
    // Gradient w.r.t. the input of layer `stop` (or the output if stop == n_layers).
    if let Some(g) = og.tap_grads.get(&stop) {
        add_into(&mut grad, g)?;
    }
    for i in (0..stop).rev() {
        let x = &inputs[i];
        grad = match &model.layers()[i] {
            Layer::Conv2d(c) => ops::conv2d_backward(c, model.layer_input_shape(i), &grad),
            Layer::BatchNorm2d(bn) => ops::batchnorm_backward(bn, &grad),
            Layer::Relu => ops::relu_backward(x, &grad),
            Layer::MaxPool2d(p) => ops::maxpool_backward(p, x, &grad),
            Layer::AvgPool2d(p) => ops::avgpool_backward(p, model.layer_input_shape(i), &grad),
            Layer::Flatten => grad.reshape(x.shape().to_vec())?,
            Layer::Linear(l) => ops::linear_backward(l, &grad),
        };
        if let Some(g) = og.tap_grads.get(&i) {
            add_into(&mut grad, g)?;
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite { layer: Some(i) });
        }
    }
    Ok((og.loss, grad, trace))
}

fn add_into<T: Real>(acc: &mut Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if acc.shape() != g.shape() {
        return Err(Error::shape(None, "tap gradient shape mismatch"));
    }
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a = *a + b;
    }
    Ok(())
}
