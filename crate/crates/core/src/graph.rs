//! Sequential network description with frozen parameters.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `(C_out, C_in, kH, kW)`.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }
}

/// Inference-mode batch normalization. Running statistics are kept as mean
/// and standard deviation (not variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_std: Vec<T>,
    pub eps: T,
}

impl<T: Real> BatchNorm2d<T> {
    /// Identity-initialized layer: gamma 1, beta 0, mean 0, std 1.
    pub fn identity(channels: usize, eps: T) -> Self {
        BatchNorm2d {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_std: vec![T::one(); channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` so that `y = scale·x + shift`.
    pub fn affine(&self) -> Vec<(T, T)> {
        (0..self.channels())
            .map(|c| {
                let sd = self.running_std[c];
                let inv = (sd * sd + self.eps).sqrt().recip();
                let scale = self.gamma[c] * inv;
                (scale, self.beta[c] - scale * self.running_mean[c])
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `(F_out, F_in)`.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    BatchNorm2d(BatchNorm2d<T>),
    Relu,
    MaxPool2d(Pool),
    AvgPool2d(Pool),
    Flatten,
    Linear(Linear<T>),
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm2d(_) => "batchnorm2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::AvgPool2d(_) => "avgpool2d",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
        }
    }

    /// Quantizable weight tensor, if the layer carries one.
    pub fn weight(&self) -> Option<&Tensor<T>> {
        match self {
            Layer::Conv2d(c) => Some(&c.weight),
            Layer::Linear(l) => Some(&l.weight),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let err = |msg: String| Err(Error::shape(Some(index), msg));
        match self {
            Layer::Conv2d(conv) => {
                let [c, h, w] = input[..] else {
                    return err(format!("conv2d expects (C,H,W), got {input:?}"));
                };
                if conv.weight.rank() != 4 {
                    return err("conv2d weight must be rank 4".into());
                }
                if c != conv.in_channels() {
                    return err(format!(
                        "conv2d expects {} input channels, got {c}",
                        conv.in_channels()
                    ));
                }
                if conv.bias.len() != conv.out_channels() {
                    return err("conv2d bias length differs from output channels".into());
                }
                if conv.stride == 0 {
                    return err("conv2d stride must be positive".into());
                }
                let (kh, kw) = conv.kernel();
                if h + 2 * conv.padding < kh || w + 2 * conv.padding < kw {
                    return err(format!("conv2d kernel {kh}x{kw} larger than padded input"));
                }
                Ok(vec![
                    conv.out_channels(),
                    (h + 2 * conv.padding - kh) / conv.stride + 1,
                    (w + 2 * conv.padding - kw) / conv.stride + 1,
                ])
            }
            Layer::BatchNorm2d(bn) => {
                let [c, _, _] = input[..] else {
                    return err(format!("batchnorm2d expects (C,H,W), got {input:?}"));
                };
                let n = bn.channels();
                if c != n
                    || bn.beta.len() != n
                    || bn.running_mean.len() != n
                    || bn.running_std.len() != n
                {
                    return err(format!("batchnorm2d parameter length mismatch for {c} channels"));
                }
                if bn.running_std.iter().any(|&s| s <= T::zero() || !s.is_finite()) {
                    return err("batchnorm2d running std must be positive".into());
                }
                if bn.eps < T::zero() {
                    return err("batchnorm2d eps must be non-negative".into());
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => {
                let [c, h, w] = input[..] else {
                    return err(format!("pooling expects (C,H,W), got {input:?}"));
                };
                if p.kernel == 0 || p.stride == 0 || h < p.kernel || w < p.kernel {
                    return err(format!("invalid pool {p:?} for input {input:?}"));
                }
                Ok(vec![c, (h - p.kernel) / p.stride + 1, (w - p.kernel) / p.stride + 1])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Linear(lin) => {
                let [f] = input[..] else {
                    return err(format!("linear expects flat features, got {input:?}"));
                };
                if lin.weight.rank() != 2 || lin.weight.shape()[1] != f {
                    return err(format!(
                        "linear weight {:?} incompatible with {f} features",
                        lin.weight.shape()
                    ));
                }
                if lin.bias.len() != lin.weight.shape()[0] {
                    return err("linear bias length differs from output features".into());
                }
                Ok(vec![lin.weight.shape()[0]])
            }
        }
    }

    fn cast<U: Real>(&self) -> Layer<U> {
        let vec = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        match self {
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                weight: c.weight.cast(),
                bias: vec(&c.bias),
                stride: c.stride,
                padding: c.padding,
            }),
            Layer::BatchNorm2d(b) => Layer::BatchNorm2d(BatchNorm2d {
                gamma: vec(&b.gamma),
                beta: vec(&b.beta),
                running_mean: vec(&b.running_mean),
                running_std: vec(&b.running_std),
                eps: U::of(b.eps.as_f64()),
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool2d(p) => Layer::MaxPool2d(*p),
            Layer::AvgPool2d(p) => Layer::AvgPool2d(*p),
            Layer::Flatten => Layer::Flatten,
            Layer::Linear(l) => Layer::Linear(Linear {
                weight: l.weight.cast(),
                bias: vec(&l.bias),
            }),
        }
    }
}

/// Validated sequential model. Immutable once built; derived graphs are
/// produced by the `with_*` constructors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
    bn_indices: Vec<usize>,
    /// Per-sample output shape of every layer.
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> ModelGraph<T> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("model has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(None, format!("invalid input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            if let Some(w) = layer.weight() {
                if !w.is_finite() {
                    return Err(Error::NonFinite { layer: Some(i) });
                }
            }
            cur = layer.output_shape(i, &cur)?;
            if cur.iter().any(|&d| d == 0) {
                return Err(Error::shape(Some(i), "layer produces an empty tensor"));
            }
            shapes.push(cur.clone());
        }
        let bn_indices = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::BatchNorm2d(_)))
            .map(|(i, _)| i)
            .collect();
        Ok(ModelGraph {
            layers,
            input_shape,
            bn_indices,
            shapes,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn bn_indices(&self) -> &[usize] {
        &self.bn_indices
    }

    /// Per-sample output shape of layer `i`.
    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Per-sample input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty model")
    }

    pub fn batch_norm(&self, i: usize) -> Option<&BatchNorm2d<T>> {
        match self.layers.get(i) {
            Some(Layer::BatchNorm2d(bn)) => Some(bn),
            _ => None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => c.weight.len() + c.bias.len(),
                Layer::Linear(l) => l.weight.len() + l.bias.len(),
                Layer::BatchNorm2d(b) => 4 * b.channels(),
                _ => 0,
            })
            .sum()
    }

    /// Copy with the running statistics of BN layer `index` replaced.
    pub fn with_bn_stats(&self, index: usize, mean: Vec<T>, std: Vec<T>) -> Result<Self> {
        let mut layers = self.layers.clone();
        match layers.get_mut(index) {
            Some(Layer::BatchNorm2d(bn)) => {
                bn.running_mean = mean;
                bn.running_std = std;
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "layer {index} is not a batch-norm layer"
                )))
            }
        }
        ModelGraph::new(self.input_shape.clone(), layers)
    }

    /// Copy with layer parameters replaced; the result is revalidated.
    pub fn with_layers(&self, layers: Vec<Layer<T>>) -> Result<Self> {
        ModelGraph::new(self.input_shape.clone(), layers)
    }

    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        ModelGraph {
            layers: self.layers.iter().map(Layer::cast).collect(),
            input_shape: self.input_shape.clone(),
            bn_indices: self.bn_indices.clone(),
            shapes: self.shapes.clone(),
        }
    }

    /// True when both graphs have the same layer kinds, hyperparameters and
    /// shapes (parameter values may differ).
    pub fn same_structure<U: Real>(&self, other: &ModelGraph<U>) -> bool {
        self.input_shape == other.input_shape
            && self.shapes == other.shapes
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.kind() == b.kind()
                    && match (a, b) {
                        (Layer::Conv2d(x), Layer::Conv2d(y)) => {
                            x.stride == y.stride
                                && x.padding == y.padding
                                && x.weight.shape() == y.weight.shape()
                        }
                        (Layer::MaxPool2d(x), Layer::MaxPool2d(y))
                        | (Layer::AvgPool2d(x), Layer::AvgPool2d(y)) => x == y,
                        _ => true,
                    }
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(cin: usize, cout: usize, k: usize, pad: usize) -> Layer<f32> {
        Layer::Conv2d(Conv2d {
            weight: Tensor::zeros(vec![cout, cin, k, k]),
            bias: vec![0.0; cout],
            stride: 1,
            padding: pad,
        })
    }

    #[test]
    fn shape_propagation_and_bn_indices() {
        let g = ModelGraph::new(
            vec![3, 8, 8],
            vec![
                conv(3, 4, 3, 1),
                Layer::BatchNorm2d(BatchNorm2d::identity(4, 1e-5)),
                Layer::Relu,
                Layer::MaxPool2d(Pool { kernel: 2, stride: 2 }),
                Layer::Flatten,
                Layer::Linear(Linear {
                    weight: Tensor::zeros(vec![5, 64]),
                    bias: vec![0.0; 5],
                }),
            ],
        )
        .unwrap();
        assert_eq!(g.bn_indices(), &[1]);
        assert_eq!(g.layer_output_shape(3), &[4, 4, 4]);
        assert_eq!(g.output_shape(), &[5]);
        assert_eq!(g.parameter_count(), 4 * 27 + 4 + 16 + 5 * 64 + 5);
    }

    #[test]
    fn mismatched_channels_name_layer() {
        let err = ModelGraph::new(vec![3, 8, 8], vec![conv(3, 4, 3, 1), conv(5, 2, 1, 0)])
            .unwrap_err();
        assert!(matches!(err, Error::Shape { layer: Some(1), .. }));
    }

    #[test]
    fn nonpositive_std_rejected() {
        let mut bn = BatchNorm2d::identity(2, 1e-5f32);
        bn.running_std[1] = 0.0;
        let err = ModelGraph::new(vec![2, 4, 4], vec![Layer::BatchNorm2d(bn)]).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: Some(0), .. }));
    }
}
