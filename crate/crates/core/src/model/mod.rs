//! Feedforward network representation, forward pass with activation
//! recording and the analytic input gradient.

mod manifest;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Tensor, TensorError};
use crate::ops::{self, Linear, Window};

pub use manifest::{load_model, save_model, LayerEntry, Manifest};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Parse(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown layer type `{0}`")]
    UnknownLayerType(String),
    #[error("non-finite weight in layer {layer} at element {index}")]
    NonFiniteWeight { layer: usize, index: usize },
    #[error("weights blob checksum {actual:08x} does not match manifest {expected:08x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("invalid layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: String },
    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Explicit per-side zero padding in pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::NONE
    }
}

/// Layer type tag, used by rule selectors and the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Maxpool2d,
    Avgpool2d,
    Relu,
    Flatten,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Maxpool2d => "maxpool2d",
            LayerKind::Avgpool2d => "avgpool2d",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "dense" => LayerKind::Dense,
            "conv2d" => LayerKind::Conv2d,
            "maxpool2d" => LayerKind::Maxpool2d,
            "avgpool2d" => LayerKind::Avgpool2d,
            "relu" => LayerKind::Relu,
            "flatten" => LayerKind::Flatten,
            _ => return None,
        })
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::Maxpool2d | LayerKind::Avgpool2d)
    }

    /// Convolution or pooling, the layers of the convolutional stack.
    pub fn is_conv_stack(self) -> bool {
        matches!(self, LayerKind::Conv2d) || self.is_pool()
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// `weights` is `[out, in]`; inputs of any rank are read in flat order.
    Dense { weights: Tensor, bias: Tensor },
    /// `kernels` is `[outC, inC, kH, kW]`.
    Conv2d {
        kernels: Tensor,
        bias: Tensor,
        stride: (usize, usize),
        padding: Padding,
    },
    MaxPool2d {
        window: (usize, usize),
        stride: (usize, usize),
    },
    AvgPool2d {
        window: (usize, usize),
        stride: (usize, usize),
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::MaxPool2d { .. } => LayerKind::Maxpool2d,
            LayerSpec::AvgPool2d { .. } => LayerKind::Avgpool2d,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::Flatten => LayerKind::Flatten,
        }
    }

    /// Output shape for a given input shape, or a description of why the
    /// layer cannot accept it.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self {
            LayerSpec::Dense { weights, bias } => {
                if weights.rank() != 2 {
                    return Err(format!("dense weights must be rank 2, got {:?}", weights.shape()));
                }
                let (out, inp) = (weights.shape()[0], weights.shape()[1]);
                if bias.shape() != [out] {
                    return Err(format!("dense bias {:?} does not match {out} outputs", bias.shape()));
                }
                let n: usize = input.iter().product();
                if n != inp {
                    return Err(format!("dense expects {inp} inputs, got shape {input:?}"));
                }
                Ok(vec![out])
            }
            LayerSpec::Conv2d {
                kernels,
                bias,
                stride,
                padding,
            } => {
                if kernels.rank() != 4 {
                    return Err(format!("conv kernels must be rank 4, got {:?}", kernels.shape()));
                }
                let ks = kernels.shape();
                if bias.shape() != [ks[0]] {
                    return Err(format!("conv bias {:?} does not match {} filters", bias.shape(), ks[0]));
                }
                if input.len() != 3 || input[0] != ks[1] {
                    return Err(format!("conv expects ({}, H, W) input, got {input:?}", ks[1]));
                }
                let w = window_geometry(input, (ks[2], ks[3]), *stride, *padding)?;
                Ok(vec![ks[0], w.out_h(), w.out_w()])
            }
            LayerSpec::MaxPool2d { window, stride } | LayerSpec::AvgPool2d { window, stride } => {
                if input.len() != 3 {
                    return Err(format!("pooling expects (C, H, W) input, got {input:?}"));
                }
                let w = window_geometry(input, *window, *stride, Padding::NONE)?;
                Ok(vec![input[0], w.out_h(), w.out_w()])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// The layer's linear map for an input of the given shape, if it has one.
    pub(crate) fn linear(&self, input: &[usize]) -> Option<Linear> {
        match self {
            LayerSpec::Dense { weights, .. } => Some(Linear::Dense {
                inputs: weights.shape()[1],
                outputs: weights.shape()[0],
            }),
            LayerSpec::Conv2d {
                kernels,
                stride,
                padding,
                ..
            } => {
                let ks = kernels.shape();
                Some(Linear::Conv {
                    in_c: ks[1],
                    out_c: ks[0],
                    window: window_geometry(input, (ks[2], ks[3]), *stride, *padding).ok()?,
                })
            }
            LayerSpec::AvgPool2d { window, stride } => Some(Linear::Pool {
                channels: input[0],
                window: window_geometry(input, *window, *stride, Padding::NONE).ok()?,
            }),
            _ => None,
        }
    }

    /// Weight buffer of the linear map (`[1/k]` for average pooling).
    pub(crate) fn linear_weights(&self) -> Option<std::borrow::Cow<'_, [f64]>> {
        use std::borrow::Cow;
        match self {
            LayerSpec::Dense { weights, .. } => Some(Cow::Borrowed(weights.data())),
            LayerSpec::Conv2d { kernels, .. } => Some(Cow::Borrowed(kernels.data())),
            LayerSpec::AvgPool2d { window, .. } => {
                Some(Cow::Owned(vec![1.0 / (window.0 * window.1) as f64]))
            }
            _ => None,
        }
    }

    pub(crate) fn bias(&self) -> Option<&Tensor> {
        match self {
            LayerSpec::Dense { bias, .. } | LayerSpec::Conv2d { bias, .. } => Some(bias),
            _ => None,
        }
    }

    pub(crate) fn pool_window(&self, input: &[usize]) -> Option<Window> {
        match self {
            LayerSpec::MaxPool2d { window, stride } | LayerSpec::AvgPool2d { window, stride } => {
                window_geometry(input, *window, *stride, Padding::NONE).ok()
            }
            LayerSpec::Conv2d {
                kernels,
                stride,
                padding,
                ..
            } => {
                let ks = kernels.shape();
                window_geometry(input, (ks[2], ks[3]), *stride, *padding).ok()
            }
            _ => None,
        }
    }

    /// Parameters in serialisation order: weights then bias.
    pub fn parameters(&self) -> Vec<&Tensor> {
        match self {
            LayerSpec::Dense { weights, bias } => vec![weights, bias],
            LayerSpec::Conv2d { kernels, bias, .. } => vec![kernels, bias],
            _ => Vec::new(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Applies the layer to one input tensor.
    pub fn apply(&self, input: &Tensor) -> Tensor {
        let out_shape = self
            .output_shape(input.shape())
            .expect("layer applied to an input it was not validated for");
        let data = match self {
            LayerSpec::Relu => input.data().iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::Flatten => input.data().to_vec(),
            LayerSpec::MaxPool2d { .. } => {
                let window = self.pool_window(input.shape()).unwrap();
                ops::max_pool_argmax(input.data(), input.shape()[0], window)
                    .into_iter()
                    .map(|i| input.data()[i])
                    .collect()
            }
            _ => {
                let lin = self.linear(input.shape()).unwrap();
                let w = self.linear_weights().unwrap();
                lin.forward(input.data(), &w, self.bias().map(|b| b.data()))
            }
        };
        Tensor::from_parts(out_shape, data).expect("layer output matches its declared shape")
    }

    fn validate_params(&self, layer: usize) -> Result<(), ModelError> {
        let bad_extent = |what: &str, v: (usize, usize)| {
            (v.0 == 0 || v.1 == 0).then(|| ModelError::InvalidLayer {
                layer,
                reason: format!("{what} extents must be >= 1, got {v:?}"),
            })
        };
        let err = match self {
            LayerSpec::Conv2d { stride, .. } => bad_extent("stride", *stride),
            LayerSpec::MaxPool2d { window, stride } | LayerSpec::AvgPool2d { window, stride } => {
                bad_extent("window", *window).or_else(|| bad_extent("stride", *stride))
            }
            _ => None,
        };
        if let Some(e) = err {
            return Err(e);
        }
        let mut offset = 0;
        for p in self.parameters() {
            if let Some(index) = p.data().iter().position(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteWeight {
                    layer,
                    index: offset + index,
                });
            }
            offset += p.len();
        }
        Ok(())
    }
}

fn window_geometry(
    input: &[usize],
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: Padding,
) -> Result<Window, String> {
    if input.len() != 3 {
        return Err(format!("expected (C, H, W) input, got {input:?}"));
    }
    if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err("window and stride extents must be >= 1".into());
    }
    if input[1] + pad.top + pad.bottom < kernel.0 || input[2] + pad.left + pad.right < kernel.1 {
        return Err(format!("window {kernel:?} larger than padded input {input:?}"));
    }
    Ok(Window {
        in_h: input[1],
        in_w: input[2],
        k_h: kernel.0,
        k_w: kernel.1,
        stride_h: stride.0,
        stride_w: stride.1,
        pad,
    })
}

/// A validated feedforward network.
#[derive(Debug, Clone)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    class_labels: Vec<String>,
    /// Per-layer output shapes, `shapes[0]` is the input shape.
    shapes: Vec<Vec<usize>>,
    checksum: u32,
}

impl Model {
    /// Validates the shape chain and parameters. The checksum is the CRC-32
    /// of the parameters serialised in layer order.
    pub fn new(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        class_labels: Vec<String>,
    ) -> Result<Self, ModelError> {
        let mut hasher = crc32fast::Hasher::new();
        for p in layers.iter().flat_map(|l| l.parameters()) {
            for v in p.data() {
                hasher.update(&v.to_le_bytes());
            }
        }
        Self::with_checksum(input_shape, layers, class_labels, hasher.finalize())
    }

    pub(crate) fn with_checksum(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        class_labels: Vec<String>,
        checksum: u32,
    ) -> Result<Self, ModelError> {
        if input_shape.contains(&0) {
            return Err(ModelError::ShapeMismatch(format!(
                "input shape {input_shape:?} has a zero extent"
            )));
        }
        let mut shapes = vec![input_shape.to_vec()];
        for (i, layer) in layers.iter().enumerate() {
            layer.validate_params(i)?;
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|reason| ModelError::ShapeMismatch(format!("layer {i}: {reason}")))?;
            shapes.push(next);
        }
        let last = shapes.last().unwrap();
        if last.len() != 1 || last[0] != class_labels.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "final output {last:?} must be a vector of {} logits",
                class_labels.len()
            )));
        }
        Ok(Self {
            input_shape,
            layers,
            class_labels,
            shapes,
            checksum,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_labels.iter().position(|l| l == label)
    }

    /// Input shape of layer `i` (`i == layers().len()` gives the logit shape).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn checksum(&self) -> u32 {
        self.checksum
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::parameter_count).sum()
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardTrace, ModelError> {
        if input.shape() != self.input_shape {
            return Err(ModelError::ShapeMismatch(format!(
                "input {:?} does not match model input {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for layer in &self.layers {
            let next = layer.apply(activations.last().unwrap());
            activations.push(next);
        }
        Ok(ForwardTrace { activations })
    }

    /// `∂ logit[class] / ∂ input` by reverse-mode differentiation of the
    /// recorded trace. The ReLU derivative at exactly 0 is 0; max pooling
    /// routes the gradient to the same argmax the forward pass selected.
    pub fn gradient_wrt_input(
        &self,
        trace: &ForwardTrace,
        class_index: usize,
    ) -> Result<Tensor, ModelError> {
        let logits = trace.logits();
        if class_index >= logits.len() {
            return Err(ModelError::IndexOutOfRange {
                index: class_index,
                len: logits.len(),
            });
        }
        let mut grad = vec![0.0; logits.len()];
        grad[class_index] = 1.0;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = trace.input(i);
            grad = match layer {
                LayerSpec::Relu => grad
                    .iter()
                    .zip(input.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
                LayerSpec::Flatten => grad,
                LayerSpec::MaxPool2d { .. } => {
                    let window = layer.pool_window(input.shape()).unwrap();
                    let arg = ops::max_pool_argmax(input.data(), input.shape()[0], window);
                    let mut g = vec![0.0; input.len()];
                    for (j, &src) in arg.iter().enumerate() {
                        g[src] += grad[j];
                    }
                    g
                }
                _ => {
                    let lin = layer.linear(input.shape()).unwrap();
                    lin.transpose(&grad, &layer.linear_weights().unwrap())
                }
            };
        }
        Ok(Tensor::from_parts(self.input_shape.to_vec(), grad)?)
    }
}

/// Activations recorded during one forward pass.
///
/// Layer `i` reads `activations[i]` and writes `activations[i + 1]`, so the
/// output of one layer is the input of the next by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    activations: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.activations.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn output(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    pub fn logits(&self) -> &[f64] {
        self.activations.last().unwrap().data()
    }

    pub fn logit(&self, class_index: usize) -> Result<f64, ModelError> {
        let logits = self.logits();
        logits
            .get(class_index)
            .copied()
            .ok_or(ModelError::IndexOutOfRange {
                index: class_index,
                len: logits.len(),
            })
    }
}
