//! Declarative network specs, the two reference architectures, and
//! forward/backward orchestration.
//!
//! A [`NetworkSpec`] is plain data: an ordered layer list ending in one
//! softmax classifier. Parameters live outside the spec in a name → tensor
//! map so the same spec can run in `f32` for training and `f64` for
//! gradient verification. Layer names key everything: parameter names are
//! `<layer>.weight` / `<layer>.bias`, dropout streams are keyed on
//! `(seed, step, layer index)`, and errors cite the layer they came from.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, StoreMeta, WeightStore, OPTIM_KIND, OPTIM_STEPS};
use crate::layers::{
    conv2d, conv2d_backward, dropout, dropout_backward, linear, linear_backward, lrn,
    lrn_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, softmax, softmax_xent,
    softmax_xent_backward, ConvParams, DropoutMask, LayerError, LrnParams, PassMode,
};
use crate::optim::{
    adam_step, sgd_momentum_step, AdamConfig, AdamState, LrSchedule, OptimError,
    SgdMomentumConfig, SgdMomentumState,
};
use crate::rng::{self, domain};
use crate::tensor::{Real, Tensor, TensorError};

/// Parameter map: name → tensor, ordered by name.
pub type Params<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("layer {layer:?}: {source}")]
    Layer { layer: String, source: LayerError },
    #[error("layer {layer:?} expects a feature-map input but receives a flat vector")]
    ExpectsMap { layer: String },
    #[error("layer {layer:?} expects a flat-vector input but receives a feature map")]
    ExpectsVector { layer: String },
    #[error("network must end with exactly one softmax layer, found {found}")]
    TerminalSoftmax { found: usize },
    #[error("softmax layer {layer:?} is not the final layer")]
    EarlySoftmax { layer: String },
    #[error("classifier emits {actual} classes but the spec declares {expected}")]
    ClassCount { expected: usize, actual: usize },
    #[error("batch shape {actual:?} does not match expected {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("label count {labels} does not match batch size {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("unknown parameter {0:?} in weight store")]
    UnknownParam(String),
    #[error("parameter {name:?} has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("head must have at least 2 classes, got {0}")]
    HeadTooSmall(usize),
    #[error("no linear classifier head precedes the softmax layer")]
    MissingHead,
    #[error("stored optimizer kind {stored:?} does not match configured {configured:?}")]
    OptimizerKind {
        stored: &'static str,
        configured: &'static str,
    },
    #[error("unknown model code {0}")]
    UnknownModelCode(u64),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    },
    Relu,
    Lrn(LrnParams),
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Flatten,
    Linear {
        out_features: usize,
    },
    Dropout {
        keep_prob: f64,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
    /// Scales the schedule rate for this layer's parameters (fine-tuning
    /// hook); 1.0 everywhere by default.
    pub lr_multiplier: f64,
}

impl LayerDef {
    fn new(name: &str, kind: LayerKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            lr_multiplier: 1.0,
        }
    }
}

/// Activation shape between layers, per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeDesc {
    Map { h: usize, w: usize, c: usize },
    Flat(usize),
}

/// Identifies which builder produced a spec; stored in checkpoints so
/// downstream commands can rebuild the right topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    AlexNet30,
    LenetVariant,
}

impl ModelKind {
    pub fn code(self) -> u64 {
        match self {
            ModelKind::AlexNet30 => 0,
            ModelKind::LenetVariant => 1,
        }
    }

    pub fn from_code(code: u64) -> Result<Self, NetError> {
        match code {
            0 => Ok(ModelKind::AlexNet30),
            1 => Ok(ModelKind::LenetVariant),
            other => Err(NetError::UnknownModelCode(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::AlexNet30 => "alexnet30",
            ModelKind::LenetVariant => "lenet",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input: height, width, channels.
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub layers: Vec<LayerDef>,
}

/// One trainable tensor declared by a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub lr_multiplier: f64,
}

impl NetworkSpec {
    /// Walks the layer list, checking that shapes chain, and returns the
    /// per-layer output shapes (entry 0 is the input shape).
    pub fn feature_shapes(&self) -> Result<Vec<ShapeDesc>, NetError> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = ShapeDesc::Map {
            h: self.input_shape[0],
            w: self.input_shape[1],
            c: self.input_shape[2],
        };
        shapes.push(cur);
        let mut softmax_seen = 0usize;
        for (idx, layer) in self.layers.iter().enumerate() {
            if softmax_seen > 0 {
                return Err(NetError::EarlySoftmax {
                    layer: self.layers[idx - 1].name.clone(),
                });
            }
            cur = match (&layer.kind, cur) {
                (
                    LayerKind::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        groups,
                    },
                    ShapeDesc::Map { h, w, c },
                ) => {
                    if *groups == 0 || c % groups != 0 {
                        return Err(NetError::Layer {
                            layer: layer.name.clone(),
                            source: LayerError::InvalidParam {
                                op: "conv2d",
                                name: "groups",
                                reason: format!("{c} input channels not divisible by {groups}"),
                            },
                        });
                    }
                    let probe = ConvParams {
                        filters: Tensor::<f32>::zeros(&[
                            *out_channels,
                            kernel.0,
                            kernel.1,
                            c / groups,
                        ])
                        .map_err(|e| NetError::Layer {
                            layer: layer.name.clone(),
                            source: e.into(),
                        })?,
                        bias: Tensor::<f32>::zeros(&[*out_channels]).expect("nonzero"),
                        stride: *stride,
                        padding: *padding,
                        groups: *groups,
                    };
                    let (oh, ow) = probe.out_dims(h, w).map_err(|e| NetError::Layer {
                        layer: layer.name.clone(),
                        source: e,
                    })?;
                    ShapeDesc::Map {
                        h: oh,
                        w: ow,
                        c: *out_channels,
                    }
                }
                (LayerKind::Conv { .. }, ShapeDesc::Flat(_)) => {
                    return Err(NetError::ExpectsMap {
                        layer: layer.name.clone(),
                    })
                }
                (LayerKind::Relu, any) => any,
                (LayerKind::Dropout { .. }, any) => any,
                (LayerKind::Lrn(p), any @ ShapeDesc::Map { .. }) => {
                    p.validate().map_err(|e| NetError::Layer {
                        layer: layer.name.clone(),
                        source: e,
                    })?;
                    any
                }
                (LayerKind::Lrn(_), ShapeDesc::Flat(_)) => {
                    return Err(NetError::ExpectsMap {
                        layer: layer.name.clone(),
                    })
                }
                (LayerKind::MaxPool { kernel, stride }, ShapeDesc::Map { h, w, c }) => {
                    if h < kernel.0 || w < kernel.1 {
                        return Err(NetError::Layer {
                            layer: layer.name.clone(),
                            source: LayerError::WindowTooLarge {
                                op: "maxpool2d",
                                axis: if h < kernel.0 { "height" } else { "width" },
                                size: if h < kernel.0 { h } else { w },
                                window: "pool",
                                k: if h < kernel.0 { kernel.0 } else { kernel.1 },
                            },
                        });
                    }
                    ShapeDesc::Map {
                        h: (h - kernel.0) / stride.0 + 1,
                        w: (w - kernel.1) / stride.1 + 1,
                        c,
                    }
                }
                (LayerKind::MaxPool { .. }, ShapeDesc::Flat(_)) => {
                    return Err(NetError::ExpectsMap {
                        layer: layer.name.clone(),
                    })
                }
                (LayerKind::Flatten, ShapeDesc::Map { h, w, c }) => ShapeDesc::Flat(h * w * c),
                (LayerKind::Flatten, ShapeDesc::Flat(n)) => ShapeDesc::Flat(n),
                (LayerKind::Linear { out_features }, ShapeDesc::Flat(_)) => {
                    ShapeDesc::Flat(*out_features)
                }
                (LayerKind::Linear { .. }, ShapeDesc::Map { .. }) => {
                    return Err(NetError::ExpectsVector {
                        layer: layer.name.clone(),
                    })
                }
                (LayerKind::Softmax, ShapeDesc::Flat(n)) => {
                    softmax_seen += 1;
                    ShapeDesc::Flat(n)
                }
                (LayerKind::Softmax, ShapeDesc::Map { .. }) => {
                    return Err(NetError::ExpectsVector {
                        layer: layer.name.clone(),
                    })
                }
            };
            shapes.push(cur);
        }
        if softmax_seen != 1 || !matches!(self.layers.last().map(|l| &l.kind), Some(LayerKind::Softmax)) {
            return Err(NetError::TerminalSoftmax {
                found: softmax_seen,
            });
        }
        match cur {
            ShapeDesc::Flat(n) if n == self.class_count => Ok(shapes),
            ShapeDesc::Flat(n) => Err(NetError::ClassCount {
                expected: self.class_count,
                actual: n,
            }),
            ShapeDesc::Map { .. } => unreachable!("softmax requires a flat input"),
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.feature_shapes().map(|_| ())
    }

    /// Trainable tensors in layer order.
    pub fn param_defs(&self) -> Result<Vec<ParamDef>, NetError> {
        let shapes = self.feature_shapes()?;
        let mut defs = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match (&layer.kind, shapes[idx]) {
                (
                    LayerKind::Conv {
                        out_channels,
                        kernel,
                        groups,
                        ..
                    },
                    ShapeDesc::Map { c, .. },
                ) => {
                    let icpg = c / groups;
                    let fan_in = kernel.0 * kernel.1 * icpg;
                    defs.push(ParamDef {
                        name: format!("{}.weight", layer.name),
                        shape: vec![*out_channels, kernel.0, kernel.1, icpg],
                        fan_in,
                        lr_multiplier: layer.lr_multiplier,
                    });
                    defs.push(ParamDef {
                        name: format!("{}.bias", layer.name),
                        shape: vec![*out_channels],
                        fan_in,
                        lr_multiplier: layer.lr_multiplier,
                    });
                }
                (LayerKind::Linear { out_features }, ShapeDesc::Flat(in_features)) => {
                    defs.push(ParamDef {
                        name: format!("{}.weight", layer.name),
                        shape: vec![in_features, *out_features],
                        fan_in: in_features,
                        lr_multiplier: layer.lr_multiplier,
                    });
                    defs.push(ParamDef {
                        name: format!("{}.bias", layer.name),
                        shape: vec![*out_features],
                        fan_in: in_features,
                        lr_multiplier: layer.lr_multiplier,
                    });
                }
                _ => {}
            }
        }
        Ok(defs)
    }

    pub fn param_count(&self) -> Result<usize, NetError> {
        Ok(self
            .param_defs()?
            .iter()
            .map(|d| d.shape.iter().product::<usize>())
            .sum())
    }

    /// Name of the classifier layer (the linear layer feeding softmax).
    pub fn head_layer(&self) -> Result<&LayerDef, NetError> {
        let n = self.layers.len();
        if n >= 2 {
            let head = &self.layers[n - 2];
            if matches!(head.kind, LayerKind::Linear { .. }) {
                return Ok(head);
            }
        }
        Err(NetError::MissingHead)
    }

    /// Fan-in-scaled Gaussian weights (std = sqrt(2/fan_in)), zero
    /// biases. Each tensor draws from its own name-keyed stream, so the
    /// values do not depend on initialization order.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<Params<T>, NetError> {
        let mut params = Params::new();
        for def in self.param_defs()? {
            let tensor = if def.name.ends_with(".bias") {
                Tensor::zeros(&def.shape)?
            } else {
                let std = (2.0 / def.fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("std is finite and positive");
                let mut rng =
                    rng::stream(seed, domain::WEIGHT_INIT, &[rng::hash_str(&def.name)]);
                Tensor::from_fn(&def.shape, |_| T::of_f64(normal.sample(&mut rng)))?
            };
            params.insert(def.name, tensor);
        }
        Ok(params)
    }

    /// Checks a parameter map against the spec: every declared tensor
    /// present with the right shape, nothing extra.
    pub fn bind_params<T: Real>(&self, params: &Params<T>) -> Result<(), NetError> {
        let defs = self.param_defs()?;
        for def in &defs {
            let t = params
                .get(&def.name)
                .ok_or_else(|| NetError::MissingParam(def.name.clone()))?;
            if t.shape() != def.shape.as_slice() {
                return Err(NetError::ParamShape {
                    name: def.name.clone(),
                    expected: def.shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        if params.len() != defs.len() {
            let known: std::collections::BTreeSet<&str> =
                defs.iter().map(|d| d.name.as_str()).collect();
            let extra = params
                .keys()
                .find(|k| !known.contains(k.as_str()))
                .expect("count mismatch implies an extra name");
            return Err(NetError::UnknownParam(extra.clone()));
        }
        Ok(())
    }
}

/// Canonical eight-layer architecture over 227×227×3 covers with a
/// 30-way classifier.
pub fn build_alexnet30() -> NetworkSpec {
    use LayerKind::*;
    let pool = MaxPool {
        kernel: (3, 3),
        stride: (2, 2),
    };
    NetworkSpec {
        name: "alexnet30".into(),
        input_shape: [227, 227, 3],
        class_count: 30,
        layers: vec![
            LayerDef::new(
                "conv1",
                Conv {
                    out_channels: 96,
                    kernel: (11, 11),
                    stride: (4, 4),
                    padding: (0, 0),
                    groups: 1,
                },
            ),
            LayerDef::new("relu1", Relu),
            LayerDef::new("norm1", Lrn(LrnParams::default())),
            LayerDef::new("pool1", pool.clone()),
            LayerDef::new(
                "conv2",
                Conv {
                    out_channels: 256,
                    kernel: (5, 5),
                    stride: (1, 1),
                    padding: (2, 2),
                    groups: 2,
                },
            ),
            LayerDef::new("relu2", Relu),
            LayerDef::new("norm2", Lrn(LrnParams::default())),
            LayerDef::new("pool2", pool.clone()),
            LayerDef::new(
                "conv3",
                Conv {
                    out_channels: 384,
                    kernel: (3, 3),
                    stride: (1, 1),
                    padding: (1, 1),
                    groups: 1,
                },
            ),
            LayerDef::new("relu3", Relu),
            LayerDef::new(
                "conv4",
                Conv {
                    out_channels: 384,
                    kernel: (3, 3),
                    stride: (1, 1),
                    padding: (1, 1),
                    groups: 2,
                },
            ),
            LayerDef::new("relu4", Relu),
            LayerDef::new(
                "conv5",
                Conv {
                    out_channels: 256,
                    kernel: (3, 3),
                    stride: (1, 1),
                    padding: (1, 1),
                    groups: 2,
                },
            ),
            LayerDef::new("relu5", Relu),
            LayerDef::new("pool5", pool),
            LayerDef::new("flatten", Flatten),
            LayerDef::new("fc6", Linear { out_features: 4096 }),
            LayerDef::new("relu6", Relu),
            LayerDef::new("drop6", Dropout { keep_prob: 0.5 }),
            LayerDef::new("fc7", Linear { out_features: 4096 }),
            LayerDef::new("relu7", Relu),
            LayerDef::new("drop7", Dropout { keep_prob: 0.5 }),
            LayerDef::new("fc8", Linear { out_features: 30 }),
            LayerDef::new("softmax", Softmax),
        ],
    }
}

/// Three-conv variant over 56×56×3 covers. `literal_pool_stride` selects
/// stride-1 2×2 pooling (the text reading); the default is stride 2.
pub fn build_lenet_variant_with(literal_pool_stride: bool) -> NetworkSpec {
    use LayerKind::*;
    let stride = if literal_pool_stride { (1, 1) } else { (2, 2) };
    let pool = MaxPool {
        kernel: (2, 2),
        stride,
    };
    let conv = |out| Conv {
        out_channels: out,
        kernel: (5, 5),
        stride: (1, 1),
        padding: (0, 0),
        groups: 1,
    };
    NetworkSpec {
        name: "lenet".into(),
        input_shape: [56, 56, 3],
        class_count: 30,
        layers: vec![
            LayerDef::new("conv1", conv(32)),
            LayerDef::new("relu1", Relu),
            LayerDef::new("pool1", pool.clone()),
            LayerDef::new("conv2", conv(64)),
            LayerDef::new("relu2", Relu),
            LayerDef::new("pool2", pool.clone()),
            LayerDef::new("conv3", conv(128)),
            LayerDef::new("relu3", Relu),
            LayerDef::new("pool3", pool),
            LayerDef::new("flatten", Flatten),
            LayerDef::new("fc1", Linear { out_features: 1024 }),
            LayerDef::new("relu4", Relu),
            LayerDef::new("drop1", Dropout { keep_prob: 0.5 }),
            LayerDef::new("fc2", Linear { out_features: 30 }),
            LayerDef::new("softmax", Softmax),
        ],
    }
}

pub fn build_lenet_variant() -> NetworkSpec {
    build_lenet_variant_with(false)
}

/// Keys the dropout streams for one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepRng {
    pub seed: u64,
    pub step: u64,
}

struct Trace<T> {
    /// `outputs[0]` is the batch; `outputs[i+1]` is layer `i`'s output.
    /// The terminal softmax is excluded, so the last entry is the logits.
    outputs: Vec<Tensor<T>>,
    masks: Vec<Option<DropoutMask<T>>>,
}

fn conv_params_for<T: Real>(
    layer: &LayerDef,
    kind_stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
    params: &Params<T>,
) -> Result<ConvParams<T>, NetError> {
    let weight = params
        .get(&format!("{}.weight", layer.name))
        .ok_or_else(|| NetError::MissingParam(format!("{}.weight", layer.name)))?;
    let bias = params
        .get(&format!("{}.bias", layer.name))
        .ok_or_else(|| NetError::MissingParam(format!("{}.bias", layer.name)))?;
    Ok(ConvParams {
        filters: weight.clone(),
        bias: bias.clone(),
        stride: kind_stride,
        padding,
        groups,
    })
}

fn layer_err(layer: &LayerDef) -> impl Fn(LayerError) -> NetError + '_ {
    move |source| NetError::Layer {
        layer: layer.name.clone(),
        source,
    }
}

fn forward_trace<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    batch: &Tensor<T>,
    mode: PassMode,
    srng: StepRng,
) -> Result<Trace<T>, NetError> {
    spec.bind_params(params)?;
    let expected = [
        batch.shape().first().copied().unwrap_or(0),
        spec.input_shape[0],
        spec.input_shape[1],
        spec.input_shape[2],
    ];
    if batch.rank() != 4 || batch.shape() != expected {
        return Err(NetError::InputShape {
            expected: expected.to_vec(),
            actual: batch.shape().to_vec(),
        });
    }
    let batch_size = batch.shape()[0];
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(spec.layers.len());
    let mut masks: Vec<Option<DropoutMask<T>>> = Vec::with_capacity(spec.layers.len());
    outputs.push(batch.clone());
    for (idx, layer) in spec.layers.iter().enumerate() {
        let x = outputs.last().expect("outputs is never empty");
        let mut mask = None;
        let y = match &layer.kind {
            LayerKind::Conv {
                stride,
                padding,
                groups,
                ..
            } => {
                let p = conv_params_for(layer, *stride, *padding, *groups, params)?;
                conv2d(x, &p).map_err(layer_err(layer))?
            }
            LayerKind::Relu => relu(x),
            LayerKind::Lrn(p) => lrn(x, p).map_err(layer_err(layer))?,
            LayerKind::MaxPool { kernel, stride } => {
                maxpool2d(x, *kernel, *stride).map_err(layer_err(layer))?
            }
            LayerKind::Flatten => {
                let features = x.len() / batch_size;
                x.clone()
                    .reshape(&[batch_size, features])
                    .map_err(|e| layer_err(layer)(e.into()))?
            }
            LayerKind::Linear { .. } => {
                let w = params
                    .get(&format!("{}.weight", layer.name))
                    .ok_or_else(|| NetError::MissingParam(format!("{}.weight", layer.name)))?;
                let b = params
                    .get(&format!("{}.bias", layer.name))
                    .ok_or_else(|| NetError::MissingParam(format!("{}.bias", layer.name)))?;
                linear(x, w, b).map_err(layer_err(layer))?
            }
            LayerKind::Dropout { keep_prob } => {
                let mut stream =
                    rng::stream(srng.seed, domain::DROPOUT, &[srng.step, idx as u64]);
                let (y, m) =
                    dropout(x, *keep_prob, mode, &mut stream).map_err(layer_err(layer))?;
                mask = Some(m);
                y
            }
            LayerKind::Softmax => break,
        };
        outputs.push(y);
        masks.push(mask);
    }
    Ok(Trace { outputs, masks })
}

/// Class probabilities for a batch. Infer mode is a pure function of
/// (spec, params, batch).
pub fn forward<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    batch: &Tensor<T>,
    mode: PassMode,
    srng: StepRng,
) -> Result<Tensor<T>, NetError> {
    let trace = forward_trace(spec, params, batch, mode, srng)?;
    let logits = trace.outputs.last().expect("trace has logits");
    softmax(logits).map_err(|source| NetError::Layer {
        layer: "softmax".into(),
        source,
    })
}

/// Mean cross-entropy of the batch under the current parameters.
pub fn batch_loss<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    mode: PassMode,
    srng: StepRng,
) -> Result<T, NetError> {
    let trace = forward_trace(spec, params, batch, mode, srng)?;
    let logits = trace.outputs.last().expect("trace has logits");
    let (_, loss) = softmax_xent(logits, labels).map_err(|source| NetError::Layer {
        layer: "softmax".into(),
        source,
    })?;
    Ok(loss)
}

/// Activations entering the classifier head, in infer mode. Used to
/// verify that head replacement leaves the trunk untouched.
pub fn penultimate_activations<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>, NetError> {
    let head = spec.head_layer()?.name.clone();
    let trace = forward_trace(
        spec,
        params,
        batch,
        PassMode::Infer,
        StepRng { seed: 0, step: 0 },
    )?;
    let head_idx = spec
        .layers
        .iter()
        .position(|l| l.name == head)
        .expect("head layer exists");
    Ok(trace.outputs[head_idx].clone())
}

/// Gradients of the mean batch loss with respect to every parameter.
/// Returns `(loss, grads)`.
pub fn loss_and_grads<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    srng: StepRng,
) -> Result<(T, Params<T>), NetError> {
    let batch_size = batch.shape().first().copied().unwrap_or(0);
    if labels.len() != batch_size {
        return Err(NetError::LabelCount {
            labels: labels.len(),
            batch: batch_size,
        });
    }
    let trace = forward_trace(spec, params, batch, PassMode::Train, srng)?;
    let logits = trace.outputs.last().expect("trace has logits");
    let (probs, loss) = softmax_xent(logits, labels).map_err(|source| NetError::Layer {
        layer: "softmax".into(),
        source,
    })?;
    let mut grad = softmax_xent_backward(&probs, labels).map_err(|source| NetError::Layer {
        layer: "softmax".into(),
        source,
    })?;

    let mut grads = Params::new();
    // Walk non-softmax layers in reverse; trace.outputs[i] is layer i's
    // input.
    for idx in (0..spec.layers.len() - 1).rev() {
        let layer = &spec.layers[idx];
        let x = &trace.outputs[idx];
        grad = match &layer.kind {
            LayerKind::Conv {
                stride,
                padding,
                groups,
                ..
            } => {
                let p = conv_params_for(layer, *stride, *padding, *groups, params)?;
                let g = conv2d_backward(x, &p, &grad).map_err(layer_err(layer))?;
                grads.insert(format!("{}.weight", layer.name), g.filters);
                grads.insert(format!("{}.bias", layer.name), g.bias);
                g.input
            }
            LayerKind::Relu => relu_backward(x, &grad).map_err(layer_err(layer))?,
            LayerKind::Lrn(p) => lrn_backward(x, p, &grad).map_err(layer_err(layer))?,
            LayerKind::MaxPool { kernel, stride } => {
                maxpool2d_backward(x, *kernel, *stride, &grad).map_err(layer_err(layer))?
            }
            LayerKind::Flatten => grad
                .reshape(x.shape())
                .map_err(|e| layer_err(layer)(e.into()))?,
            LayerKind::Linear { .. } => {
                let w = params
                    .get(&format!("{}.weight", layer.name))
                    .ok_or_else(|| NetError::MissingParam(format!("{}.weight", layer.name)))?;
                let b = params
                    .get(&format!("{}.bias", layer.name))
                    .ok_or_else(|| NetError::MissingParam(format!("{}.bias", layer.name)))?;
                let g = linear_backward(x, w, b, &grad).map_err(layer_err(layer))?;
                grads.insert(format!("{}.weight", layer.name), g.weights);
                grads.insert(format!("{}.bias", layer.name), g.bias);
                g.input
            }
            LayerKind::Dropout { .. } => {
                let mask = trace.masks[idx].as_ref().expect("dropout recorded a mask");
                dropout_backward(&grad, mask).map_err(layer_err(layer))?
            }
            LayerKind::Softmax => unreachable!("terminal softmax is excluded"),
        };
    }
    Ok((loss, grads))
}

/// Update method plus its constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    SgdMomentum(SgdMomentumConfig),
    Adam(AdamConfig),
}

impl Method {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Method::SgdMomentum(_) => "sgd_momentum",
            Method::Adam(_) => "adam",
        }
    }

    fn kind_code(&self) -> u64 {
        match self {
            Method::SgdMomentum(_) => 0,
            Method::Adam(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Slot<T> {
    Sgd(SgdMomentumState<T>),
    Adam(AdamState<T>),
}

/// Optimizer state for every parameter of one network, plus the schedule
/// and the global step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T = f32> {
    pub method: Method,
    pub schedule: LrSchedule,
    pub steps_done: u64,
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(method: Method, schedule: LrSchedule, params: &Params<T>) -> Self {
        let slots = params
            .iter()
            .map(|(name, tensor)| {
                let slot = match method {
                    Method::SgdMomentum(_) => Slot::Sgd(SgdMomentumState::zeros_like(tensor)),
                    Method::Adam(_) => Slot::Adam(AdamState::zeros_like(tensor)),
                };
                (name.clone(), slot)
            })
            .collect();
        Self {
            method,
            schedule,
            steps_done: 0,
            slots,
        }
    }

    /// Embeds the optimizer state into a store under reserved names.
    pub fn save_into(&self, store: &mut WeightStore)
    where
        T: Real,
    {
        store.insert_u64(OPTIM_KIND, vec![self.method.kind_code()]);
        store.insert_u64(OPTIM_STEPS, vec![self.steps_done]);
        for (name, slot) in &self.slots {
            match slot {
                Slot::Sgd(s) => {
                    store.insert(format!("__optim.{name}.v"), s.velocity.cast());
                }
                Slot::Adam(s) => {
                    store.insert(format!("__optim.{name}.m"), s.m.cast());
                    store.insert(format!("__optim.{name}.u"), s.u.cast());
                }
            }
        }
    }

    /// Rebuilds optimizer state from a store written by [`Self::save_into`].
    /// The method and schedule come from the run configuration; the store
    /// must agree on the method kind.
    pub fn load_from(
        store: &WeightStore,
        method: Method,
        schedule: LrSchedule,
        params: &Params<T>,
    ) -> Result<Self, NetError> {
        let stored_kind = store
            .u64s(OPTIM_KIND)
            .and_then(|v| v.first().copied())
            .ok_or(CheckpointError::BadMetadata(OPTIM_KIND))?;
        if stored_kind != method.kind_code() {
            return Err(NetError::OptimizerKind {
                stored: if stored_kind == 0 { "sgd_momentum" } else { "adam" },
                configured: method.kind_name(),
            });
        }
        let steps_done = store
            .u64s(OPTIM_STEPS)
            .and_then(|v| v.first().copied())
            .ok_or(CheckpointError::BadMetadata(OPTIM_STEPS))?;
        let mut opt = Self::new(method, schedule, params);
        opt.steps_done = steps_done;
        for (name, slot) in opt.slots.iter_mut() {
            match slot {
                Slot::Sgd(s) => {
                    let v = store
                        .tensor(&format!("__optim.{name}.v"))
                        .ok_or_else(|| NetError::MissingParam(format!("__optim.{name}.v")))?;
                    expect_shape(name, s.velocity.shape(), v.shape())?;
                    s.velocity = v.cast();
                    s.iteration = steps_done;
                }
                Slot::Adam(s) => {
                    let m = store
                        .tensor(&format!("__optim.{name}.m"))
                        .ok_or_else(|| NetError::MissingParam(format!("__optim.{name}.m")))?;
                    let u = store
                        .tensor(&format!("__optim.{name}.u"))
                        .ok_or_else(|| NetError::MissingParam(format!("__optim.{name}.u")))?;
                    expect_shape(name, s.m.shape(), m.shape())?;
                    expect_shape(name, s.u.shape(), u.shape())?;
                    s.m = m.cast();
                    s.u = u.cast();
                }
            }
        }
        Ok(opt)
    }
}

fn expect_shape(name: &str, expected: &[usize], actual: &[usize]) -> Result<(), NetError> {
    if expected != actual {
        return Err(NetError::ParamShape {
            name: name.to_string(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

/// One optimizer step: forward, backward, update. The step index (used
/// for the schedule and the dropout streams) is the optimizer's completed
/// step count; it increments on success. Returns the mean batch loss.
///
/// A schedule rate of exactly 0 freezes the parameters (no update is
/// applied), so a zero-rate run measures pure forward loss.
pub fn train_step<T: Real>(
    spec: &NetworkSpec,
    params: &mut Params<T>,
    opt: &mut Optimizer<T>,
    seed: u64,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<T, NetError> {
    let step = opt.steps_done;
    let (loss, grads) = loss_and_grads(
        spec,
        params,
        batch,
        labels,
        StepRng { seed, step },
    )?;
    let base_lr = opt.schedule.lr_at(step);
    if base_lr != 0.0 {
        let multipliers: BTreeMap<String, f64> = spec
            .param_defs()?
            .into_iter()
            .map(|d| (d.name, d.lr_multiplier))
            .collect();
        for (name, grad) in &grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| NetError::MissingParam(name.clone()))?;
            let slot = opt
                .slots
                .get_mut(name)
                .ok_or_else(|| NetError::MissingParam(format!("optimizer slot {name}")))?;
            let lr = base_lr * multipliers.get(name).copied().unwrap_or(1.0);
            match (&opt.method, slot) {
                (Method::SgdMomentum(cfg), Slot::Sgd(state)) => {
                    sgd_momentum_step(param, grad, state, cfg, lr)?;
                }
                (Method::Adam(cfg), Slot::Adam(state)) => {
                    adam_step(param, grad, state, cfg, step + 1, lr)?;
                }
                _ => unreachable!("slot kind always matches method"),
            }
        }
    }
    opt.steps_done += 1;
    Ok(loss)
}

/// Replaces the classifier with a freshly initialized `class_count`-way
/// head, carrying every other tensor over unchanged. Optimizer state and
/// the iteration counter are dropped (a new run starts); other metadata
/// is preserved.
pub fn replace_head(
    spec: &NetworkSpec,
    store: &WeightStore,
    class_count: usize,
    seed: u64,
) -> Result<(NetworkSpec, WeightStore), NetError> {
    if class_count < 2 {
        return Err(NetError::HeadTooSmall(class_count));
    }
    let head = spec.head_layer()?.name.clone();

    let mut new_spec = spec.clone();
    new_spec.class_count = class_count;
    for layer in new_spec.layers.iter_mut() {
        if layer.name == head {
            layer.kind = LayerKind::Linear {
                out_features: class_count,
            };
        }
    }
    let defs = new_spec.param_defs()?;

    let head_weight = format!("{head}.weight");
    let head_bias = format!("{head}.bias");
    let mut new_store = WeightStore::new();
    for def in &defs {
        if def.name == head_weight || def.name == head_bias {
            continue;
        }
        let t = store
            .tensor(&def.name)
            .ok_or_else(|| NetError::MissingParam(def.name.clone()))?;
        if t.shape() != def.shape.as_slice() {
            return Err(NetError::ParamShape {
                name: def.name.clone(),
                expected: def.shape.clone(),
                actual: t.shape().to_vec(),
            });
        }
        new_store.insert(def.name.clone(), t.clone());
    }
    // Fresh head, same scheme and stream keying as init_params.
    let head_def = defs
        .iter()
        .find(|d| d.name == head_weight)
        .expect("head weight is declared");
    let std = (2.0 / head_def.fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let mut stream = rng::stream(seed, domain::WEIGHT_INIT, &[rng::hash_str(&head_weight)]);
    new_store.insert(
        head_weight.clone(),
        Tensor::from_fn(&head_def.shape, |_| normal.sample(&mut stream) as f32)?,
    );
    new_store.insert(
        head_bias.clone(),
        Tensor::zeros(&[class_count])?,
    );

    // Carry metadata, reset the run counters, update the class count.
    if let Ok(meta) = store.meta() {
        new_store.set_meta(&StoreMeta {
            iteration: 0,
            schedule_pos: 0,
            class_count: class_count as u64,
            ..meta
        });
    }
    if let Some(mean) = store.channel_mean() {
        new_store.set_channel_mean(mean);
    }
    Ok((new_spec, new_store))
}

/// Copies spec parameters out of a store into a typed parameter map.
pub fn params_from_store<T: Real>(
    spec: &NetworkSpec,
    store: &WeightStore,
) -> Result<Params<T>, NetError> {
    let mut params = Params::new();
    for def in spec.param_defs()? {
        let t = store
            .tensor(&def.name)
            .ok_or_else(|| NetError::MissingParam(def.name.clone()))?;
        if t.shape() != def.shape.as_slice() {
            return Err(NetError::ParamShape {
                name: def.name,
                expected: def.shape.clone(),
                actual: t.shape().to_vec(),
            });
        }
        params.insert(def.name, t.cast());
    }
    Ok(params)
}

/// Copies a parameter map into a store (replacing same-named entries).
pub fn params_into_store(params: &Params<f32>, store: &mut WeightStore) {
    for (name, tensor) in params {
        store.insert(name.clone(), tensor.clone());
    }
}
