//! Declarative layer stacks, shape inference, learned parameters, and the
//! whole-network forward and backward passes.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, Mode, PoolGeometry};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    StochasticPool {
        window: usize,
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Dropout {
        p: f64,
    },
    FullConnect {
        in_units: usize,
        out_units: usize,
    },
    Softmax {
        classes: usize,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::StochasticPool { .. } => "stochastic_pool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::FullConnect { .. } => "full_connect",
            LayerSpec::Softmax { .. } => "softmax",
        }
    }

    /// Weight and bias shapes for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel_h, kernel_w],
                vec![out_channels],
            )),
            LayerSpec::FullConnect {
                in_units,
                out_units,
            } => Some((vec![out_units, in_units], vec![out_units])),
            _ => None,
        }
    }

    fn validate(&self, layer: usize) -> Result<()> {
        let bad = |msg: &str| {
            Err(Error::Spec {
                layer,
                msg: msg.to_string(),
            })
        };
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
                    return bad("conv extents and channel counts must be >= 1");
                }
                if stride == 0 {
                    return bad("stride must be >= 1");
                }
            }
            LayerSpec::MaxPool { window, stride, pad }
            | LayerSpec::StochasticPool { window, stride, pad } => {
                if window == 0 || stride == 0 {
                    return bad("pool window and stride must be >= 1");
                }
                if pad >= window {
                    return bad("pool padding must be smaller than the window");
                }
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return bad("dropout probability must lie in [0, 1)");
                }
            }
            LayerSpec::FullConnect {
                in_units,
                out_units,
            } => {
                if in_units == 0 || out_units == 0 {
                    return bad("unit counts must be >= 1");
                }
            }
            LayerSpec::Softmax { classes } => {
                if classes == 0 {
                    return bad("softmax needs at least one class");
                }
            }
            LayerSpec::Relu => {}
        }
        Ok(())
    }
}

/// Activation shape of one item (the batch axis is implicit).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn units(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(u) => u,
        }
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActShape::Spatial { c, h, w } => write!(f, "{h} x {w} x {c}"),
            ActShape::Flat(u) => write!(f, "{u}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default)]
    pub name: String,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NetworkSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("network spec: {e}")))?;
        spec.infer_shapes()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }

    pub fn input_act(&self) -> ActShape {
        let [c, h, w] = self.input_shape;
        ActShape::Spatial { c, h, w }
    }

    /// Output shape of every layer, in order.
    pub fn infer_shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Spec {
                layer: 0,
                msg: "input extents must be >= 1".into(),
            });
        }
        let mut cur = self.input_act();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(i)?;
            let err = |msg: String| Error::Spec { layer: i, msg };
            cur = match (*layer, cur) {
                (
                    LayerSpec::Conv {
                        in_channels,
                        out_channels,
                        kernel_h,
                        kernel_w,
                        stride,
                        pad,
                    },
                    ActShape::Spatial { c, h, w },
                ) => {
                    if c != in_channels {
                        return Err(err(format!("conv expects {in_channels} channels, input has {c}")));
                    }
                    let ho = layers::out_extent(h, kernel_h, stride, pad);
                    let wo = layers::out_extent(w, kernel_w, stride, pad);
                    match (ho, wo) {
                        (Some(ho), Some(wo)) => ActShape::Spatial {
                            c: out_channels,
                            h: ho,
                            w: wo,
                        },
                        _ => return Err(err(format!("kernel {kernel_h}x{kernel_w} leaves no output on {h}x{w}"))),
                    }
                }
                (
                    LayerSpec::MaxPool { window, stride, pad }
                    | LayerSpec::StochasticPool { window, stride, pad },
                    ActShape::Spatial { c, h, w },
                ) => match (
                    layers::out_extent(h, window, stride, pad),
                    layers::out_extent(w, window, stride, pad),
                ) {
                    (Some(ho), Some(wo)) => ActShape::Spatial { c, h: ho, w: wo },
                    _ => return Err(err(format!("pool window {window} leaves no output on {h}x{w}"))),
                },
                (LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. } | LayerSpec::StochasticPool { .. }, ActShape::Flat(_)) => {
                    return Err(err(format!("{} needs a spatial input", layer.kind())))
                }
                (LayerSpec::Relu | LayerSpec::Dropout { .. }, s) => s,
                (LayerSpec::FullConnect { in_units, out_units }, s) => {
                    if s.units() != in_units {
                        return Err(err(format!(
                            "full_connect declares {in_units} inputs, previous layer yields {} ({s})",
                            s.units()
                        )));
                    }
                    ActShape::Flat(out_units)
                }
                (LayerSpec::Softmax { classes }, s) => {
                    if s.units() != classes {
                        return Err(err(format!("softmax over {classes} classes fed {} units", s.units())));
                    }
                    if i + 1 != self.layers.len() {
                        return Err(err("softmax must be the final layer".into()));
                    }
                    ActShape::Flat(classes)
                }
            };
            out.push(cur);
        }
        match self.layers.last() {
            Some(&LayerSpec::Softmax { classes }) if classes == self.class_count => Ok(out),
            Some(&LayerSpec::Softmax { classes }) => Err(Error::Spec {
                layer: self.layers.len() - 1,
                msg: format!("softmax width {classes} differs from class_count {}", self.class_count),
            }),
            _ => Err(Error::Spec {
                layer: self.layers.len().saturating_sub(1),
                msg: "final layer must be softmax".into(),
            }),
        }
    }

    /// Indices (into `layers`) of conv and fully-connected layers.
    pub fn param_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.param_shapes().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(LayerSpec::param_shapes)
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }

    /// Copy of the spec with a different softmax width (and matching head).
    pub fn with_class_count(&self, classes: usize) -> Result<Self> {
        let mut spec = self.clone();
        spec.class_count = classes;
        let n = spec.layers.len();
        if let Some(LayerSpec::Softmax { classes: c }) = spec.layers.last_mut() {
            *c = classes;
        }
        if let Some(LayerSpec::FullConnect { out_units, .. }) =
            spec.layers[..n.saturating_sub(1)].iter_mut().rev().find(|l| l.param_shapes().is_some())
        {
            *out_units = classes;
        }
        spec.infer_shapes()?;
        Ok(spec)
    }
}

/// Reconciled layer stacks shipped with the crate.
pub mod builtin {
    use super::NetworkSpec;

    pub const TABLE1_ROOT: &str = include_str!("../specs/table1_root.toml");
    pub const TABLE2_LEAF_MAXPOOL: &str = include_str!("../specs/table2_leaf_maxpool.toml");
    pub const TABLE3_LEAF_STOCHASTIC: &str = include_str!("../specs/table3_leaf_stochastic.toml");
    pub const TOY: &str = include_str!("../specs/toy.toml");
    pub const DESK: &str = include_str!("../specs/desk.toml");

    pub const NAMES: [&str; 5] = ["table1_root", "table2_leaf_maxpool", "table3_leaf_stochastic", "toy", "desk"];

    pub fn named(name: &str) -> Option<NetworkSpec> {
        let text = match name {
            "table1_root" => TABLE1_ROOT,
            "table2_leaf_maxpool" => TABLE2_LEAF_MAXPOOL,
            "table3_leaf_stochastic" => TABLE3_LEAF_STOCHASTIC,
            "toy" => TOY,
            "desk" => DESK,
            _ => return None,
        };
        Some(NetworkSpec::from_toml(text).expect("builtin spec is valid"))
    }
}

/// Learned parameters of one conv or fully-connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    /// Index of the owning layer in `NetworkSpec::layers`.
    pub layer: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Real = f32> {
    pub spec: NetworkSpec,
    pub params: Vec<Param<T>>,
}

impl<T: Real> ModelState<T> {
    /// Weights uniform in ±sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.infer_shapes()?;
        let params = spec
            .param_layers()
            .into_iter()
            .map(|i| init_param(&spec.layers[i], i, rng))
            .collect();
        Ok(ModelState {
            spec: spec.clone(),
            params,
        })
    }

    /// Wraps externally supplied parameters after checking their shapes.
    pub fn from_params(spec: NetworkSpec, params: Vec<Param<T>>) -> Result<Self> {
        spec.infer_shapes()?;
        let layers = spec.param_layers();
        if layers.len() != params.len() {
            return Err(Error::shape(format!(
                "spec has {} parameterized layers, got {}",
                layers.len(),
                params.len()
            )));
        }
        for (&li, p) in layers.iter().zip(&params) {
            let (ws, bs) = spec.layers[li].param_shapes().expect("param layer");
            if p.layer != li {
                return Err(Error::shape(format!("param for layer {} supplied at layer {li}", p.layer)));
            }
            p.weight.expect_shape(&ws)?;
            p.bias.expect_shape(&bs)?;
        }
        Ok(ModelState { spec, params })
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn param_for_layer(&self, layer: usize) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.layer == layer)
    }

    pub fn param_for_layer_mut(&mut self, layer: usize) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.layer == layer)
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    layer: p.layer,
                    weight: p.weight.cast(),
                    bias: p.bias.cast(),
                })
                .collect(),
        }
    }

    /// Inference-mode class probabilities for a batch `(N, C, H, W)` or a
    /// single image `(C, H, W)`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = if images.shape().len() == 3 {
            let mut s = vec![1];
            s.extend_from_slice(images.shape());
            images.clone().reshape(&s)?
        } else {
            images.clone()
        };
        // Inference never draws from the rng.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(network_forward(self, &batch, Mode::Infer, &mut rng)?.probabilities)
    }
}

pub(crate) fn init_param<T: Real, R: Rng + ?Sized>(layer: &LayerSpec, index: usize, rng: &mut R) -> Param<T> {
    let (ws, bs) = layer.param_shapes().expect("parameterized layer");
    let (fan_in, fan_out) = match *layer {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => (in_channels * kernel_h * kernel_w, out_channels * kernel_h * kernel_w),
        LayerSpec::FullConnect {
            in_units,
            out_units,
        } => (in_units, out_units),
        _ => unreachable!(),
    };
    let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Param {
        layer: index,
        weight: Tensor::uniform(&ws, scale, rng),
        bias: Tensor::zeros(&bs),
    }
}

/// Per-layer bookkeeping needed by the backward pass.
#[derive(Clone, Debug)]
pub enum LayerAux<T: Real> {
    None,
    /// Flat input index chosen per output element (max or sampled stochastic pool).
    Indices(Vec<usize>),
    Mask(Vec<T>),
    /// Stochastic pool evaluated in inference mode.
    Averaged,
    /// Dropout in inference mode.
    Scaled,
}

pub struct ForwardPass<T: Real> {
    /// Input of every layer; `inputs[0]` is the batch.
    pub inputs: Vec<Tensor<T>>,
    pub aux: Vec<LayerAux<T>>,
    /// Input of the softmax layer.
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

pub fn network_forward<T: Real, R: Rng + ?Sized>(
    model: &ModelState<T>,
    batch: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardPass<T>> {
    let [c, h, w] = model.spec.input_shape;
    match *batch.shape() {
        [_, bc, bh, bw] if (bc, bh, bw) == (c, h, w) => {}
        ref s => {
            return Err(Error::shape(format!(
                "batch {s:?} does not match input shape {h} x {w} x {c}"
            )))
        }
    }
    let n = batch.batch();
    let mut inputs = Vec::with_capacity(model.spec.layers.len());
    let mut aux = Vec::with_capacity(model.spec.layers.len());
    let mut cur = batch.clone();
    let mut probabilities = None;
    let mut params = model.params.iter();
    for (i, layer) in model.spec.layers.iter().enumerate() {
        let (next, a) = match *layer {
            LayerSpec::Conv { stride, pad, .. } => {
                let p = params.next().expect("param per conv layer");
                (layers::conv_forward(&cur, &p.weight, &p.bias, stride, pad)?, LayerAux::None)
            }
            LayerSpec::Relu => (layers::relu_forward(&cur), LayerAux::None),
            LayerSpec::MaxPool { window, stride, pad } => {
                let (y, idx) = layers::maxpool_forward(&cur, PoolGeometry { window, stride, pad })?;
                (y, LayerAux::Indices(idx))
            }
            LayerSpec::StochasticPool { window, stride, pad } => {
                let (y, idx) =
                    layers::stochpool_forward(&cur, PoolGeometry { window, stride, pad }, rng, mode)?;
                let a = match mode {
                    Mode::Train => LayerAux::Indices(idx),
                    Mode::Infer => LayerAux::Averaged,
                };
                (y, a)
            }
            LayerSpec::Dropout { p } => {
                let (y, mask) = layers::dropout_forward(&cur, p, rng, mode);
                let a = match mode {
                    Mode::Train => LayerAux::Mask(mask),
                    Mode::Infer => LayerAux::Scaled,
                };
                (y, a)
            }
            LayerSpec::FullConnect { .. } => {
                let p = params.next().expect("param per fc layer");
                (layers::fc_forward(&cur, &p.weight, &p.bias)?, LayerAux::None)
            }
            LayerSpec::Softmax { classes } => {
                let logits = cur.clone().reshape(&[n, classes])?;
                let probs = layers::softmax(&logits);
                probabilities = Some(probs.clone());
                (logits, LayerAux::None)
            }
        };
        if cfg!(debug_assertions) && !next.all_finite() {
            return Err(Error::NonFinite(format!("output of layer {i} ({})", layer.kind())));
        }
        inputs.push(std::mem::replace(&mut cur, next));
        aux.push(a);
    }
    Ok(ForwardPass {
        inputs,
        aux,
        logits: cur,
        probabilities: probabilities.expect("spec ends with softmax"),
    })
}

pub struct Gradients<T: Real> {
    pub loss: T,
    /// Same order and shapes as `ModelState::params`.
    pub params: Vec<Param<T>>,
    pub input: Tensor<T>,
}

/// Mean cross-entropy of `labels` under the pass and its exact gradients.
pub fn network_backward<T: Real>(
    model: &ModelState<T>,
    pass: &ForwardPass<T>,
    labels: &[usize],
) -> Result<Gradients<T>> {
    let xent = layers::softmax_xent(&pass.logits, labels)?;
    let mut grad = xent.grad_logits;
    let mut grads: Vec<Param<T>> = Vec::with_capacity(model.params.len());
    let mut params = model.params.iter().rev();
    for (i, layer) in model.spec.layers.iter().enumerate().rev() {
        let x = &pass.inputs[i];
        grad = match (layer, &pass.aux[i]) {
            (LayerSpec::Softmax { .. }, _) => grad.reshape(x.shape())?,
            (LayerSpec::Conv { stride, pad, .. }, _) => {
                let p = params.next().expect("param per conv layer");
                let g = layers::conv_backward(x, &p.weight, &grad, *stride, *pad)?;
                grads.push(Param {
                    layer: i,
                    weight: g.grad_filters,
                    bias: g.grad_bias,
                });
                g.grad_x
            }
            (LayerSpec::FullConnect { .. }, _) => {
                let p = params.next().expect("param per fc layer");
                let g = layers::fc_backward(x, &p.weight, &grad)?;
                grads.push(Param {
                    layer: i,
                    weight: g.grad_weight,
                    bias: g.grad_bias,
                });
                g.grad_x
            }
            (LayerSpec::Relu, _) => layers::relu_backward(x, &grad)?,
            (LayerSpec::MaxPool { .. } | LayerSpec::StochasticPool { .. }, LayerAux::Indices(idx)) => {
                layers::maxpool_backward(x.shape(), idx, &grad)?
            }
            (LayerSpec::StochasticPool { window, stride, pad }, LayerAux::Averaged) => {
                let g = PoolGeometry {
                    window: *window,
                    stride: *stride,
                    pad: *pad,
                };
                layers::stochpool_infer_backward(x, g, &grad)?
            }
            (LayerSpec::Dropout { .. }, LayerAux::Mask(mask)) => layers::dropout_backward(mask, &grad)?,
            (LayerSpec::Dropout { p }, LayerAux::Scaled) => {
                let mut g = grad;
                g.scale(T::of(1.0 - p));
                g
            }
            (l, a) => {
                return Err(Error::Spec {
                    layer: i,
                    msg: format!("no backward for {} with {a:?}", l.kind()),
                })
            }
        };
    }
    grads.reverse();
    Ok(Gradients {
        loss: xent.loss,
        params: grads,
        input: grad,
    })
}

/// Stride and padding that take `input` to `output` under `kernel`: the
/// smallest stride admitting a padding below the kernel size, then the
/// smallest such padding.
pub fn reconcile_stride_pad(input: usize, output: usize, kernel: usize) -> Option<(usize, usize)> {
    for stride in 1..=input.max(1) {
        for pad in 0..kernel {
            if layers::out_extent(input, kernel, stride, pad) == Some(output) {
                return Some((stride, pad));
            }
        }
    }
    None
}

/// One row of a published layer table: declared input extent and kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableRow {
    /// Input (h, w, c) and kernel (kh, kw, c).
    Conv { input: (usize, usize, usize), kernel: (usize, usize, usize) },
    MaxPool { input: (usize, usize, usize), window: usize },
    StochasticPool { input: (usize, usize, usize), window: usize },
    FullConnect { inputs: usize, outputs: usize },
    Softmax { classes: usize },
}

/// Turns a layer table into an explicit spec.
///
/// Output channels of a conv are the channel count declared by the next row;
/// a conv feeding a fully-connected row takes stride 1, no padding and as many
/// channels as the flattened size requires. Stride and padding come from
/// [`reconcile_stride_pad`]. Every conv and hidden fully-connected layer gets a
/// ReLU; hidden fully-connected layers are followed by dropout `dropout_p`.
pub fn reconcile_table(name: &str, rows: &[TableRow], dropout_p: f64) -> Result<NetworkSpec> {
    let spec_err = |layer: usize, msg: String| Error::Spec { layer, msg };
    let first = match rows.first() {
        Some(TableRow::Conv { input, .. })
        | Some(TableRow::MaxPool { input, .. })
        | Some(TableRow::StochasticPool { input, .. }) => *input,
        _ => return Err(spec_err(0, "table must start with a spatial layer".into())),
    };
    let next_input = |i: usize| -> Option<(usize, usize, usize)> {
        match rows.get(i + 1)? {
            TableRow::Conv { input, .. }
            | TableRow::MaxPool { input, .. }
            | TableRow::StochasticPool { input, .. } => Some(*input),
            _ => None,
        }
    };
    let fc_count = rows.iter().filter(|r| matches!(r, TableRow::FullConnect { .. })).count();
    let mut fc_seen = 0;
    let mut layers_out = Vec::new();
    let mut class_count = 0;
    for (i, row) in rows.iter().enumerate() {
        match *row {
            TableRow::Conv { input, kernel } => {
                if kernel.2 != input.2 {
                    return Err(spec_err(i, format!("kernel depth {} vs input channels {}", kernel.2, input.2)));
                }
                let (out_c, stride, pad) = match (next_input(i), rows.get(i + 1)) {
                    (Some(next), _) => {
                        let (s, p) = reconcile_stride_pad(input.0, next.0, kernel.0)
                            .filter(|&sp| reconcile_stride_pad(input.1, next.1, kernel.1) == Some(sp))
                            .ok_or_else(|| spec_err(i, format!("no stride/pad maps {input:?} to {next:?}")))?;
                        (next.2, s, p)
                    }
                    (None, Some(TableRow::FullConnect { inputs, .. })) => {
                        let area = (input.0 - kernel.0 + 1) * (input.1 - kernel.1 + 1);
                        if inputs % area != 0 {
                            return Err(spec_err(i, format!("{inputs} units not divisible by {area}")));
                        }
                        (inputs / area, 1, 0)
                    }
                    _ => return Err(spec_err(i, "conv must be followed by a spatial or fc row".into())),
                };
                layers_out.push(LayerSpec::Conv {
                    in_channels: input.2,
                    out_channels: out_c,
                    kernel_h: kernel.0,
                    kernel_w: kernel.1,
                    stride,
                    pad,
                });
                layers_out.push(LayerSpec::Relu);
            }
            TableRow::MaxPool { input, window } | TableRow::StochasticPool { input, window } => {
                let next = next_input(i).ok_or_else(|| spec_err(i, "pool must be followed by a spatial row".into()))?;
                if next.2 != input.2 {
                    return Err(spec_err(i, "pooling cannot change the channel count".into()));
                }
                let (stride, pad) = reconcile_stride_pad(input.0, next.0, window)
                    .filter(|&sp| reconcile_stride_pad(input.1, next.1, window) == Some(sp))
                    .ok_or_else(|| spec_err(i, format!("no stride/pad maps {input:?} to {next:?}")))?;
                layers_out.push(if matches!(row, TableRow::MaxPool { .. }) {
                    LayerSpec::MaxPool { window, stride, pad }
                } else {
                    LayerSpec::StochasticPool { window, stride, pad }
                });
            }
            TableRow::FullConnect { inputs, outputs } => {
                fc_seen += 1;
                layers_out.push(LayerSpec::FullConnect {
                    in_units: inputs,
                    out_units: outputs,
                });
                if fc_seen < fc_count {
                    layers_out.push(LayerSpec::Relu);
                    layers_out.push(LayerSpec::Dropout { p: dropout_p });
                }
            }
            TableRow::Softmax { classes } => {
                class_count = classes;
                layers_out.push(LayerSpec::Softmax { classes });
            }
        }
    }
    let spec = NetworkSpec {
        name: name.to_string(),
        input_shape: [first.2, first.0, first.1],
        class_count,
        layers: layers_out,
    };
    spec.infer_shapes()?;
    Ok(spec)
}

/// Layer tables of the root and leaf architectures as published: declared
/// input extent (h, w, c) and kernel per row, without strides, padding or
/// output channel counts. [`reconcile_table`] fills those in.
pub mod tables {
    use super::TableRow::{self, *};

    const fn conv(h: usize, c: usize, k: usize) -> TableRow {
        Conv { input: (h, h, c), kernel: (k, k, c) }
    }
    const fn pool(h: usize, c: usize) -> TableRow {
        MaxPool { input: (h, h, c), window: 3 }
    }
    const fn spool(h: usize, c: usize) -> TableRow {
        StochasticPool { input: (h, h, c), window: 3 }
    }

    /// Root model: 225x225x3 input, 128-way softmax.
    pub const ROOT: &[TableRow] = &[
        conv(225, 3, 3),
        pool(223, 64),
        conv(111, 64, 3),
        conv(111, 128, 3),
        pool(111, 128),
        conv(55, 128, 3),
        conv(55, 256, 3),
        pool(55, 256),
        conv(27, 256, 3),
        conv(27, 384, 3),
        conv(27, 384, 3),
        pool(27, 384),
        conv(13, 384, 3),
        conv(13, 512, 3),
        conv(13, 512, 3),
        pool(13, 512),
        conv(7, 512, 1),
        FullConnect { inputs: 12544, outputs: 4096 },
        FullConnect { inputs: 4096, outputs: 2048 },
        FullConnect { inputs: 2048, outputs: 128 },
        Softmax { classes: 128 },
    ];

    /// Leaf model with overlapping max pooling, 256-way softmax. The table
    /// numbers its rows 1-10, 12-16; rows are taken in listed order.
    pub const LEAF_MAXPOOL: &[TableRow] = &[
        conv(225, 3, 7),
        pool(111, 64),
        conv(55, 64, 3),
        conv(55, 128, 3),
        pool(55, 128),
        conv(27, 128, 3),
        conv(27, 256, 3),
        pool(27, 256),
        conv(13, 256, 3),
        conv(13, 384, 3),
        pool(13, 384),
        conv(7, 384, 1),
        FullConnect { inputs: 6272, outputs: 2048 },
        FullConnect { inputs: 2048, outputs: 2048 },
        FullConnect { inputs: 2048, outputs: 256 },
        Softmax { classes: 256 },
    ];

    /// Leaf model with stochastic pooling; otherwise identical to [`LEAF_MAXPOOL`].
    pub const LEAF_STOCHASTIC: &[TableRow] = &[
        conv(225, 3, 7),
        spool(111, 64),
        conv(55, 64, 3),
        conv(55, 128, 3),
        spool(55, 128),
        conv(27, 128, 3),
        conv(27, 256, 3),
        spool(27, 256),
        conv(13, 256, 3),
        conv(13, 384, 3),
        spool(13, 384),
        conv(7, 384, 1),
        FullConnect { inputs: 6272, outputs: 2048 },
        FullConnect { inputs: 2048, outputs: 2048 },
        FullConnect { inputs: 2048, outputs: 256 },
        Softmax { classes: 256 },
    ];
}
