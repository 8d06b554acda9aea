//! Layers with a two-route backward pass.
//!
//! The forward pass never depends on [`FeedbackMode`]. In the backward pass a
//! parameterized layer sends the arriving delta to the layer below through
//! its forward weights `W` (weight transport, i.e. backprop) or through its
//! fixed feedback weights `B` (feedback alignment). Parameter gradients are
//! computed from the cached input and the arriving delta and are the same
//! under both routes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeedbackMode {
    /// Deltas travel through `Wᵀ` (backpropagation).
    #[serde(rename = "bp")]
    WeightTransport,
    /// Deltas travel through the fixed random matrices `B`.
    #[serde(rename = "fa")]
    FeedbackAlignment,
}

impl FeedbackMode {
    pub const ALL: [FeedbackMode; 2] = [FeedbackMode::WeightTransport, FeedbackMode::FeedbackAlignment];

    /// Short tag used in file names, reports and CLI flags.
    pub fn tag(self) -> &'static str {
        match self {
            FeedbackMode::WeightTransport => "bp",
            FeedbackMode::FeedbackAlignment => "fa",
        }
    }
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FeedbackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bp" | "backprop" | "weight-transport" => Ok(FeedbackMode::WeightTransport),
            "fa" | "feedback-alignment" => Ok(FeedbackMode::FeedbackAlignment),
            other => Err(Error::Usage(format!("unknown feedback mode {other:?} (expected bp or fa)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation value. ReLU uses `φ'(0) = 0`.
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Usage(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize },
    Dense { inputs: usize, outputs: usize },
    AvgPool,
    Activation(Activation),
    Flatten,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                Some(vec![out_channels, in_channels, kernel, kernel])
            }
            LayerSpec::Dense { inputs, outputs } => Some(vec![outputs, inputs]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { out_channels, .. } => Some(out_channels),
            LayerSpec::Dense { outputs, .. } => Some(outputs),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { in_channels, kernel, .. } => Some(in_channels * kernel * kernel),
            LayerSpec::Dense { inputs, .. } => Some(inputs),
            _ => None,
        }
    }

    /// Uniform init half-width giving variance `1 / fan_in`.
    pub fn init_scale(&self) -> Option<f64> {
        self.fan_in().map(|n| (3.0 / n as f64).sqrt())
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::dim(
                        "layer_forward",
                        format!("conv expects {in_channels}×H×W input, got {input:?}"),
                    ));
                }
                let g = ConvGeometry::new(in_channels, out_channels, input[1], input[2], kernel, stride)?;
                Ok(g.output_shape().to_vec())
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::dim(
                        "layer_forward",
                        format!("dense expects [{inputs}] input, got {input:?}"),
                    ));
                }
                Ok(vec![outputs])
            }
            LayerSpec::AvgPool => {
                let r = input.len();
                if r < 2 || !input[r - 2].is_multiple_of(2) || !input[r - 1].is_multiple_of(2) {
                    return Err(Error::dim("layer_forward", format!("avg-pool needs even extents, got {input:?}")));
                }
                let mut out = input.to_vec();
                out[r - 2] /= 2;
                out[r - 1] /= 2;
                Ok(out)
            }
            LayerSpec::Activation(_) => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::AvgPool => "avgpool",
            LayerSpec::Activation(_) => "activation",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Forward weights, bias and the fixed feedback weights of one layer.
///
/// The feedback weights can only be set at construction; training goes
/// through [`LayerState::apply_update`], which touches `W` and `b` only.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    weights: Tensor,
    bias: Tensor,
    feedback: Tensor,
}

impl LayerState {
    pub fn new(weights: Tensor, bias: Tensor, feedback: Tensor) -> Result<Self> {
        if weights.rank() < 2 {
            return Err(Error::dim("LayerState::new", format!("weights {:?} must have rank ≥ 2", weights.shape())));
        }
        if weights.shape() != feedback.shape() {
            return Err(Error::dim(
                "LayerState::new",
                format!("feedback {:?} must match weights {:?}", feedback.shape(), weights.shape()),
            ));
        }
        if bias.rank() != 1 || bias.len() != weights.shape()[0] {
            return Err(Error::dim(
                "LayerState::new",
                format!("bias {:?} does not match weights {:?}", bias.shape(), weights.shape()),
            ));
        }
        Ok(Self { weights, bias, feedback })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn feedback(&self) -> &Tensor {
        &self.feedback
    }

    /// A copy whose feedback weights equal the forward weights, which makes the
    /// feedback-alignment route compute exactly what backprop computes.
    pub fn with_feedback_from_weights(&self) -> Self {
        Self { weights: self.weights.clone(), bias: self.bias.clone(), feedback: self.weights.clone() }
    }

    /// `W ← W − lr·grad_W`, `b ← b − lr·grad_b`.
    pub fn apply_update(&mut self, grads: &ParamGrads, lr: f64) -> Result<()> {
        self.weights.expect_same_shape(&grads.weights, "sgd_step")?;
        self.bias.expect_same_shape(&grads.bias, "sgd_step")?;
        self.weights.add_scaled(&grads.weights, -lr)?;
        self.bias.add_scaled(&grads.bias, -lr)
    }

    fn route(&self, mode: FeedbackMode) -> &Tensor {
        match mode {
            FeedbackMode::WeightTransport => &self.weights,
            FeedbackMode::FeedbackAlignment => &self.feedback,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ParamGrads {
    pub fn zeros_like(state: &LayerState) -> Self {
        Self { weights: Tensor::zeros(state.weights.shape()), bias: Tensor::zeros(state.bias.shape()) }
    }

    pub fn accumulate(&mut self, other: &ParamGrads, alpha: f64) -> Result<()> {
        self.weights.add_scaled(&other.weights, alpha)?;
        self.bias.add_scaled(&other.bias, alpha)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.weights.scale(alpha);
        self.bias.scale(alpha);
    }
}

/// Values cached by a forward call for the matching backward call.
///
/// The backward pass takes the tape by value, so a tape cannot feed two
/// backward calls.
#[derive(Debug)]
pub struct LayerTape {
    cache: TapeCache,
}

#[derive(Debug)]
enum TapeCache {
    Conv { input: Tensor },
    Dense { input: Tensor },
    Pool { input_shape: Vec<usize> },
    Activation { pre: Tensor },
    Flatten { input_shape: Vec<usize> },
}

impl LayerTape {
    /// The layer input `y_{l-1}` for parameterized layers.
    pub fn input(&self) -> Option<&Tensor> {
        match &self.cache {
            TapeCache::Conv { input } | TapeCache::Dense { input } => Some(input),
            _ => None,
        }
    }
}

/// Which backward outputs the caller needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardNeeds {
    pub param_grads: bool,
    pub delta_in: bool,
}

impl BackwardNeeds {
    pub const ALL: BackwardNeeds = BackwardNeeds { param_grads: true, delta_in: true };
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    /// Delta for the layer below; `None` when not requested.
    pub delta_in: Option<Tensor>,
    /// `None` for parameter-free layers or when not requested.
    pub params: Option<ParamGrads>,
}

fn state_for<'a>(spec: &LayerSpec, state: Option<&'a LayerState>, op: &'static str) -> Result<&'a LayerState> {
    let state = state.ok_or_else(|| Error::Usage(format!("{op}: {} layer needs parameters", spec.short_name())))?;
    if let Some(ws) = spec.weight_shape() {
        if state.weights.shape() != ws.as_slice() {
            return Err(Error::dim(op, format!("weights {:?}, spec wants {ws:?}", state.weights.shape())));
        }
    }
    Ok(state)
}

pub fn layer_forward(spec: &LayerSpec, state: Option<&LayerState>, x: Tensor) -> Result<(Tensor, LayerTape)> {
    let out_shape = spec.output_shape(x.shape())?;
    match *spec {
        LayerSpec::Conv { stride, .. } => {
            let st = state_for(spec, state, "layer_forward")?;
            let mut y = tensor::conv2d(&x, &st.weights, stride)?;
            let plane = out_shape[1] * out_shape[2];
            for (chunk, &b) in y.data_mut().chunks_exact_mut(plane).zip(st.bias.data()) {
                chunk.iter_mut().for_each(|v| *v += b);
            }
            Ok((y, LayerTape { cache: TapeCache::Conv { input: x } }))
        }
        LayerSpec::Dense { .. } => {
            let st = state_for(spec, state, "layer_forward")?;
            let mut y = tensor::matvec(&st.weights, &x)?;
            y.add_scaled(&st.bias, 1.0)?;
            Ok((y, LayerTape { cache: TapeCache::Dense { input: x } }))
        }
        LayerSpec::AvgPool => {
            let y = tensor::avg_pool2(&x)?;
            Ok((y, LayerTape { cache: TapeCache::Pool { input_shape: x.shape().to_vec() } }))
        }
        LayerSpec::Activation(act) => {
            let y = x.map(|v| act.apply(v));
            Ok((y, LayerTape { cache: TapeCache::Activation { pre: x } }))
        }
        LayerSpec::Flatten => {
            let input_shape = x.shape().to_vec();
            let y = x.reshape(&out_shape)?;
            Ok((y, LayerTape { cache: TapeCache::Flatten { input_shape } }))
        }
    }
}

pub fn layer_backward(
    spec: &LayerSpec,
    state: Option<&LayerState>,
    tape: LayerTape,
    delta_out: &Tensor,
    mode: FeedbackMode,
    needs: BackwardNeeds,
) -> Result<LayerGrads> {
    let mismatch = || Error::Usage(format!("tape does not belong to a {} layer", spec.short_name()));
    match (*spec, tape.cache) {
        (LayerSpec::Conv { kernel, stride, .. }, TapeCache::Conv { input }) => {
            let st = state_for(spec, state, "layer_backward")?;
            let delta_in = if needs.delta_in {
                Some(tensor::conv2d_input_grad(delta_out, st.route(mode), input.shape(), stride)?)
            } else {
                None
            };
            let params = if needs.param_grads {
                let weights = tensor::conv2d_kernel_grad(&input, delta_out, kernel, stride)?;
                let plane = delta_out.shape()[1] * delta_out.shape()[2];
                let bias = delta_out.data().chunks_exact(plane).map(|c| c.iter().sum()).collect();
                Some(ParamGrads { weights, bias: Tensor::from_parts(vec![st.bias.len()], bias) })
            } else {
                None
            };
            Ok(LayerGrads { delta_in, params })
        }
        (LayerSpec::Dense { outputs, .. }, TapeCache::Dense { input }) => {
            let st = state_for(spec, state, "layer_backward")?;
            if delta_out.len() != outputs {
                return Err(Error::dim("layer_backward", format!("delta {:?} for {outputs} outputs", delta_out.shape())));
            }
            let delta_in = if needs.delta_in {
                Some(tensor::matvec_transposed(st.route(mode), delta_out)?)
            } else {
                None
            };
            let params = needs.param_grads.then(|| ParamGrads {
                weights: tensor::outer(delta_out, &input),
                bias: Tensor::from_parts(vec![outputs], delta_out.data().to_vec()),
            });
            Ok(LayerGrads { delta_in, params })
        }
        (LayerSpec::AvgPool, TapeCache::Pool { input_shape }) => {
            let delta_in = if needs.delta_in { Some(tensor::avg_pool2_grad(delta_out, &input_shape)?) } else { None };
            Ok(LayerGrads { delta_in, params: None })
        }
        (LayerSpec::Activation(act), TapeCache::Activation { pre }) => {
            let delta_in = if needs.delta_in {
                Some(delta_out.zip_map(&pre, "layer_backward", |d, p| d * act.derivative(p))?)
            } else {
                None
            };
            Ok(LayerGrads { delta_in, params: None })
        }
        (LayerSpec::Flatten, TapeCache::Flatten { input_shape }) => {
            let delta_in = if needs.delta_in { Some(delta_out.clone().reshape(&input_shape)?) } else { None };
            Ok(LayerGrads { delta_in, params: None })
        }
        _ => Err(mismatch()),
    }
}

/// Draws `W` from `rng_forward` and `B` from `rng_feedback`, both uniform with
/// half-width `√(3 / fan_in)`; the bias starts at zero.
pub fn init_layer(spec: &LayerSpec, rng_forward: &mut Rng, rng_feedback: &mut Rng) -> Option<LayerState> {
    let shape = spec.weight_shape()?;
    let scale = spec.init_scale()?;
    let weights = tensor::uniform_init(rng_forward, &shape, scale);
    let feedback = tensor::uniform_init(rng_feedback, &shape, scale);
    let bias = Tensor::zeros(&[shape[0]]);
    Some(LayerState { weights, bias, feedback })
}
