//! Layer stacks, the LeNet classifier, and the cross-entropy loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, Activation, BackwardNeeds, FeedbackMode, LayerSpec, LayerState, LayerTape, ParamGrads};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MNIST_SHAPE: [usize; 3] = [1, 28, 28];
pub const CIFAR10_SHAPE: [usize; 3] = [3, 32, 32];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks that consecutive layers fit together and returns the shape
    /// entering each layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shapes.push(shape.clone());
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Config(format!("layer {i} ({}): {e}", layer.short_name())))?;
        }
        if shape != [self.classes] {
            return Err(Error::Config(format!("network emits {shape:?}, expected [{}] logits", self.classes)));
        }
        Ok(shapes)
    }

    /// Indices of the layers that carry parameters.
    pub fn parameterized(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_parameterized()).map(|(i, _)| i)
    }

    /// Human-readable names for the parameterized layers: `conv1`, `conv2`, `dense1`, ...
    pub fn parameter_names(&self) -> Vec<(usize, String)> {
        let (mut convs, mut denses) = (0, 0);
        self.parameterized()
            .map(|i| match self.layers[i] {
                LayerSpec::Conv { .. } => {
                    convs += 1;
                    (i, format!("conv{convs}"))
                }
                _ => {
                    denses += 1;
                    (i, format!("dense{denses}"))
                }
            })
            .collect()
    }
}

/// LeNet-5 with average pooling:
/// `conv5×5(6) → φ → pool → conv5×5(16) → φ → pool → flatten → 120 → φ → 84 → φ → classes`.
pub fn build_lenet(input_shape: &[usize], classes: usize) -> Result<NetworkSpec> {
    build_lenet_with(input_shape, classes, Activation::Relu)
}

pub fn build_lenet_with(input_shape: &[usize], classes: usize, act: Activation) -> Result<NetworkSpec> {
    if input_shape != MNIST_SHAPE && input_shape != CIFAR10_SHAPE {
        return Err(Error::Config(format!(
            "LeNet supports 1×28×28 or 3×32×32 inputs, got {input_shape:?}"
        )));
    }
    let c = input_shape[0];
    let side = (((input_shape[1] - 4) / 2) - 4) / 2;
    let flat = 16 * side * side;
    let spec = NetworkSpec {
        input_shape: input_shape.to_vec(),
        classes,
        layers: vec![
            LayerSpec::Conv { in_channels: c, out_channels: 6, kernel: 5, stride: 1 },
            LayerSpec::Activation(act),
            LayerSpec::AvgPool,
            LayerSpec::Conv { in_channels: 6, out_channels: 16, kernel: 5, stride: 1 },
            LayerSpec::Activation(act),
            LayerSpec::AvgPool,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: flat, outputs: 120 },
            LayerSpec::Activation(act),
            LayerSpec::Dense { inputs: 120, outputs: 84 },
            LayerSpec::Activation(act),
            LayerSpec::Dense { inputs: 84, outputs: classes },
        ],
    };
    spec.validate()?;
    Ok(spec)
}

/// Cross-entropy of `softmax(logits)` against `label`, and its derivative
/// with respect to the logits (`softmax − onehot`).
pub fn loss_and_output_delta(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::Contract {
            op: "loss_and_output_delta",
            detail: format!("label {label} out of range for {} classes", z.len()),
        });
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - z[label];
    let mut delta: Vec<f64> = exps.iter().map(|e| e / total).collect();
    delta[label] -= 1.0;
    Ok((loss, Tensor::from_parts(logits.shape().to_vec(), delta)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub params: bool,
    pub input: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest { params: true, input: true };
    pub const PARAMS: GradRequest = GradRequest { params: true, input: false };
    pub const INPUT: GradRequest = GradRequest { params: false, input: true };
}

#[derive(Debug, Clone)]
pub struct NetworkGrads {
    /// One entry per layer; `Some` for parameterized layers when requested.
    pub params: Vec<Option<ParamGrads>>,
    /// `∇_x J` under the chosen feedback mode, when requested.
    pub input_grad: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    states: Vec<Option<LayerState>>,
}

impl Network {
    /// Initializes every parameterized layer, drawing forward weights from
    /// the `init_seed` stream and feedback weights from the `feedback_seed`
    /// stream.
    pub fn init(spec: NetworkSpec, init_seed: u64, feedback_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut fwd = Rng::new(init_seed);
        let mut fb = Rng::new(feedback_seed);
        let states = spec.layers.iter().map(|l| layers::init_layer(l, &mut fwd, &mut fb)).collect();
        Ok(Self { spec, states })
    }

    pub fn from_parts(spec: NetworkSpec, states: Vec<Option<LayerState>>) -> Result<Self> {
        spec.validate()?;
        if states.len() != spec.layers.len() {
            return Err(Error::Config(format!("{} states for {} layers", states.len(), spec.layers.len())));
        }
        for (i, (layer, state)) in spec.layers.iter().zip(&states).enumerate() {
            match (layer.weight_shape(), state) {
                (Some(ws), Some(st)) if st.weights().shape() == ws.as_slice() => {}
                (None, None) => {}
                _ => return Err(Error::Config(format!("layer {i} ({}) has inconsistent parameters", layer.short_name()))),
            }
        }
        Ok(Self { spec, states })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn states(&self) -> &[Option<LayerState>] {
        &self.states
    }

    /// Copy with `B := W` in every layer.
    pub fn with_feedback_from_weights(&self) -> Self {
        let states = self.states.iter().map(|s| s.as_ref().map(LayerState::with_feedback_from_weights)).collect();
        Self { spec: self.spec.clone(), states }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<LayerTape>)> {
        if x.shape() != self.spec.input_shape.as_slice() {
            return Err(Error::dim(
                "network_forward",
                format!("input {:?}, network expects {:?}", x.shape(), self.spec.input_shape),
            ));
        }
        let mut tapes = Vec::with_capacity(self.spec.layers.len());
        let mut y = x.clone();
        for (layer, state) in self.spec.layers.iter().zip(&self.states) {
            let (next, tape) = layers::layer_forward(layer, state.as_ref(), y)?;
            tapes.push(tape);
            y = next;
        }
        Ok((y, tapes))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x).map(|(y, _)| y)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        self.logits(x).map(|y| y.argmax())
    }

    /// Runs the backward pass from `output_delta` (∂J/∂logits) down to the input.
    pub fn backward(
        &self,
        tapes: Vec<LayerTape>,
        output_delta: &Tensor,
        mode: FeedbackMode,
        request: GradRequest,
    ) -> Result<NetworkGrads> {
        let n = self.spec.layers.len();
        if tapes.len() != n {
            return Err(Error::Usage(format!("{} tapes supplied for {n} layers", tapes.len())));
        }
        if output_delta.len() != self.spec.classes {
            return Err(Error::dim(
                "network_backward",
                format!("output delta {:?} for {} classes", output_delta.shape(), self.spec.classes),
            ));
        }
        let lowest = if request.input { 0 } else { self.spec.parameterized().next().unwrap_or(0) };
        let mut params: Vec<Option<ParamGrads>> = vec![None; n];
        let mut delta = output_delta.clone();
        for (i, tape) in tapes.into_iter().enumerate().rev() {
            if i < lowest {
                break;
            }
            let needs = BackwardNeeds { param_grads: request.params, delta_in: i > 0 && i > lowest || request.input };
            let g = layers::layer_backward(&self.spec.layers[i], self.states[i].as_ref(), tape, &delta, mode, needs)?;
            params[i] = g.params;
            match g.delta_in {
                Some(d) => delta = d,
                None => break,
            }
        }
        let input_grad = request.input.then_some(delta);
        Ok(NetworkGrads { params, input_grad })
    }

    /// Loss and `∇_x J(x, label)` under `mode`, skipping parameter gradients.
    pub fn loss_and_input_grad(&self, x: &Tensor, label: usize, mode: FeedbackMode) -> Result<(f64, Tensor)> {
        let (logits, tapes) = self.forward(x)?;
        let (loss, delta) = loss_and_output_delta(&logits, label)?;
        let grads = self.backward(tapes, &delta, mode, GradRequest::INPUT)?;
        Ok((loss, grads.input_grad.expect("input gradient was requested")))
    }

    /// Loss and per-layer parameter gradients for one example.
    pub fn loss_and_param_grads(&self, x: &Tensor, label: usize, mode: FeedbackMode) -> Result<(f64, Vec<Option<ParamGrads>>)> {
        let (logits, tapes) = self.forward(x)?;
        let (loss, delta) = loss_and_output_delta(&logits, label)?;
        let grads = self.backward(tapes, &delta, mode, GradRequest::PARAMS)?;
        Ok((loss, grads.params))
    }

    /// `W ← W − lr·grad_W`, `b ← b − lr·grad_b` on every parameterized layer.
    pub fn sgd_step(&mut self, grads: &[Option<ParamGrads>], lr: f64) -> Result<()> {
        if grads.len() != self.states.len() {
            return Err(Error::dim("sgd_step", format!("{} gradient slots for {} layers", grads.len(), self.states.len())));
        }
        for (i, (state, grad)) in self.states.iter_mut().zip(grads).enumerate() {
            match (state, grad) {
                (Some(st), Some(g)) => st.apply_update(g, lr)?,
                (None, None) => {}
                (Some(_), None) | (None, Some(_)) => {
                    return Err(Error::dim("sgd_step", format!("gradient slot {i} does not match its layer")));
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<Option<ParamGrads>> {
        self.states.iter().map(|s| s.as_ref().map(ParamGrads::zeros_like)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::uniform_init;

    fn small_spec() -> NetworkSpec {
        // 1×8×8 → conv3(2) → tanh → pool → flatten(18) → dense(5) → relu → dense(3)
        NetworkSpec {
            input_shape: vec![1, 8, 8],
            classes: 3,
            layers: vec![
                LayerSpec::Conv { in_channels: 1, out_channels: 2, kernel: 3, stride: 1 },
                LayerSpec::Activation(Activation::Tanh),
                LayerSpec::AvgPool,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 18, outputs: 5 },
                LayerSpec::Activation(Activation::Tanh),
                LayerSpec::Dense { inputs: 5, outputs: 3 },
            ],
        }
    }

    #[test]
    fn lenet_shapes() {
        let m = build_lenet(&MNIST_SHAPE, 10).unwrap();
        assert_eq!(m.layers[7], LayerSpec::Dense { inputs: 256, outputs: 120 });
        let c = build_lenet(&CIFAR10_SHAPE, 10).unwrap();
        assert_eq!(c.layers[7], LayerSpec::Dense { inputs: 400, outputs: 120 });
        assert_eq!(*m.layers.last().unwrap(), LayerSpec::Dense { inputs: 84, outputs: 10 });
        assert!(matches!(build_lenet(&[1, 32, 32], 10), Err(Error::Config(_))));
    }

    #[test]
    fn lenet_zero_image_gives_final_bias() {
        let spec = build_lenet(&MNIST_SHAPE, 10).unwrap();
        let mut net = Network::init(spec, 1, 2).unwrap();
        // Give the last layer a recognizable bias.
        let last = net.states.len() - 1;
        let st = net.states[last].take().unwrap();
        let bias = Tensor::from_vec((0..10).map(|i| i as f64 * 0.1).collect()).unwrap();
        net.states[last] = Some(LayerState::new(st.weights().clone(), bias.clone(), st.feedback().clone()).unwrap());
        let logits = net.logits(&Tensor::zeros(&MNIST_SHAPE)).unwrap();
        assert_eq!(logits, bias);
    }

    #[test]
    fn loss_closed_forms() {
        let (loss, delta) = loss_and_output_delta(&Tensor::zeros(&[10]), 3).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(delta.data().iter().sum::<f64>().abs() < 1e-12);

        let mut z = vec![0.0; 10];
        z[4] = 50.0;
        let (loss, delta) = loss_and_output_delta(&Tensor::from_vec(z).unwrap(), 4).unwrap();
        assert!((0.0..1e-20).contains(&loss));
        assert!(delta.max_abs() < 1e-20);

        assert!(loss_and_output_delta(&Tensor::zeros(&[3]), 3).is_err());
    }

    #[test]
    fn output_delta_matches_central_differences() {
        let mut rng = Rng::new(31);
        let z = uniform_init(&mut rng, &[10], 3.0);
        let (_, delta) = loss_and_output_delta(&z, 7).unwrap();
        let h = 1e-5;
        for i in 0..10 {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp.data_mut()[i] += h;
            zm.data_mut()[i] -= h;
            let fd = (loss_and_output_delta(&zp, 7).unwrap().0 - loss_and_output_delta(&zm, 7).unwrap().0) / (2.0 * h);
            assert!((fd - delta.data()[i]).abs() / fd.abs().max(1e-8) <= 1e-6);
        }
    }

    #[test]
    fn bp_input_grad_matches_central_differences() {
        let net = Network::init(small_spec(), 5, 6).unwrap();
        let mut rng = Rng::new(32);
        let x = uniform_init(&mut rng, &[1, 8, 8], 1.0);
        let (_, g) = net.loss_and_input_grad(&x, 2, FeedbackMode::WeightTransport).unwrap();
        let loss = |x: &Tensor| loss_and_output_delta(&net.logits(x).unwrap(), 2).unwrap().0;
        let h = 1e-5;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-7);
            assert!(rel <= 1e-5, "pixel {i}: fd {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn substituted_network_gives_bp_gradients_under_fa() {
        let net = Network::init(small_spec(), 7, 8).unwrap().with_feedback_from_weights();
        let x = uniform_init(&mut Rng::new(33), &[1, 8, 8], 1.0);
        let bp = net.loss_and_input_grad(&x, 1, FeedbackMode::WeightTransport).unwrap();
        let fa = net.loss_and_input_grad(&x, 1, FeedbackMode::FeedbackAlignment).unwrap();
        assert_eq!(bp.1, fa.1);
    }

    #[test]
    fn fa_input_grad_differs_from_bp() {
        let net = Network::init(small_spec(), 7, 8).unwrap();
        let x = uniform_init(&mut Rng::new(34), &[1, 8, 8], 1.0);
        let bp = net.loss_and_input_grad(&x, 1, FeedbackMode::WeightTransport).unwrap();
        let fa = net.loss_and_input_grad(&x, 1, FeedbackMode::FeedbackAlignment).unwrap();
        assert_eq!(bp.0, fa.0);
        assert_ne!(bp.1, fa.1);
    }

    #[test]
    fn zero_output_delta_gives_zero_grads() {
        let net = Network::init(small_spec(), 9, 10).unwrap();
        let x = uniform_init(&mut Rng::new(35), &[1, 8, 8], 1.0);
        let (_, tapes) = net.forward(&x).unwrap();
        let g = net.backward(tapes, &Tensor::zeros(&[3]), FeedbackMode::FeedbackAlignment, GradRequest::ALL).unwrap();
        assert!(g.input_grad.unwrap().data().iter().all(|&v| v == 0.0));
        for p in g.params.iter().flatten() {
            assert!(p.weights.data().iter().all(|&v| v == 0.0));
            assert!(p.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn partial_requests_agree_with_full_backward() {
        let net = Network::init(small_spec(), 11, 12).unwrap();
        let x = uniform_init(&mut Rng::new(36), &[1, 8, 8], 1.0);
        let run = |req| {
            let (logits, tapes) = net.forward(&x).unwrap();
            let (_, d) = loss_and_output_delta(&logits, 0).unwrap();
            net.backward(tapes, &d, FeedbackMode::FeedbackAlignment, req).unwrap()
        };
        let all = run(GradRequest::ALL);
        let params = run(GradRequest::PARAMS);
        let input = run(GradRequest::INPUT);
        assert_eq!(all.params, params.params);
        assert_eq!(all.input_grad, input.input_grad);
        assert!(params.input_grad.is_none());
        assert!(input.params.iter().all(Option::is_none));
    }

    #[test]
    fn wrong_tape_count_is_usage_error() {
        let net = Network::init(small_spec(), 1, 2).unwrap();
        let (_, mut tapes) = net.forward(&Tensor::zeros(&[1, 8, 8])).unwrap();
        tapes.pop();
        let err = net.backward(tapes, &Tensor::zeros(&[3]), FeedbackMode::WeightTransport, GradRequest::ALL);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = Network::init(small_spec(), 1, 2).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[1, 9, 9])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn parameter_names_follow_layer_order() {
        let spec = build_lenet(&MNIST_SHAPE, 10).unwrap();
        let names: Vec<String> = spec.parameter_names().into_iter().map(|(_, n)| n).collect();
        assert_eq!(names, ["conv1", "conv2", "dense1", "dense2", "dense3"]);
    }
}
