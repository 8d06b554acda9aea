//! Independent oracles shared by the property suite and the acceptance runner.
#![allow(dead_code)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use wtfree_core::attacks::{self, GradientOracle, MomentumAccumulator};
use wtfree_core::checkpoint::{Checkpoint, TrainingMeta};
use wtfree_core::datasets::{self, CIFAR_RECORD_BYTES};
use wtfree_core::layers::{self, Activation, BackwardNeeds, FeedbackMode, LayerSpec, LayerState};
use wtfree_core::network::{loss_and_output_delta, GradRequest, Network, NetworkSpec};
use wtfree_core::tensor::{self, Tensor};
use wtfree_core::Rng;

pub type Check = Result<(), String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

pub fn random_image(rng: &mut Rng, shape: &[usize]) -> Tensor {
    random_tensor(rng, shape, 0.0, 1.0)
}

/// A small conv net (conv → φ → pool → flatten → dense → φ → dense) on
/// 2×8×8 inputs. Odd seeds use stride 2 with 2×2 kernels.
pub fn small_conv_spec(seed: u64, act: Activation) -> NetworkSpec {
    let (kernel, stride, flat) = if seed.is_multiple_of(2) { (3, 1, 3 * 3 * 3) } else { (2, 2, 3 * 2 * 2) };
    NetworkSpec {
        input_shape: vec![2, 8, 8],
        classes: 4,
        layers: vec![
            LayerSpec::Conv { in_channels: 2, out_channels: 3, kernel, stride },
            LayerSpec::Activation(act),
            LayerSpec::AvgPool,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: flat, outputs: 6 },
            LayerSpec::Activation(act),
            LayerSpec::Dense { inputs: 6, outputs: 4 },
        ],
    }
}

/// Initializes `spec` and replaces the zero biases with random ones so that
/// bias gradients are exercised.
pub fn random_network(spec: NetworkSpec, seed: u64) -> Network {
    let net = Network::init(spec.clone(), seed, seed ^ 0x5eed).unwrap();
    let mut rng = Rng::new(seed.wrapping_add(17));
    let states = net
        .states()
        .iter()
        .map(|s| {
            s.as_ref().map(|st| {
                let bias = random_tensor(&mut rng, st.bias().shape(), -0.3, 0.3);
                LayerState::new(st.weights().clone(), bias, st.feedback().clone()).unwrap()
            })
        })
        .collect();
    Network::from_parts(spec, states).unwrap()
}

pub fn loss(net: &Network, x: &Tensor, label: usize) -> f64 {
    loss_and_output_delta(&net.logits(x).unwrap(), label).unwrap().0
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn perturb_param(net: &Network, layer: usize, bias: bool, index: usize, delta: f64) -> Network {
    let mut states = net.states().to_vec();
    let st = states[layer].as_ref().unwrap();
    let (mut w, mut b) = (st.weights().clone(), st.bias().clone());
    if bias {
        b.data_mut()[index] += delta;
    } else {
        w.data_mut()[index] += delta;
    }
    states[layer] = Some(LayerState::new(w, b, st.feedback().clone()).unwrap());
    Network::from_parts(net.spec().clone(), states).unwrap()
}

/// Backprop input and parameter gradients against central differences of the loss.
pub fn check_finite_differences(net: &Network, x: &Tensor, label: usize, tol: f64) -> Check {
    const H: f64 = 1e-5;
    let (logits, tapes) = net.forward(x).unwrap();
    let (_, delta) = loss_and_output_delta(&logits, label).unwrap();
    let grads = net.backward(tapes, &delta, FeedbackMode::WeightTransport, GradRequest::ALL).unwrap();

    let input = grads.input_grad.unwrap();
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            central_difference(
                |h| {
                    let mut xp = x.clone();
                    xp.data_mut()[i] += h;
                    loss(net, &xp, label)
                },
                H,
            )
        })
        .collect();
    let err = relative_error(input.data(), &numeric);
    ensure(err <= tol, || format!("input gradient rel. err {err:.3e}"))?;

    for (layer, g) in grads.params.iter().enumerate() {
        let Some(g) = g else { continue };
        for (bias, analytic) in [(false, &g.weights), (true, &g.bias)] {
            let numeric: Vec<f64> = (0..analytic.len())
                .map(|i| central_difference(|h| loss(&perturb_param(net, layer, bias, i, h), x, label), H))
                .collect();
            let err = relative_error(analytic.data(), &numeric);
            let what = if bias { "bias" } else { "weight" };
            ensure(err <= tol, || format!("layer {layer} {what} gradient rel. err {err:.3e}"))?;
        }
    }
    Ok(())
}

fn adjoint_gap(lhs: f64, rhs: f64) -> f64 {
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}

/// `⟨A x, y⟩ = ⟨x, Aᵀ y⟩` for the dense, conv (input and kernel side) and pooling kernels.
pub fn check_adjoints(rng: &mut Rng, tol: f64) -> Check {
    let w = random_tensor(rng, &[5, 7], -1.0, 1.0);
    let x = random_tensor(rng, &[7], -1.0, 1.0);
    let y = random_tensor(rng, &[5], -1.0, 1.0);
    let lhs = tensor::matvec(&w, &x).unwrap().dot(&y).unwrap();
    let rhs = x.dot(&tensor::matvec_transposed(&w, &y).unwrap()).unwrap();
    let gap = adjoint_gap(lhs, rhs);
    ensure(gap <= tol, || format!("dense adjoint gap {gap:.3e}"))?;

    for (k, stride, h) in [(3, 1, 9), (2, 2, 8), (5, 1, 12), (3, 2, 9)] {
        let kern = random_tensor(rng, &[4, 3, k, k], -1.0, 1.0);
        let x = random_tensor(rng, &[3, h, h], -1.0, 1.0);
        let out = tensor::conv2d(&x, &kern, stride).unwrap();
        let y = random_tensor(rng, out.shape(), -1.0, 1.0);
        let lhs = out.dot(&y).unwrap();
        let rhs_input = x.dot(&tensor::conv2d_input_grad(&y, &kern, x.shape(), stride).unwrap()).unwrap();
        let rhs_kernel = kern.dot(&tensor::conv2d_kernel_grad(&x, &y, k, stride).unwrap()).unwrap();
        let gap = adjoint_gap(lhs, rhs_input).max(adjoint_gap(lhs, rhs_kernel));
        ensure(gap <= tol, || format!("conv k={k} stride={stride} adjoint gap {gap:.3e}"))?;
    }

    let x = random_tensor(rng, &[3, 6, 4], -1.0, 1.0);
    let pooled = tensor::avg_pool2(&x).unwrap();
    let y = random_tensor(rng, pooled.shape(), -1.0, 1.0);
    let gap = adjoint_gap(pooled.dot(&y).unwrap(), x.dot(&tensor::avg_pool2_grad(&y, x.shape()).unwrap()).unwrap());
    ensure(gap <= tol, || format!("pool adjoint gap {gap:.3e}"))
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// With `B := W`, every layer delta, parameter gradient, input gradient and
/// attack output of the feedback-alignment route equals the backprop one bit for bit.
pub fn check_substitution_identity(net: &Network, x: &Tensor, label: usize) -> Check {
    let fa_net = net.with_feedback_from_weights();
    let (bp, fa) = (FeedbackMode::WeightTransport, FeedbackMode::FeedbackAlignment);

    // Layer by layer, feeding the same delta into both routes.
    let (logits, tapes) = net.forward(x).unwrap();
    let (_, tapes_fa) = fa_net.forward(x).unwrap();
    let (_, mut delta) = loss_and_output_delta(&logits, label).unwrap();
    let layers = &net.spec().layers;
    for (i, (tape, tape_fa)) in tapes.into_iter().zip(tapes_fa).enumerate().rev() {
        let g_bp = layers::layer_backward(&layers[i], net.states()[i].as_ref(), tape, &delta, bp, BackwardNeeds::ALL).unwrap();
        let g_fa =
            layers::layer_backward(&layers[i], fa_net.states()[i].as_ref(), tape_fa, &delta, fa, BackwardNeeds::ALL).unwrap();
        let (d_bp, d_fa) = (g_bp.delta_in.unwrap(), g_fa.delta_in.unwrap());
        ensure(bits(&d_bp) == bits(&d_fa), || format!("layer {i} ({}) delta differs", layers[i].short_name()))?;
        if let (Some(p), Some(q)) = (&g_bp.params, &g_fa.params) {
            ensure(bits(&p.weights) == bits(&q.weights) && bits(&p.bias) == bits(&q.bias), || {
                format!("layer {i} parameter gradients differ")
            })?;
        }
        delta = d_bp;
    }

    let (_, g_bp) = net.loss_and_input_grad(x, label, bp).unwrap();
    let (_, g_fa) = fa_net.loss_and_input_grad(x, label, fa).unwrap();
    ensure(bits(&g_bp) == bits(&g_fa), || "input gradients differ".into())?;

    let (o_bp, o_fa) = (GradientOracle::new(net, bp), GradientOracle::new(&fa_net, fa));
    for eps in [0.05, 0.3, 1.0] {
        let pairs = [
            ("fgsm", attacks::fgsm(&o_bp, x, label, eps), attacks::fgsm(&o_fa, x, label, eps)),
            ("bim", attacks::bim(&o_bp, x, label, eps, 10), attacks::bim(&o_fa, x, label, eps, 10)),
            ("mifgsm", attacks::mifgsm(&o_bp, x, label, eps, 10, 0.8), attacks::mifgsm(&o_fa, x, label, eps, 10, 0.8)),
        ];
        for (name, a, b) in pairs {
            ensure(bits(&a.unwrap()) == bits(&b.unwrap()), || format!("{name} output differs at eps {eps}"))?;
        }
    }
    Ok(())
}

/// ε-ball containment, pixel range, ε=0 identity and BIM(n=1) == FGSM for one case.
pub fn check_attack_invariants(net: &Network, mode: FeedbackMode, x: &Tensor, label: usize, eps: f64) -> Check {
    let oracle = GradientOracle::new(net, mode);
    let outputs = [
        ("fgsm", attacks::fgsm(&oracle, x, label, eps).unwrap()),
        ("bim", attacks::bim(&oracle, x, label, eps, 10).unwrap()),
        ("mifgsm", attacks::mifgsm(&oracle, x, label, eps, 10, 0.8).unwrap()),
    ];
    for (name, adv) in &outputs {
        let dist = adv.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(dist <= eps + 1e-12, || format!("{name}: L∞ distance {dist} exceeds eps {eps}"))?;
        ensure(adv.data().iter().all(|v| (0.0..=1.0).contains(v)), || format!("{name}: pixel left [0, 1]"))?;
    }
    let one_step = attacks::bim(&oracle, x, label, eps, 1).unwrap();
    ensure(bits(&one_step) == bits(&outputs[0].1), || format!("bim(n=1) != fgsm at eps {eps}"))?;
    for (name, zero) in [
        ("fgsm", attacks::fgsm(&oracle, x, label, 0.0).unwrap()),
        ("bim", attacks::bim(&oracle, x, label, 0.0, 10).unwrap()),
        ("mifgsm", attacks::mifgsm(&oracle, x, label, 0.0, 10, 0.8).unwrap()),
    ] {
        ensure(bits(&zero) == bits(x), || format!("{name}: eps=0 changed the input"))?;
    }
    Ok(())
}

/// Feeding a constant gradient three times gives `(1 + μ + μ²)·v/‖v‖₁`.
pub fn check_momentum_closed_form(v: &Tensor, mu: f64, tol: f64) -> Check {
    let mut acc = MomentumAccumulator::new(mu);
    for _ in 0..3 {
        acc.push(v).unwrap();
    }
    let l1 = tensor::l1_norm(v);
    let factor = 1.0 + mu + mu * mu;
    let got = acc.velocity().unwrap();
    for (g, &vi) in got.data().iter().zip(v.data()) {
        let want = factor * vi / l1;
        ensure((g - want).abs() <= tol, || format!("g3 component {g} vs closed form {want}"))?;
    }
    Ok(())
}

pub fn valid_mnist_pair(n: usize, rng: &mut Rng) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    for v in [0x803u32, n as u32, 28, 28] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend((0..n * 784).map(|_| (rng.next_u64() & 0xff) as u8));
    let mut lab = Vec::new();
    for v in [0x801u32, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend((0..n).map(|_| (rng.next_u64() % 10) as u8));
    (img, lab)
}

fn no_panic<T>(what: &str, f: impl FnOnce() -> T) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|_| format!("{what} panicked"))
}

/// One random header mutation or truncation of an IDX pair, CIFAR batch, or
/// checkpoint. Every mutation must produce a structured error.
pub fn check_loader_fuzz_case(rng: &mut Rng, ckpt_bytes: &[u8]) -> Check {
    let (img, lab) = valid_mnist_pair(2, rng);
    let pick = rng.next_u64() % 6;
    let (mut img_m, mut lab_m) = (img.clone(), lab.clone());
    match pick {
        0 => {
            let i = (rng.next_u64() % 16) as usize;
            img_m[i] ^= 1 + (rng.next_u64() % 255) as u8;
        }
        1 => {
            let i = (rng.next_u64() % 8) as usize;
            lab_m[i] ^= 1 + (rng.next_u64() % 255) as u8;
        }
        2 => img_m.truncate((rng.next_u64() as usize) % img.len()),
        3 => lab_m.truncate((rng.next_u64() as usize) % lab.len()),
        4 => {
            let i = 8 + (rng.next_u64() % 2) as usize;
            lab_m[i] = 10 + (rng.next_u64() % 246) as u8;
        }
        _ => img_m.push((rng.next_u64() & 0xff) as u8),
    }
    let res = no_panic("mnist parser", || datasets::parse_mnist_idx(&img_m, &lab_m, "fuzz"))?;
    ensure(res.is_err(), || format!("mnist mutation {pick} was accepted"))?;

    let records = 1 + (rng.next_u64() % 3) as usize;
    let mut cifar: Vec<u8> = (0..records * CIFAR_RECORD_BYTES).map(|_| (rng.next_u64() & 0xff) as u8).collect();
    for r in 0..records {
        cifar[r * CIFAR_RECORD_BYTES] %= 10;
    }
    if rng.next_u64().is_multiple_of(2) {
        let cut = 1 + (rng.next_u64() as usize) % (CIFAR_RECORD_BYTES - 1);
        cifar.truncate(cifar.len() - cut);
    } else {
        let r = (rng.next_u64() as usize) % records;
        cifar[r * CIFAR_RECORD_BYTES] = 10 + (rng.next_u64() % 246) as u8;
    }
    let res = no_panic("cifar parser", || {
        datasets::parse_cifar10_records(&cifar, "fuzz", &mut Vec::new(), &mut Vec::new())
    })?;
    ensure(res.is_err(), || "cifar mutation was accepted".into())?;

    let mut ck = ckpt_bytes.to_vec();
    if rng.next_u64().is_multiple_of(2) {
        ck.truncate((rng.next_u64() as usize) % ck.len());
    } else {
        // Header: magic, version, input rank.
        let i = (rng.next_u64() % 12) as usize;
        ck[i] ^= 1 + (rng.next_u64() % 255) as u8;
    }
    let res = no_panic("checkpoint parser", || Checkpoint::from_bytes(&ck, "fuzz"))?;
    ensure(res.is_err(), || "checkpoint mutation was accepted".into())
}

pub fn sample_checkpoint(seed: u64) -> Checkpoint {
    Checkpoint {
        network: random_network(small_conv_spec(seed, Activation::Relu), seed),
        meta: TrainingMeta {
            init_seed: seed,
            feedback_seed: seed ^ 0x5eed,
            shuffle_seed: 3,
            epochs: 2,
            batch_size: 16,
            learning_rate: 0.05,
            mode: Some(FeedbackMode::FeedbackAlignment),
        },
    }
}

pub fn check_checkpoint_round_trip(ck: &Checkpoint) -> Check {
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, "round trip").map_err(|e| e.to_string())?;
    ensure(back.to_bytes() == bytes, || "re-encoded bytes differ".into())?;
    ensure(back.meta == ck.meta, || "metadata differs".into())?;
    for (a, b) in ck.network.states().iter().zip(back.network.states()) {
        if let (Some(a), Some(b)) = (a, b) {
            ensure(
                bits(a.weights()) == bits(b.weights())
                    && bits(a.bias()) == bits(b.bias())
                    && bits(a.feedback()) == bits(b.feedback()),
                || "layer state differs".into(),
            )?;
        }
    }
    Ok(())
}

/// `WTFREE_DATA_DIR`, else `data/` at the workspace root.
pub fn data_root() -> PathBuf {
    std::env::var_os("WTFREE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}
