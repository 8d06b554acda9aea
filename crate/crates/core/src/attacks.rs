//! FGSM, BIM and MI-FGSM against a gradient oracle.
//!
//! An oracle is a network plus the feedback mode used to carry the loss
//! gradient down to the pixels, so every attack can be driven by true
//! (backprop) gradients or by feedback-alignment gradients.
//!
//! Budget semantics shared by the iterative attacks: `n` steps of size
//! `α = ε/n`, each followed by a clip to `[x − ε, x + ε] ∩ [0, 1]`. FGSM takes
//! one step of size `ε` and clips to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::layers::FeedbackMode;
use crate::network::Network;
use crate::tensor::{self, Tensor};

pub const DEFAULT_ITERATIONS: usize = 10;
pub const DEFAULT_MOMENTUM: f64 = 0.8;
/// Below this L1 norm a gradient is treated as zero by MI-FGSM.
pub const ZERO_GRADIENT_L1: f64 = 1e-12;
pub const PIXEL_MIN: f64 = 0.0;
pub const PIXEL_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Bim,
    MiFgsm,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Fgsm, AttackKind::Bim, AttackKind::MiFgsm];

    pub fn tag(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::MiFgsm => "mifgsm",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "bim" => Ok(AttackKind::Bim),
            "mifgsm" | "mi-fgsm" => Ok(AttackKind::MiFgsm),
            other => Err(Error::Usage(format!("unknown attack {other:?} (expected fgsm, bim or mifgsm)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// Iteration count `n`; ignored by FGSM.
    pub iterations: usize,
    /// Momentum decay `μ`; only used by MI-FGSM.
    pub momentum: f64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, epsilon: f64) -> Self {
        Self { kind, epsilon, iterations: DEFAULT_ITERATIONS, momentum: DEFAULT_MOMENTUM }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be finite and ≥ 0, got {}", self.epsilon)));
        }
        if self.iterations == 0 && self.kind != AttackKind::Fgsm {
            return Err(Error::Config(format!("{} needs at least one iteration", self.kind)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Anything that can produce `∇_x J(x, label)`.
pub trait InputGradient: Sync {
    fn input_gradient(&self, x: &Tensor, label: usize) -> Result<Tensor>;
}

/// A network queried for input gradients through one feedback route.
/// Querying never modifies the network.
#[derive(Debug, Clone, Copy)]
pub struct GradientOracle<'a> {
    pub network: &'a Network,
    pub mode: FeedbackMode,
}

impl<'a> GradientOracle<'a> {
    pub fn new(network: &'a Network, mode: FeedbackMode) -> Self {
        Self { network, mode }
    }
}

impl InputGradient for GradientOracle<'_> {
    fn input_gradient(&self, x: &Tensor, label: usize) -> Result<Tensor> {
        self.network.loss_and_input_grad(x, label, self.mode).map(|(_, g)| g)
    }
}

fn check_pixels(x: &Tensor) -> Result<()> {
    match x.data().iter().find(|v| !(PIXEL_MIN..=PIXEL_MAX).contains(*v)) {
        Some(v) => Err(Error::Contract { op: "attack", detail: format!("input pixel {v} outside [0, 1]") }),
        None => Ok(()),
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if eps >= 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("epsilon must be finite and ≥ 0, got {eps}")))
    }
}

/// `[x − ε, x + ε] ∩ [0, 1]`.
fn epsilon_ball(x: &Tensor, eps: f64) -> (Tensor, Tensor) {
    (x.map(|v| (v - eps).max(PIXEL_MIN)), x.map(|v| (v + eps).min(PIXEL_MAX)))
}

fn signed_step(x: &Tensor, direction: &Tensor, step: f64) -> Tensor {
    let s = tensor::sign(direction);
    let data = x.data().iter().zip(s.data()).map(|(&v, &sg)| v + step * sg).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// One signed-gradient step of size `ε`, clipped to valid pixels.
pub fn fgsm(oracle: &impl InputGradient, x: &Tensor, label: usize, eps: f64) -> Result<Tensor> {
    check_epsilon(eps)?;
    check_pixels(x)?;
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let g = oracle.input_gradient(x, label)?;
    Ok(signed_step(x, &g, eps).map(|v| v.clamp(PIXEL_MIN, PIXEL_MAX)))
}

/// `n` signed-gradient steps of size `ε/n`, each clipped to the ε-ball.
pub fn bim(oracle: &impl InputGradient, x: &Tensor, label: usize, eps: f64, n: usize) -> Result<Tensor> {
    check_epsilon(eps)?;
    if n == 0 {
        return Err(Error::Config("bim needs at least one iteration".into()));
    }
    check_pixels(x)?;
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let alpha = eps / n as f64;
    let (lo, hi) = epsilon_ball(x, eps);
    let mut xt = x.clone();
    for _ in 0..n {
        let g = oracle.input_gradient(&xt, label)?;
        xt = tensor::clip_box(&signed_step(&xt, &g, alpha), &lo, &hi)?;
    }
    Ok(xt)
}

/// Running momentum `g ← μ·g + ∇/‖∇‖₁` with the zero-gradient guard.
#[derive(Debug, Clone)]
pub struct MomentumAccumulator {
    momentum: f64,
    velocity: Option<Tensor>,
}

impl MomentumAccumulator {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: None }
    }

    pub fn push(&mut self, grad: &Tensor) -> Result<&Tensor> {
        let norm = tensor::l1_norm(grad);
        let inv = if norm < ZERO_GRADIENT_L1 { 0.0 } else { 1.0 / norm };
        let next = match self.velocity.take() {
            None => grad.map(|v| v * inv),
            Some(prev) => prev.zip_map(grad, "mifgsm", |p, v| self.momentum * p + v * inv)?,
        };
        Ok(self.velocity.insert(next))
    }

    pub fn velocity(&self) -> Option<&Tensor> {
        self.velocity.as_ref()
    }
}

/// Momentum-accumulated signed steps of size `ε/n`, each clipped to the ε-ball.
pub fn mifgsm(oracle: &impl InputGradient, x: &Tensor, label: usize, eps: f64, n: usize, mu: f64) -> Result<Tensor> {
    check_epsilon(eps)?;
    if n == 0 {
        return Err(Error::Config("mifgsm needs at least one iteration".into()));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Config(format!("momentum must lie in [0, 1], got {mu}")));
    }
    check_pixels(x)?;
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let alpha = eps / n as f64;
    let (lo, hi) = epsilon_ball(x, eps);
    let mut acc = MomentumAccumulator::new(mu);
    let mut xt = x.clone();
    for _ in 0..n {
        let g = oracle.input_gradient(&xt, label)?;
        let v = acc.push(&g)?;
        xt = tensor::clip_box(&signed_step(&xt, v, alpha), &lo, &hi)?;
    }
    Ok(xt)
}

pub fn run_attack(oracle: &impl InputGradient, config: &AttackConfig, x: &Tensor, label: usize) -> Result<Tensor> {
    match config.kind {
        AttackKind::Fgsm => fgsm(oracle, x, label, config.epsilon),
        AttackKind::Bim => bim(oracle, x, label, config.epsilon, config.iterations),
        AttackKind::MiFgsm => mifgsm(oracle, x, label, config.epsilon, config.iterations, config.momentum),
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Perturbed images with the original labels.
    pub adversarial: LabeledImageSet,
    /// `true` where the oracle's network misclassifies the perturbed image.
    pub success: Vec<bool>,
}

impl AttackOutcome {
    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }
}

/// Perturbs every item of `set`, returning only the adversarial images.
pub fn perturb_set(oracle: &impl InputGradient, config: &AttackConfig, set: &LabeledImageSet) -> Result<LabeledImageSet> {
    config.validate()?;
    let images: Vec<Tensor> = set
        .images()
        .par_iter()
        .zip(set.labels().par_iter())
        .map(|(x, &y)| run_attack(oracle, config, x, y))
        .collect::<Result<_>>()?;
    set.with_images(format!("{}-{}-eps{}", set.name(), config.kind, config.epsilon), images)
}

pub fn attack_batch(oracle: &GradientOracle<'_>, config: &AttackConfig, set: &LabeledImageSet) -> Result<AttackOutcome> {
    let adversarial = perturb_set(oracle, config, set)?;
    let preds = crate::trainer::predictions(oracle.network, &adversarial)?;
    let success = preds.iter().zip(adversarial.labels()).map(|(p, l)| p != l).collect();
    Ok(AttackOutcome { adversarial, success })
}
