//! Robustness experiments: ε-sweeps of adversarial accuracy, transfer
//! between the backprop- and feedback-alignment-trained networks, and
//! gradient-angle traces.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttackKind, GradientOracle};
use crate::datasets::{self, LabeledImageSet};
use crate::error::{Error, Result};
use crate::layers::{FeedbackMode, ParamGrads};
use crate::network::Network;
use crate::tensor::Tensor;
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    pub attacks: Vec<AttackKind>,
    pub iterations: usize,
    pub momentum: f64,
    /// Use only the first `n` test items per cell.
    pub sample_cap: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            epsilons: default_epsilon_grid(),
            attacks: AttackKind::ALL.to_vec(),
            iterations: attacks::DEFAULT_ITERATIONS,
            momentum: attacks::DEFAULT_MOMENTUM,
            sample_cap: Some(1000),
        }
    }
}

/// `0.0, 0.1, …, 1.0`.
pub fn default_epsilon_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.first() != Some(&0.0) {
            return Err(Error::Config("epsilon grid must start at 0".into()));
        }
        if self.epsilons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("epsilon grid must be strictly ascending".into()));
        }
        if self.attacks.is_empty() {
            return Err(Error::Config("no attacks selected".into()));
        }
        if self.sample_cap == Some(0) {
            return Err(Error::Config("sample cap must be positive".into()));
        }
        for &eps in &self.epsilons {
            self.attack(AttackKind::Fgsm, eps).validate()?;
        }
        self.attack(AttackKind::MiFgsm, 0.0).validate()
    }

    pub fn attack(&self, kind: AttackKind, epsilon: f64) -> AttackConfig {
        AttackConfig { kind, epsilon, iterations: self.iterations, momentum: self.momentum }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Examples crafted on the backprop network, scored on the FA network.
    #[serde(rename = "bp->fa")]
    BpToFa,
    #[serde(rename = "fa->bp")]
    FaToBp,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::BpToFa => "bp->fa",
            Direction::FaToBp => "fa->bp",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bp->fa" => Ok(Direction::BpToFa),
            "fa->bp" => Ok(Direction::FaToBp),
            other => Err(Error::Usage(format!("unknown transfer direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub attack: AttackKind,
    pub gradient_mode: FeedbackMode,
    /// Training mode of the attacked network.
    pub target: FeedbackMode,
    pub epsilon: f64,
    pub adversarial_accuracy: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub attack: AttackKind,
    pub direction: Direction,
    pub epsilon: f64,
    pub accuracy: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleRow {
    pub layer: String,
    pub step: usize,
    /// `None` when either gradient has zero norm.
    pub angle_degrees: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferReport {
    pub rows: Vec<TransferRow>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AngleReport {
    pub rows: Vec<AngleRow>,
}

impl SweepReport {
    pub fn accuracy(&self, attack: AttackKind, target: FeedbackMode, epsilon: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.attack == attack && r.target == target && (r.epsilon - epsilon).abs() < 1e-9)
            .map(|r| r.adversarial_accuracy)
    }
}

impl TransferReport {
    pub fn accuracy(&self, attack: AttackKind, direction: Direction, epsilon: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.attack == attack && r.direction == direction && (r.epsilon - epsilon).abs() < 1e-9)
            .map(|r| r.accuracy)
    }
}

/// One finished (attack, ε) cell, for progress reporting.
#[derive(Debug, Clone, Copy)]
pub struct CellSummary {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub bp_self: f64,
    pub fa_self: f64,
    pub bp_to_fa: f64,
    pub fa_to_bp: f64,
}

fn check_pair(bp: &Network, fa: &Network, set: &LabeledImageSet) -> Result<()> {
    if bp.spec() != fa.spec() {
        return Err(Error::Config("the backprop and feedback-alignment checkpoints have different architectures".into()));
    }
    if set.image_shape() != bp.spec().input_shape.as_slice() {
        return Err(Error::Config(format!(
            "test images {:?} do not fit network input {:?}",
            set.image_shape(),
            bp.spec().input_shape
        )));
    }
    if set.is_empty() {
        return Err(Error::EmptyDataset { op: "sweep" });
    }
    Ok(())
}

/// Runs every (attack, ε) cell once. Each network is attacked with its own
/// feedback mode; the same adversarial sets are then scored on the other
/// network for the transfer report.
pub fn robustness_sweep(
    bp: &Network,
    fa: &Network,
    test_set: &LabeledImageSet,
    cfg: &SweepConfig,
    mut on_cell: impl FnMut(&CellSummary),
) -> Result<(SweepReport, TransferReport)> {
    cfg.validate()?;
    check_pair(bp, fa, test_set)?;
    let set = match cfg.sample_cap {
        Some(n) => test_set.head(n),
        None => test_set.clone(),
    };
    let n = set.len();
    let bp_oracle = GradientOracle::new(bp, FeedbackMode::WeightTransport);
    let fa_oracle = GradientOracle::new(fa, FeedbackMode::FeedbackAlignment);
    let mut sweep = Vec::new();
    let mut transfer = Vec::new();
    for &attack in &cfg.attacks {
        for &epsilon in &cfg.epsilons {
            let acfg = cfg.attack(attack, epsilon);
            let adv_bp = attacks::perturb_set(&bp_oracle, &acfg, &set)?;
            let adv_fa = attacks::perturb_set(&fa_oracle, &acfg, &set)?;
            let cell = CellSummary {
                attack,
                epsilon,
                bp_self: trainer::evaluate_accuracy(bp, &adv_bp)?,
                fa_self: trainer::evaluate_accuracy(fa, &adv_fa)?,
                bp_to_fa: trainer::evaluate_accuracy(fa, &adv_bp)?,
                fa_to_bp: trainer::evaluate_accuracy(bp, &adv_fa)?,
            };
            for (mode, acc) in [(FeedbackMode::WeightTransport, cell.bp_self), (FeedbackMode::FeedbackAlignment, cell.fa_self)] {
                sweep.push(SweepRow {
                    attack,
                    gradient_mode: mode,
                    target: mode,
                    epsilon,
                    adversarial_accuracy: acc,
                    n_samples: n,
                });
            }
            for (direction, accuracy) in [(Direction::BpToFa, cell.bp_to_fa), (Direction::FaToBp, cell.fa_to_bp)] {
                transfer.push(TransferRow { attack, direction, epsilon, accuracy, n_samples: n });
            }
            on_cell(&cell);
        }
    }
    sweep.sort_by(|a, b| {
        (a.attack, a.target).cmp(&(b.attack, b.target)).then(a.epsilon.total_cmp(&b.epsilon))
    });
    transfer.sort_by(|a, b| {
        (a.attack, a.direction).cmp(&(b.attack, b.direction)).then(a.epsilon.total_cmp(&b.epsilon))
    });
    Ok((SweepReport { rows: sweep }, TransferReport { rows: transfer }))
}

/// Self-attack accuracy for both networks at every (attack, ε).
pub fn epsilon_sweep(bp: &Network, fa: &Network, test_set: &LabeledImageSet, cfg: &SweepConfig) -> Result<SweepReport> {
    robustness_sweep(bp, fa, test_set, cfg, |_| {}).map(|(s, _)| s)
}

/// Accuracy of each network on examples crafted against the other.
pub fn transfer_sweep(bp: &Network, fa: &Network, test_set: &LabeledImageSet, cfg: &SweepConfig) -> Result<TransferReport> {
    robustness_sweep(bp, fa, test_set, cfg, |_| {}).map(|(_, t)| t)
}

/// Angle in degrees between two flattened gradients, or `None` if either is zero.
///
/// Uses `2·atan2(‖â − b̂‖, ‖â + b̂‖)` on the unit vectors, which is exact for
/// parallel and anti-parallel inputs where `acos` of the cosine is not.
pub fn angle_between(a: &Tensor, b: &Tensor) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim("gradient_angle", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Ok(None);
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Ok(Some(2.0 * diff.sqrt().atan2(sum.sqrt()).to_degrees()))
}

/// Per-layer angle between the weight gradients of two gradient sets.
pub fn gradient_angle(bp_grads: &[Option<ParamGrads>], fa_grads: &[Option<ParamGrads>]) -> Result<Vec<Option<f64>>> {
    if bp_grads.len() != fa_grads.len() {
        return Err(Error::dim("gradient_angle", format!("{} vs {} layers", bp_grads.len(), fa_grads.len())));
    }
    bp_grads
        .iter()
        .zip(fa_grads)
        .filter_map(|pair| match pair {
            (Some(a), Some(b)) => {
                if a.weights.shape() != b.weights.shape() {
                    return Some(Err(Error::dim(
                        "gradient_angle",
                        format!("{:?} vs {:?}", a.weights.shape(), b.weights.shape()),
                    )));
                }
                Some(angle_between(&a.weights, &b.weights))
            }
            (None, None) => None,
            _ => Some(Err(Error::dim("gradient_angle", "gradient sets do not line up"))),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AngleTraceConfig {
    /// Number of SGD steps to run.
    pub steps: usize,
    /// Record angles every `every` steps, starting at step 0.
    pub every: usize,
    /// Force `B := W` before every step, which makes every angle 0°.
    pub substitute_feedback: bool,
}

/// Trains under feedback alignment and, on the current batch, compares the
/// weight gradients the FA route produces with the backprop ones.
pub fn angle_trace(
    network: Network,
    train: &TrainConfig,
    set: &LabeledImageSet,
    cfg: &AngleTraceConfig,
) -> Result<AngleReport> {
    train.validate()?;
    if cfg.every == 0 {
        return Err(Error::Config("angle interval must be at least 1".into()));
    }
    if set.is_empty() {
        return Err(Error::EmptyDataset { op: "angle_trace" });
    }
    let names = network.spec().parameter_names();
    let mut network = network;
    let mut rows = Vec::new();
    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.steps {
        for batch in datasets::batches(set, train.batch_size, trainer::epoch_seed(train.shuffle_seed, epoch))? {
            if step >= cfg.steps {
                break;
            }
            if cfg.substitute_feedback {
                network = network.with_feedback_from_weights();
            }
            let (_, fa) = trainer::batch_gradients(&network, &batch.images, &batch.labels, FeedbackMode::FeedbackAlignment)?;
            if step % cfg.every == 0 {
                let (_, bp) = trainer::batch_gradients(&network, &batch.images, &batch.labels, FeedbackMode::WeightTransport)?;
                for ((_, name), angle) in names.iter().zip(gradient_angle(&bp, &fa)?) {
                    rows.push(AngleRow { layer: name.clone(), step, angle_degrees: angle });
                }
            }
            network.sgd_step(&fa, train.learning_rate)?;
            step += 1;
        }
        epoch += 1;
    }
    Ok(AngleReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    JsonLines,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" | "json-lines" => Ok(ReportFormat::JsonLines),
            other => Err(Error::Usage(format!("unknown report format {other:?}"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::JsonLines => "jsonl",
        }
    }
}

fn fixed6(v: f64) -> String {
    format!("{v:.6}")
}

fn round6(v: f64) -> f64 {
    fixed6(v).parse().expect("formatted float parses")
}

/// Tabular report with a fixed column order.
pub trait Report {
    type Row: Serialize + for<'de> Deserialize<'de>;

    const HEADER: &'static str;

    fn rows(&self) -> &[Self::Row];
    fn from_rows(rows: Vec<Self::Row>) -> Self;
    fn csv_fields(row: &Self::Row) -> Vec<String>;
    fn parse_fields(fields: &[&str]) -> Result<Self::Row>;
    fn rounded(row: &Self::Row) -> Self::Row;

    fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for row in self.rows() {
            let _ = writeln!(out, "{}", Self::csv_fields(row).join(","));
        }
        out
    }

    fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for row in self.rows() {
            let line = serde_json::to_string(&Self::rounded(row)).expect("report rows serialize");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    fn parse_csv(text: &str) -> Result<Self>
    where
        Self: Sized,
    {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::parse("report", format!("expected header {:?}", Self::HEADER)));
        }
        let width = Self::HEADER.split(',').count();
        let rows = lines
            .enumerate()
            .map(|(i, line)| {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != width {
                    return Err(Error::parse("report", format!("line {}: {} fields, expected {width}", i + 2, fields.len())));
                }
                Self::parse_fields(&fields)
            })
            .collect::<Result<_>>()?;
        Ok(Self::from_rows(rows))
    }

    fn parse_json_lines(text: &str) -> Result<Self>
    where
        Self: Sized,
    {
        let rows = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::parse("report", e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self::from_rows(rows))
    }
}

fn parse_num<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::parse("report", format!("bad {what} {s:?}")))
}

impl Report for SweepReport {
    type Row = SweepRow;
    const HEADER: &'static str = "attack,gradient_mode,target,epsilon,adversarial_accuracy,n_samples";

    fn rows(&self) -> &[SweepRow] {
        &self.rows
    }

    fn from_rows(rows: Vec<SweepRow>) -> Self {
        Self { rows }
    }

    fn csv_fields(r: &SweepRow) -> Vec<String> {
        vec![
            r.attack.to_string(),
            r.gradient_mode.to_string(),
            r.target.to_string(),
            fixed6(r.epsilon),
            fixed6(r.adversarial_accuracy),
            r.n_samples.to_string(),
        ]
    }

    fn parse_fields(f: &[&str]) -> Result<SweepRow> {
        Ok(SweepRow {
            attack: f[0].parse()?,
            gradient_mode: f[1].parse()?,
            target: f[2].parse()?,
            epsilon: parse_num(f[3], "epsilon")?,
            adversarial_accuracy: parse_num(f[4], "accuracy")?,
            n_samples: parse_num(f[5], "sample count")?,
        })
    }

    fn rounded(r: &SweepRow) -> SweepRow {
        SweepRow { epsilon: round6(r.epsilon), adversarial_accuracy: round6(r.adversarial_accuracy), ..r.clone() }
    }
}

impl Report for TransferReport {
    type Row = TransferRow;
    const HEADER: &'static str = "attack,direction,epsilon,accuracy,n_samples";

    fn rows(&self) -> &[TransferRow] {
        &self.rows
    }

    fn from_rows(rows: Vec<TransferRow>) -> Self {
        Self { rows }
    }

    fn csv_fields(r: &TransferRow) -> Vec<String> {
        vec![r.attack.to_string(), r.direction.to_string(), fixed6(r.epsilon), fixed6(r.accuracy), r.n_samples.to_string()]
    }

    fn parse_fields(f: &[&str]) -> Result<TransferRow> {
        Ok(TransferRow {
            attack: f[0].parse()?,
            direction: f[1].parse()?,
            epsilon: parse_num(f[2], "epsilon")?,
            accuracy: parse_num(f[3], "accuracy")?,
            n_samples: parse_num(f[4], "sample count")?,
        })
    }

    fn rounded(r: &TransferRow) -> TransferRow {
        TransferRow { epsilon: round6(r.epsilon), accuracy: round6(r.accuracy), ..r.clone() }
    }
}

pub const UNDEFINED_ANGLE: &str = "undefined";

impl Report for AngleReport {
    type Row = AngleRow;
    const HEADER: &'static str = "layer,step,angle_degrees";

    fn rows(&self) -> &[AngleRow] {
        &self.rows
    }

    fn from_rows(rows: Vec<AngleRow>) -> Self {
        Self { rows }
    }

    fn csv_fields(r: &AngleRow) -> Vec<String> {
        let angle = r.angle_degrees.map_or_else(|| UNDEFINED_ANGLE.to_string(), fixed6);
        vec![r.layer.clone(), r.step.to_string(), angle]
    }

    fn parse_fields(f: &[&str]) -> Result<AngleRow> {
        let angle_degrees = if f[2] == UNDEFINED_ANGLE { None } else { Some(parse_num(f[2], "angle")?) };
        Ok(AngleRow { layer: f[0].to_string(), step: parse_num(f[1], "step")?, angle_degrees })
    }

    fn rounded(r: &AngleRow) -> AngleRow {
        AngleRow { angle_degrees: r.angle_degrees.map(round6), ..r.clone() }
    }
}

pub fn emit_report<R: Report>(report: &R, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::JsonLines => report.to_json_lines(),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic_gaussians;
    use crate::layers::{Activation, LayerSpec};
    use crate::network::NetworkSpec;
    use crate::rng::Rng;

    fn t(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec()).unwrap()
    }

    fn dense_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![4],
            classes: 2,
            layers: vec![
                LayerSpec::Dense { inputs: 4, outputs: 6 },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::Dense { inputs: 6, outputs: 2 },
            ],
        }
    }

    #[test]
    fn angle_hand_cases() {
        let a = t(&[1.0, 2.0, -3.0]);
        assert_eq!(angle_between(&a, &a).unwrap(), Some(0.0));
        assert_eq!(angle_between(&a, &a.map(|v| -v)).unwrap(), Some(180.0));
        let ortho = angle_between(&t(&[1.0, 1.0]), &t(&[1.0, -1.0])).unwrap().unwrap();
        assert!((ortho - 90.0).abs() < 1e-12);
        assert_eq!(angle_between(&a, &Tensor::zeros(&[3])).unwrap(), None);
        assert!(angle_between(&a, &t(&[1.0])).is_err());
    }

    #[test]
    fn default_grid_has_eleven_points() {
        let g = default_epsilon_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[3], 0.3);
        assert_eq!(*g.last().unwrap(), 1.0);
    }

    #[test]
    fn sweep_config_validation() {
        let mut cfg = SweepConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.epsilons = vec![0.1, 0.2];
        assert!(cfg.validate().is_err());
        cfg.epsilons = vec![0.0, 0.2, 0.1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sweep_row_count_and_clean_rows() {
        let set = synthetic_gaussians(&mut Rng::new(1), 10, 4, 6.0).unwrap();
        let bp = Network::init(dense_spec(), 1, 2).unwrap();
        let fa = Network::init(dense_spec(), 3, 4).unwrap();
        let cfg = SweepConfig { iterations: 2, sample_cap: None, ..SweepConfig::default() };
        let (sweep, transfer) = robustness_sweep(&bp, &fa, &set, &cfg, |_| {}).unwrap();
        assert_eq!(sweep.rows.len(), 66);
        assert_eq!(transfer.rows.len(), 66);
        let bp_clean = trainer::evaluate_accuracy(&bp, &set).unwrap();
        let fa_clean = trainer::evaluate_accuracy(&fa, &set).unwrap();
        for attack in AttackKind::ALL {
            assert_eq!(sweep.accuracy(attack, FeedbackMode::WeightTransport, 0.0), Some(bp_clean));
            assert_eq!(sweep.accuracy(attack, FeedbackMode::FeedbackAlignment, 0.0), Some(fa_clean));
            assert_eq!(transfer.accuracy(attack, Direction::BpToFa, 0.0), Some(fa_clean));
            assert_eq!(transfer.accuracy(attack, Direction::FaToBp, 0.0), Some(bp_clean));
        }
        // Sorted by (attack, mode, ε).
        assert_eq!(sweep.rows[0].attack, AttackKind::Fgsm);
        assert_eq!(sweep.rows[10].epsilon, 1.0);
        assert_eq!(sweep.rows[11].target, FeedbackMode::FeedbackAlignment);
    }

    #[test]
    fn sweep_rejects_mismatched_architectures() {
        let set = synthetic_gaussians(&mut Rng::new(1), 3, 4, 6.0).unwrap();
        let bp = Network::init(dense_spec(), 1, 2).unwrap();
        let mut other = dense_spec();
        other.layers[0] = LayerSpec::Dense { inputs: 4, outputs: 5 };
        other.layers[2] = LayerSpec::Dense { inputs: 5, outputs: 2 };
        let fa = Network::init(other, 1, 2).unwrap();
        assert!(matches!(epsilon_sweep(&bp, &fa, &set, &SweepConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn substituted_fa_column_equals_bp_column() {
        let set = synthetic_gaussians(&mut Rng::new(2), 8, 4, 2.0).unwrap();
        let bp = Network::init(dense_spec(), 5, 6).unwrap();
        let fa = bp.with_feedback_from_weights();
        let cfg = SweepConfig { iterations: 3, epsilons: vec![0.0, 0.2, 0.6], sample_cap: None, ..SweepConfig::default() };
        let report = epsilon_sweep(&bp, &fa, &set, &cfg).unwrap();
        for attack in AttackKind::ALL {
            for &e in &cfg.epsilons {
                assert_eq!(
                    report.accuracy(attack, FeedbackMode::WeightTransport, e),
                    report.accuracy(attack, FeedbackMode::FeedbackAlignment, e)
                );
            }
        }
    }

    #[test]
    fn angle_trace_substitution_and_layers() {
        let set = synthetic_gaussians(&mut Rng::new(3), 20, 4, 4.0).unwrap();
        let net = Network::init(dense_spec(), 7, 8).unwrap();
        let train = TrainConfig { batch_size: 8, ..TrainConfig::new(FeedbackMode::FeedbackAlignment, 1) };
        let cfg = AngleTraceConfig { steps: 6, every: 2, substitute_feedback: true };
        let report = angle_trace(net.clone(), &train, &set, &cfg).unwrap();
        assert_eq!(report.rows.len(), 3 * 2);
        assert!(report.rows.iter().all(|r| r.angle_degrees == Some(0.0)));
        let cfg = AngleTraceConfig { substitute_feedback: false, ..cfg };
        let report = angle_trace(net, &train, &set, &cfg).unwrap();
        assert_eq!(report.rows[0].step, 0);
        // The first layer's delta arrives through B, so its gradient leaves the backprop direction.
        let first = report.rows.iter().find(|r| r.layer == "dense1").unwrap();
        assert!(first.angle_degrees.unwrap() > 0.0);
        // The output layer sees the same delta in both modes.
        assert!(report.rows.iter().filter(|r| r.layer == "dense2").all(|r| r.angle_degrees == Some(0.0)));
    }

    #[test]
    fn zero_gradients_give_undefined_rows() {
        let g = ParamGrads { weights: Tensor::zeros(&[2, 2]), bias: Tensor::zeros(&[2]) };
        let angles = gradient_angle(&[Some(g.clone()), None], &[Some(g), None]).unwrap();
        assert_eq!(angles, vec![None]);
        let report = AngleReport { rows: vec![AngleRow { layer: "conv1".into(), step: 0, angle_degrees: None }] };
        assert_eq!(report.to_csv(), "layer,step,angle_degrees\nconv1,0,undefined\n");
    }

    #[test]
    fn csv_and_json_round_trip() {
        let report = SweepReport {
            rows: vec![
                SweepRow {
                    attack: AttackKind::MiFgsm,
                    gradient_mode: FeedbackMode::FeedbackAlignment,
                    target: FeedbackMode::FeedbackAlignment,
                    epsilon: 0.3,
                    adversarial_accuracy: 0.123456,
                    n_samples: 1000,
                },
                SweepRow {
                    attack: AttackKind::Fgsm,
                    gradient_mode: FeedbackMode::WeightTransport,
                    target: FeedbackMode::WeightTransport,
                    epsilon: 0.0,
                    adversarial_accuracy: 1.0,
                    n_samples: 5,
                },
            ],
        };
        assert_eq!(SweepReport::parse_csv(&report.to_csv()).unwrap(), report);
        assert_eq!(SweepReport::parse_json_lines(&report.to_json_lines()).unwrap(), report);
        let transfer = TransferReport {
            rows: vec![TransferRow { attack: AttackKind::Bim, direction: Direction::FaToBp, epsilon: 0.5, accuracy: 0.25, n_samples: 9 }],
        };
        assert_eq!(TransferReport::parse_csv(&transfer.to_csv()).unwrap(), transfer);
        assert!(transfer.to_json_lines().contains("\"direction\":\"fa->bp\""));
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(SweepReport::default().to_csv(), format!("{}\n", SweepReport::HEADER));
        assert_eq!(TransferReport::default().to_csv(), "attack,direction,epsilon,accuracy,n_samples\n");
    }

    #[test]
    fn emit_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let report = TransferReport::default();
        emit_report(&report, dir.path().join("t.csv"), ReportFormat::Csv).unwrap();
        emit_report(&report, dir.path().join("t.jsonl"), ReportFormat::JsonLines).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("t.jsonl")).unwrap(), "");
    }
}
