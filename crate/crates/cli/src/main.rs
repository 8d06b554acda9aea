mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use wtfree_core::attacks::{self, AttackConfig, AttackKind, GradientOracle};
use wtfree_core::datasets::{self, DataPaths, DatasetKind, LabeledImageSet};
use wtfree_core::harness::{self, AngleTraceConfig, ReportFormat, SweepConfig};
use wtfree_core::network::{build_lenet, Network, CIFAR10_SHAPE, MNIST_SHAPE};
use wtfree_core::{load_checkpoint, save_checkpoint, trainer, Error, FeedbackMode, Result, TrainConfig};

use config::{List, Resolver, SampleCap};

const DATA_DIR_ENV: &str = "WTFREE_DATA_DIR";

#[derive(Parser)]
#[command(name = "wtfree", version, about = "Train backprop and feedback-alignment LeNets and measure their adversarial robustness")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dataset root (default: $WTFREE_DATA_DIR, else ./data).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a LeNet with backprop or feedback alignment.
    Train(TrainArgs),
    /// Attack one checkpoint on the test split.
    Attack(AttackArgs),
    /// Self-attack accuracy of a BP and an FA checkpoint over an ε grid.
    Sweep(SweepArgs),
    /// Transfer accuracy between a BP and an FA checkpoint over an ε grid.
    Transfer(SweepArgs),
    /// Angles between FA and backprop weight gradients during FA training.
    Angles(AnglesArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    mode: Option<FeedbackMode>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Seed for the forward weights.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    feedback_seed: Option<u64>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Test items scored after each epoch: a count or `all`.
    #[arg(long)]
    samples: Option<SampleCap>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    attack: Option<AttackKind>,
    #[arg(long)]
    eps: Option<f64>,
    /// Iterations for bim and mifgsm.
    #[arg(long)]
    n: Option<usize>,
    /// Momentum for mifgsm.
    #[arg(long)]
    mu: Option<f64>,
    /// Feedback route used for the input gradient (default: the checkpoint's training mode).
    #[arg(long)]
    grad_mode: Option<FeedbackMode>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    samples: Option<SampleCap>,
}

#[derive(Args)]
struct SweepArgs {
    /// Checkpoint trained with backprop.
    #[arg(long)]
    bp: Option<PathBuf>,
    /// Checkpoint trained with feedback alignment.
    #[arg(long)]
    fa: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Comma-separated subset of fgsm,bim,mifgsm.
    #[arg(long)]
    attacks: Option<List<AttackKind>>,
    /// Comma-separated ε grid, ascending from 0.
    #[arg(long)]
    eps: Option<List<f64>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    /// Test items per (attack, ε) cell: a count or `all`.
    #[arg(long)]
    samples: Option<SampleCap>,
    /// csv or jsonl.
    #[arg(long)]
    format: Option<ReportFormat>,
}

#[derive(Args)]
struct AnglesArgs {
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    steps: Option<usize>,
    /// Record every this many steps.
    #[arg(long)]
    every: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    feedback_seed: Option<u64>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Training items to draw batches from: a count or `all`.
    #[arg(long)]
    samples: Option<SampleCap>,
    /// Overwrite B with W before every step; all angles become 0°.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    substitute_feedback: Option<bool>,
    #[arg(long)]
    format: Option<ReportFormat>,
}

/// Settings shared by every command.
struct Run {
    out: PathBuf,
    data: DataPaths,
}

impl Run {
    fn resolve(r: &mut Resolver, g: &Global) -> Result<Self> {
        let out: String = r.get("out", g.out.as_ref().map(|p| p.display().to_string()), || "runs".into())?;
        let data_dir: String = r.get("data-dir", g.data_dir.as_ref().map(|p| p.display().to_string()), || {
            std::env::var(DATA_DIR_ENV).unwrap_or_else(|_| "data".into())
        })?;
        if let Some(t) = r.get_opt::<usize>("threads", g.threads)? {
            if t == 0 {
                return Err(Error::Config("threads must be at least 1".into()));
            }
            // Fails only if a pool already exists, which cannot happen this early.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
        Ok(Self { out: PathBuf::from(out), data: DataPaths::new(data_dir) })
    }

    fn prepare(&self, r: &Resolver) -> Result<()> {
        r.finish()?;
        fs::create_dir_all(&self.out).map_err(|e| Error::Io { path: self.out.clone(), source: e })?;
        r.write_snapshot(&self.out)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn capped(set: LabeledImageSet, cap: SampleCap) -> LabeledImageSet {
    match cap.limit() {
        Some(n) => set.head(n),
        None => set,
    }
}

fn dataset_for(network: &Network) -> Result<DatasetKind> {
    match network.spec().input_shape.as_slice() {
        s if s == MNIST_SHAPE => Ok(DatasetKind::Mnist),
        s if s == CIFAR10_SHAPE => Ok(DatasetKind::Cifar10),
        s => Err(Error::Config(format!("no dataset matches network input {s:?}"))),
    }
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn train_config(
    r: &mut Resolver,
    mode: FeedbackMode,
    epochs: usize,
    lr: Option<f64>,
    batch: Option<usize>,
    seeds: [Option<u64>; 3],
) -> Result<TrainConfig> {
    let base = TrainConfig::new(mode, epochs);
    let cfg = TrainConfig {
        learning_rate: r.get("lr", lr, || base.learning_rate)?,
        batch_size: r.get("batch", batch, || base.batch_size)?,
        init_seed: r.get("seed", seeds[0], || base.init_seed)?,
        feedback_seed: r.get("feedback-seed", seeds[1], || base.feedback_seed)?,
        shuffle_seed: r.get("shuffle-seed", seeds[2], || base.shuffle_seed)?,
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(g: &Global, a: TrainArgs) -> Result<()> {
    let mut r = Resolver::new("train", g.config.as_deref())?;
    let run = Run::resolve(&mut r, g)?;
    let mode = r.get("mode", a.mode, || FeedbackMode::WeightTransport)?;
    let dataset = r.get("dataset", a.dataset, || DatasetKind::Mnist)?;
    let default_epochs = match dataset {
        DatasetKind::Mnist => TrainConfig::DEFAULT_EPOCHS_MNIST,
        DatasetKind::Cifar10 => TrainConfig::DEFAULT_EPOCHS_CIFAR10,
    };
    let epochs = r.get("epochs", a.epochs, || default_epochs)?;
    let cfg = train_config(&mut r, mode, epochs, a.lr, a.batch, [a.seed, a.feedback_seed, a.shuffle_seed])?;
    let samples = r.get("samples", a.samples, || SampleCap::All)?;
    run.prepare(&r)?;

    let train = run.data.load(dataset, true)?;
    let test = capped(run.data.load(dataset, false)?, samples);
    let spec = build_lenet(&dataset.input_shape(), 10)?;
    eprintln!("training {mode} LeNet on {dataset}: {} items, {epochs} epochs", train.len());
    let start = Instant::now();
    let network = Network::init(spec, cfg.init_seed, cfg.feedback_seed)?;
    let (ck, metrics) = trainer::train_from(network, &cfg, &train, Some(&test), |m, _| {
        eprintln!(
            "epoch {} loss {:.4} accuracy {:.4} ({:.0?})",
            m.epoch,
            m.mean_loss,
            m.clean_accuracy.unwrap_or(f64::NAN),
            start.elapsed()
        );
    })?;
    save_checkpoint(run.path("checkpoint.wtfc"), &ck)?;
    write(&run.path("metrics.csv"), &metrics.to_csv())?;
    println!("{}", run.path("checkpoint.wtfc").display());
    Ok(())
}

fn cmd_attack(g: &Global, a: AttackArgs) -> Result<()> {
    let mut r = Resolver::new("attack", g.config.as_deref())?;
    let run = Run::resolve(&mut r, g)?;
    let ck_path: String = required(r.get_opt("checkpoint", a.checkpoint.map(|p| p.display().to_string()))?, "checkpoint")?;
    let ck = load_checkpoint(&ck_path)?;
    let kind = r.get("attack", a.attack, || AttackKind::Fgsm)?;
    let epsilon = r.get("eps", a.eps, || 0.1)?;
    let cfg = AttackConfig {
        kind,
        epsilon,
        iterations: r.get("n", a.n, || attacks::DEFAULT_ITERATIONS)?,
        momentum: r.get("mu", a.mu, || attacks::DEFAULT_MOMENTUM)?,
    };
    cfg.validate()?;
    let grad_mode = r.get("grad-mode", a.grad_mode, || ck.meta.mode.unwrap_or(FeedbackMode::WeightTransport))?;
    let inferred = dataset_for(&ck.network);
    let dataset = r.get("dataset", a.dataset, || *inferred.as_ref().unwrap_or(&DatasetKind::Mnist))?;
    let samples = r.get("samples", a.samples, || SampleCap::All)?;
    run.prepare(&r)?;

    let test = capped(run.data.load(dataset, false)?, samples);
    eprintln!("{kind} eps={epsilon} on {} items with {grad_mode} gradients", test.len());
    let oracle = GradientOracle::new(&ck.network, grad_mode);
    let outcome = attacks::attack_batch(&oracle, &cfg, &test)?;
    let clean = trainer::predictions(&ck.network, &test)?;
    let adv = trainer::predictions(&ck.network, &outcome.adversarial)?;

    let mut csv = String::from("index,label,clean_prediction,adversarial_prediction,success\n");
    for (i, ((&label, (c, p)), s)) in test.labels().iter().zip(clean.iter().zip(&adv)).zip(&outcome.success).enumerate() {
        let _ = writeln!(csv, "{i},{label},{c},{p},{}", u8::from(*s));
    }
    write(&run.path("attack.csv"), &csv)?;
    datasets::write_idx_dump(&outcome.adversarial, &run.path("adversarial-images.idx"), &run.path("adversarial-labels.idx"))?;
    let meta = format!(
        "attack = {kind}\nepsilon = {epsilon}\niterations = {}\nmomentum = {}\ngrad-mode = {grad_mode}\ncheckpoint = {ck_path}\ndataset = {dataset}\nitems = {}\nsuccess-rate = {:.6}\n",
        cfg.iterations,
        cfg.momentum,
        test.len(),
        outcome.success_rate()
    );
    write(&run.path("adversarial.meta"), &meta)?;
    println!("success rate {:.6}", outcome.success_rate());
    Ok(())
}

fn cmd_sweep(g: &Global, a: SweepArgs, transfer: bool) -> Result<()> {
    let name = if transfer { "transfer" } else { "sweep" };
    let mut r = Resolver::new(name, g.config.as_deref())?;
    let run = Run::resolve(&mut r, g)?;
    let bp_path: String = required(r.get_opt("bp", a.bp.map(|p| p.display().to_string()))?, "bp")?;
    let fa_path: String = required(r.get_opt("fa", a.fa.map(|p| p.display().to_string()))?, "fa")?;
    let bp = load_checkpoint(&bp_path)?.network;
    let fa = load_checkpoint(&fa_path)?.network;
    let defaults = SweepConfig::default();
    let inferred = dataset_for(&bp);
    let dataset = r.get("dataset", a.dataset, || *inferred.as_ref().unwrap_or(&DatasetKind::Mnist))?;
    let cfg = SweepConfig {
        attacks: r.get("attacks", a.attacks, || List(defaults.attacks.clone()))?.0,
        epsilons: r.get("eps", a.eps, || List(defaults.epsilons.clone()))?.0,
        iterations: r.get("n", a.n, || defaults.iterations)?,
        momentum: r.get("mu", a.mu, || defaults.momentum)?,
        sample_cap: r.get("samples", a.samples, || SampleCap::First(1000))?.limit(),
    };
    let format = r.get("format", a.format, || ReportFormat::Csv)?;
    cfg.validate()?;
    run.prepare(&r)?;

    let test = run.data.load(dataset, false)?;
    let start = Instant::now();
    let (sweep, transfer_report) = harness::robustness_sweep(&bp, &fa, &test, &cfg, |c| {
        eprintln!(
            "{:>6} eps={:.2} bp={:.3} fa={:.3} bp->fa={:.3} fa->bp={:.3} ({:.0?})",
            c.attack.tag(),
            c.epsilon,
            c.bp_self,
            c.fa_self,
            c.bp_to_fa,
            c.fa_to_bp,
            start.elapsed()
        )
    })?;
    let path = run.path(&format!("{name}.{}", format.extension()));
    if transfer {
        harness::emit_report(&transfer_report, &path, format)?;
    } else {
        harness::emit_report(&sweep, &path, format)?;
    }
    println!("{}", path.display());
    Ok(())
}

fn cmd_angles(g: &Global, a: AnglesArgs) -> Result<()> {
    let mut r = Resolver::new("angles", g.config.as_deref())?;
    let run = Run::resolve(&mut r, g)?;
    let ck_path: Option<String> = r.get_opt("checkpoint", a.checkpoint.map(|p| p.display().to_string()))?;
    let start_net = ck_path.as_deref().map(load_checkpoint).transpose()?.map(|ck| ck.network);
    let inferred = start_net.as_ref().map(dataset_for).transpose()?;
    let dataset = r.get("dataset", a.dataset, || inferred.unwrap_or(DatasetKind::Mnist))?;
    let steps = r.get("steps", a.steps, || 100)?;
    let every = r.get("every", a.every, || 10)?;
    let train = train_config(&mut r, FeedbackMode::FeedbackAlignment, 1, a.lr, a.batch, [a.seed, a.feedback_seed, a.shuffle_seed])?;
    let samples = r.get("samples", a.samples, || SampleCap::All)?;
    let substitute_feedback = r.get("substitute-feedback", a.substitute_feedback, || false)?;
    let format = r.get("format", a.format, || ReportFormat::Csv)?;
    run.prepare(&r)?;

    let set = capped(run.data.load(dataset, true)?, samples);
    let network = match start_net {
        Some(n) => n,
        None => Network::init(build_lenet(&dataset.input_shape(), 10)?, train.init_seed, train.feedback_seed)?,
    };
    let cfg = AngleTraceConfig { steps, every, substitute_feedback };
    let report = harness::angle_trace(network, &train, &set, &cfg)?;
    let path = run.path(&format!("angles.{}", format.extension()));
    harness::emit_report(&report, &path, format)?;
    println!("{}", path.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 2,
        Error::Io { .. } => 3,
        Error::Parse { .. } | Error::VersionMismatch { .. } => 4,
        Error::Diverged { .. } => 5,
        Error::Config(_) => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match cli.command {
        Command::Train(a) => cmd_train(g, a),
        Command::Attack(a) => cmd_attack(g, a),
        Command::Sweep(a) => cmd_sweep(g, a, false),
        Command::Transfer(a) => cmd_sweep(g, a, true),
        Command::Angles(a) => cmd_angles(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
