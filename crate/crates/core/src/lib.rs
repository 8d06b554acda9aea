//! Backpropagation and feedback-alignment training of small convolutional
//! networks, gradient-based adversarial attacks, and the experiment harness
//! that compares how the two training rules hold up under attack.

pub mod attacks;
pub mod checkpoint;
mod codec;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod layers;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use attacks::{AttackConfig, AttackKind, GradientOracle, InputGradient};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta};
pub use datasets::{DataPaths, DatasetKind, LabeledImageSet};
pub use error::{Error, Result};
pub use harness::{Direction, Report, ReportFormat, SweepConfig, SweepReport, TransferReport};
pub use layers::{Activation, FeedbackMode, LayerSpec};
pub use network::{build_lenet, Network, NetworkSpec};
pub use rng::Rng;
pub use tensor::Tensor;
pub use trainer::{EpochMetrics, Metrics, TrainConfig};
