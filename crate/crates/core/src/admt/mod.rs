//! Dual-teacher semi-supervised training: teacher scheduling, pseudo-label
//! fusion, losses and the training loop.

pub mod fusion;
pub mod loss;
pub mod rpa;
pub mod train;

pub use fusion::{ccm_fuse, entropy, entropy_ensemble, fuse, Ensembling, PseudoLabelBatch};
pub use loss::{dice_ce_loss, lambda_t, LossWeights};
pub use rpa::{FixedPeriod, PeriodSource, RpaState, StrongAug, Teacher, UniformPeriods};
pub use train::{evaluate, predict, Mode, PeriodLimit, StepReport, TrainConfig, Trainer};
