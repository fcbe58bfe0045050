//! Continual real/fake classification with teacher-student distillation and a
//! block-partitioned representation loss.
//!
//! A first network is trained on task 1 and frozen as a teacher. For each new
//! task a student is cloned from the teacher and trained with
//! `α·L_S + β·L_D + γ·L_R`: cross-entropy on the new labels, tempered
//! distillation from the teacher, and a per-confidence-block squared gap between
//! teacher and student probabilities. The trained student then becomes the next
//! teacher. Baselines (fine-tuning, L2-SP, distillation only) share the same loop.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the `*F64` and
//! `*F32` aliases below name the concrete instantiations.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod continual;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod repmem;
pub mod scalar;

pub use autodiff::{OpKind, Tape, Tensor, Var};
pub use continual::{
    evaluate, train_task1, zero_shot_eval, EarlyStopping, EpochSink, FitSummary, Sgd, Strategy, StrategyKind,
    TaskSequenceState, TrainConfig,
};
pub use data::{cutmix, generate_task, SampleSet, Split, TaskDataset, TaskFamilySpec};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights};
pub use metrics::{auroc, emit_report, f1_score, ExperimentReport, TaskMetrics};
pub use network::{Network, Role};
pub use repmem::{build_memory, BlockSpec, RepresentationMemory};
pub use scalar::Scalar;

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TapeF64 = Tape<f64>;
pub type TapeF32 = Tape<f32>;
pub type NetworkF64 = Network<f64>;
pub type NetworkF32 = Network<f32>;
pub type SgdF64 = Sgd<f64>;
pub type SgdF32 = Sgd<f32>;
pub type TaskSequenceStateF64 = TaskSequenceState<f64>;
pub type TaskSequenceStateF32 = TaskSequenceState<f32>;
