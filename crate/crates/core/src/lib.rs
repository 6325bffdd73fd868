//! Core numerics for uncertainty-aware feature distillation.
//!
//! `no_std` (with `alloc`): a small reverse-mode tensor engine, teacher and
//! student pyramid networks, Monte-Carlo dropout estimation of teacher
//! knowledge uncertainty, extraction/transfer losses, a synthetic
//! dense-prediction dataset and optimizers. IO lives in `uet-harness`.
#![no_std]

extern crate alloc;

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Eager, Exec, Graph, Tensor, Var};
pub mod digest;
pub mod model;
pub mod uncertainty;
pub mod distill;
pub mod data;
pub mod optim;
pub mod train;

pub use model::{Adapter, DetNet, FeaturePyramid, Parametrized, Pyramid, PyramidSpec, Role};
pub use uncertainty::{RatioSchedule, RatioStrategy, UncertaintyEstimate};
pub use distill::{DistillConfig, Distance, Extraction, KnowledgeSource};
