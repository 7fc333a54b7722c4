//! Compose parameter-efficient adapters by weight arithmetic.
//!
//! Language adapters trained on unlabeled text and task adapters trained on
//! labeled data are combined element-wise (add, subtract, average) to build
//! an adapter for a language that has no labeled task data. A miniature
//! decoder-only transformer ([`minilm`]) makes every recipe runnable and
//! checkable on a laptop.

pub mod adapter;
pub mod ckpt;
pub mod compose;
pub mod error;
pub mod lang;
pub mod metrics;
pub mod minilm;
pub mod rng;
pub mod tensor;

pub use adapter::{
    checkpoint_compatible, AdapterCheckpoint, AdapterKind, AdapterModule, CheckpointMeta, KroneckerModule,
    LoraModule, MatrixRole, Objective, SiteId,
};
pub use compose::{Mode, Operands, Recipe, Space};
pub use error::{Error, Result};
pub use tensor::Matrix;
