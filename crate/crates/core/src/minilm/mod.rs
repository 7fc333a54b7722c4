//! Miniature decoder-only transformer, synthetic corpora, adapter training
//! and evaluation.

pub mod corpus;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod train;

pub use corpus::{generate_corpus, Dataset, DatasetKind, Example, SyntheticLanguage};
pub use eval::{evaluate, Metric};
pub use model::{AdapterPath, MiniLm, MiniLmConfig};
pub use train::{finite_difference_check, train_adapter, TrainOutcome, TrainSpec};
