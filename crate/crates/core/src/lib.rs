//! Deep hashing with semantic-aware adversarial training.

mod binio;
pub mod attack;
pub mod dmfl;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod hashmodel;
pub mod netcore;
pub mod oracle;
pub mod saat;

pub use error::{Error, Result};
pub use attack::{AdversarialBatch, AlphaSchedule, AttackConfig, AttackMode};
pub use dmfl::{MainstayCache, MainstayCode};
pub use evalkit::{EvalReport, RetrievalIndex};
pub use harness::{run_pipeline, Condition, DatasetFile, ExperimentConfig, RunReport, Split, Stage};
pub use hashmodel::{CodeDatabase, HashCode, HashModel, LabelVector};
pub use netcore::NetworkParams;
pub use saat::TrainConfig;
