//! Generalized category discovery over fixed embedding vectors.
//!
//! Labeled instances cover a subset of the categories; unlabeled instances
//! mix those with novel ones. A small encoder head is pretrained on labeled
//! data, then trained with prototype transfer (known-category prototypes
//! calibrate cluster prototypes) and alignment losses between instances,
//! prototypes and augmented views.
//!
//! ```no_run
//! use tan_gcd::{synthetic, trainer};
//!
//! let (ds, _truth) = synthetic::make_synthetic(&synthetic::SyntheticConfig::acceptance(7))?;
//! let cfg = trainer::TrainConfig::default();
//! let (head, _) = trainer::pretrain(trainer::init_head(&ds, &cfg)?, &ds, &cfg)?;
//! let out = trainer::train(head, &ds, &cfg, None)?;
//! println!("{:?}", out.final_metrics());
//! # Ok::<(), tan_gcd::Error>(())
//! ```

pub mod assignment;
pub mod clustering;
pub mod dataset;
pub mod encoder;
mod error;
pub mod evaluation;
pub mod losses;
pub mod manifest;
pub mod prototypes;
pub mod synthetic;
pub mod trainer;
pub mod vector;

pub use dataset::{CategoryId, Dataset, Instance, Split};
pub use encoder::EncoderHead;
pub use error::{Error, Result};
pub use evaluation::MetricsReport;
pub use prototypes::{PrototypeKind, PrototypeSet};
pub use trainer::{ClusterCount, TrainConfig, Variant};
