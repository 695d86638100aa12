//! Draft-then-verify autotuning of tiled tensor-program schedules.
//!
//! An analytical draft model prunes the tiling space of each operator to a
//! small candidate set, a learned pattern-aware ranker picks the candidates
//! worth measuring, and a momentum-updated Siamese copy of the ranker carries
//! what was learned across tuning rounds and platforms. Measurements come
//! from a simulated device so every search-quality property is testable.

pub mod adaptation;
pub mod analyzer;
pub mod bench;
pub mod engine;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod problem;
pub mod schedule;
pub mod sim;
pub mod seeding;

pub use error::{Error, Result};
