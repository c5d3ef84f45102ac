//! Training-free, layer-wise pruning of audiovisual tokens in an
//! interleaved audio/video/text stream.
//!
//! - [`schedule`]: sigmoid and exponential pruning-ratio schedules, retention
//!   recurrence and `p_final` calibration.
//! - [`importance`]: query-guided scores and the plain, temporal-diversity
//!   and random-k selectors.
//! - [`intra`]: audio top-k and video temporal-redundancy pruning before the
//!   decoder.
//! - [`harness`]: a seeded toy decoder that produces attention and applies
//!   the schedule layer by layer, or replays attention from files.
//! - [`metrics`]: attention recall, retention curves, cosine histograms and
//!   the analytic cost model.

pub mod error;
pub mod exec;
pub mod formats;
pub mod harness;
pub mod importance;
pub mod intra;
pub mod matrix;
pub mod metrics;
pub mod numerics;
pub mod schedule;
pub mod sequence;

pub use error::{Error, Result};
pub use exec::Execution;
pub use matrix::Matrix;
