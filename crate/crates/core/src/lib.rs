//! Anomaly-score distribution alignment for multi-class anomaly detection.
//!
//! Different object classes produce anomaly scores on different scales, so a
//! single decision threshold over a mixture of classes performs poorly even
//! when each class is well separated on its own. This crate measures that
//! effect and removes it by normalizing every score map with statistics of
//! the normal scores of its class:
//!
//! * [`align`] fits per-class statistics and applies them when class labels
//!   are known;
//! * [`cada`] trains a small head that predicts those statistics directly
//!   from image features, with no class label at any point, and a
//!   classifier alternative that predicts the class first;
//! * [`metrics`] provides exact AUROC / AP and top-fraction image scores;
//! * [`netcore`] is the minimal network engine behind the heads;
//! * [`synthbench`] generates a multi-class benchmark with a controlled
//!   score-scale mismatch and a memory-bank nearest-neighbour scorer;
//! * [`experiment`] wires the pieces into in-memory end-to-end runs.

pub mod align;
pub mod cada;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod netcore;
pub mod rng;
pub mod synthbench;
pub mod tensorio;

pub use error::{Error, ErrorKind, Result};
