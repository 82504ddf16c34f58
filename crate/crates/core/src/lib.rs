//! Few-shot anomaly detection with a meta-learned, task-adapted projection.
//!
//! A set encoder summarises a task's support set, a task-conditioned network
//! embeds instances, and a unit projection `ŵ` is fitted per task in closed
//! form as the top generalized eigenvector of anomalous versus normal scatter
//! around a fixed center. Queries are scored by their squared projected
//! distance to that center. The networks are meta-trained episodically to
//! maximise a sigmoid-smoothed AUC, with gradients flowing through the
//! eigenproblem.
//!
//! Crate layout:
//!
//! * [`linalg`]: dense kernels with their reverse-mode rules
//! * [`autodiff`]: the tape, Adam and dropout
//! * [`model`]: networks, task encoding and the adaptation modes
//! * [`objective`]: empirical and smoothed AUC
//! * [`data`]: CSV ingestion, task synthesis, episode sampling
//! * [`train`]: meta-training, evaluation and checkpoints
//! * [`gradcheck`]: finite-difference verification of every gradient path

pub mod autodiff;
pub mod data;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod rng;
pub mod train;

mod error;

pub use error::{Error, ErrorKind, Result};
pub use linalg::Matrix;
