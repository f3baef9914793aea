//! A laboratory for multimodal fusion experiments.
//!
//! The crate is built around a small reverse-mode autodiff engine
//! ([`tensor`]) and layers on top of it:
//!
//! * [`data`] — binary dataset containers (IDX images, the multimodal
//!   `MMFT` container) and a deterministic synthetic digit corpus,
//! * [`mmnist`] — a controllable multimodal dataset generator that splits
//!   an image corpus into two views along principal components,
//! * [`fusion`] — central-fusion networks: per-modality towers plus a
//!   central tower fed by learned weighted sums of hidden layers,
//! * [`baselines`] — comparison fusion methods (score averaging,
//!   concatenation, modality dropout, gated units, shared-tower fusion,
//!   ensembles),
//! * [`train`] — the training/evaluation harness, metrics, and multi-run
//!   statistics,
//! * [`checkpoint`] — a self-describing binary checkpoint format.
//!
//! Everything is deterministic given a seed: parameter init, batch order,
//! dropout masks, and reduction order are all fixed, so repeated runs
//! produce byte-identical reports.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod mmnist;
pub mod tensor;
pub mod testing;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Mode, NodeId, Param, Scalar, Tensor};
