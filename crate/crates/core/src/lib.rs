//! Inside-Outside Net detection mechanisms at desk scale.
//!
//! Layers are double-precision with hand-written backward passes checked
//! against central finite differences ([`nn::gradcheck`]). The crate covers
//! the IRNN context block ([`irnn`]), multi-layer ROI skip pooling with
//! L2 normalization ([`skip_pool`]), the per-ROI detection head
//! ([`head`]), post-processing with NMS and weighted box voting
//! ([`postprocess`]), COCO/VOC-style evaluation ([`eval`]), and a
//! deterministic toy training harness ([`train`]). [`verify`] registers
//! every differentiable op for finite-difference checking, [`rfield`]
//! measures receptive fields by perturbation, and [`voting_bench`] is a
//! synthetic benchmark for box voting.

pub mod boxes;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod head;
pub mod io;
pub mod irnn;
pub mod nn;
pub mod postprocess;
pub mod rfield;
pub mod skip_pool;
pub mod train;
pub mod verify;
pub mod voting_bench;

pub use error::{Error, Result};

/// RNG used everywhere randomness is needed; seeded explicitly.
pub type Rng64 = rand_chacha::ChaCha8Rng;
