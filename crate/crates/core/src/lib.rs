//! Video gaze estimation at desk scale: spatial attention over consecutive
//! frame features, causal temporal sequence models, a gaze prediction head,
//! and Gaussian-process per-person bias correction — all on a small
//! self-contained f64 autodiff core, with a synthetic video-gaze generator
//! for end-to-end verification.

pub mod backbone;
pub mod datagen;
pub mod error;
pub mod numerics;
pub mod gp;
pub mod harness;
pub mod model;
pub mod sam;
pub mod tsm;

pub use error::StageError;
