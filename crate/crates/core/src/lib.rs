//! Registration and segmentation uncertainty on synthetic volumes.
//!
//! The pipeline: generate a phantom pair with a known deformation, register
//! it repeatedly under a stochastic policy, derive registration
//! (transformation, appearance) and segmentation (epistemic, aleatoric)
//! uncertainty maps, and score each map against the label-propagation error.

pub mod aleatoric;
pub mod config;
pub mod error;
pub mod filters;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod registration;
pub mod uncertainty;
pub mod volume;
pub mod warp;

pub use error::{Error, ErrorClass, Result};
pub use volume::{make_volume, DisplacementField, GridSpec, LabelVolume, SampleSet, ScalarVolume};
