//! Semi-supervised volumetric segmentation from sparse orthogonal-slice
//! annotations, with three co-trained networks and text-guided features.

pub mod annotation;
pub mod cotrain;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod phantom;
pub mod seed;
pub mod semantic;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
