//! Scene graph generation on synthetic shape scenes, with a layout-guided
//! feature normalization module and a layout-embedded encoder for
//! robustness to image corruptions.

pub mod error;
pub mod eval;
pub mod grad_check;
pub mod grad_suite;
pub mod layers;
pub mod lee;
pub mod nrm;
pub mod param;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
