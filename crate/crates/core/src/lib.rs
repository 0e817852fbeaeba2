//! Hierarchical dense-attention 3D segmentation of two-modality infant brain
//! MRI into background, CSF, gray matter and white matter, with Dice and
//! modified Hausdorff evaluation and preterm/term tissue volume statistics.
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doctests of this crate.

pub mod assessment;
pub mod error;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod patching;
pub mod training;
pub mod volume_io;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/volumes.md")]
    mod volumes {}
    #[doc = include_str!("../../../book/src/patches.md")]
    mod patches {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/assessment.md")]
    mod assessment {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
