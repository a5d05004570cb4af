//! Contrastive self-supervised learning as five composable stages: an
//! augmentation pipeline, an encoder, representation extraction, a
//! similarity measure and a contrastive loss. AMDIM, CPC, SimCLR and YADIM
//! are presets over those stages.

pub mod augment;
pub mod checks;
pub mod data;
pub mod encoder;
pub mod harness;
pub mod extraction;
pub mod nn;
pub mod simloss;
pub mod tensor;

pub use tensor::{Element, Tensor, TensorError};
