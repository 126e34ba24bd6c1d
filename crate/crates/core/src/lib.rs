//! Layer-wise mutual contrastive learning for online knowledge distillation.
//!
//! A cohort of small staged networks is trained jointly. Each network learns
//! from ground-truth labels, from vanilla and interactive contrastive losses
//! between every pair of layers across peers, from mutual mimicry of soft
//! contrastive distributions, and from a gated ensemble of its own branch
//! logits distilled into its peers. Layer-matching weights come from a small
//! meta-network trained by differentiating through unrolled inner updates.
//!
//! The crate is `no_std` with `alloc`; IO, configuration files and the CLI
//! live in the companion `lmcl` crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod contrastive;
pub mod data;
pub mod error;
pub mod layerwise;
pub mod logit;
pub mod meta;
pub mod mining;
pub mod nn;
pub mod probe;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{finite_diff_grad, Gradients, Graph, Tensor};
