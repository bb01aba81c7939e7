//! Core engine for patch-based 3D image synthesis: volumes and orientations,
//! rank-5 tensor primitives with hand-derived backward passes, the dual-branch
//! Inception regression network, mask-interior patch sampling, Adam, evaluation
//! metrics, and a deterministic phantom generator.
//!
//! The crate is `no_std + alloc`; everything here is pure computation. File
//! formats, threading, and the CLI live in the companion `svox` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod headmask;
pub mod inference;
pub mod mathf;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod sampler;
pub mod tensor;
#[cfg(feature = "testutil")]
pub mod testutil;
pub mod volume;

pub use model::{InceptionSpec, ModelConfig, Network};
pub use sampler::{NormalizationSpec, PatchIndex};
pub use tensor::{ConvParams, Tensor5};
pub use volume::{Mask, Orientation, OrientationTag, Volume};
