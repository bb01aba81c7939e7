//! IO, training driver, threaded prediction, and run manifests for the
//! patch-based MR-to-CT synthesis engine. The numerical core lives in
//! `svox-core`; this crate owns everything that touches the filesystem or a
//! thread pool, plus the `svox` command-line binary.

pub mod formats;
pub mod manifest;
pub mod predict;
pub mod trainer;

pub use svox_core as core;
