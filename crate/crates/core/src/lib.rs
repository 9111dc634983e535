//! Incremental structure from motion for equirectangular panoramas on the
//! unit-sphere camera model, with cube-face export for dense matching.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod camera;
pub mod cli;
pub mod cubemap;
pub mod engine;
pub mod features;
pub mod io;
pub mod optim;
pub mod resection;
pub mod sift;
pub mod synth;
pub mod two_view;
