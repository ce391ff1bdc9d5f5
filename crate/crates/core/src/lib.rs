//! Volumetric nuclei segmentation toolkit.
//!
//! Pipeline: synthetic binary volume generation → spatially constrained
//! CycleGAN synthesis of microscopy-like volumes → 3D U-Net training on the
//! resulting pairs → sliding-window inference → connected-component
//! postprocessing and voxel metrics. Everything runs on a self-contained
//! f64 tensor/autodiff core.

pub mod error;
pub mod gantrain;
pub mod infer;
pub mod networks;
pub mod postproc;
pub mod segtrain;
pub mod synthgen;
pub mod tensor;
pub mod volio;
pub mod volume;

pub use error::{Error, Result};
