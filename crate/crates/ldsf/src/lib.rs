//! LDSF: desk-scale SAR automatic target recognition from attributed scattering
//! centers (ASC), end to end and framework-free.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! 1. **Synthesis** ([`asc_model`]) — render complex SAR imagery from ASC ground
//!    truth with the standard frequency/aspect-domain forward model.
//! 2. **Extraction** ([`extraction`], [`segmentation`], [`optim`]) — recover ASC
//!    parameters from imagery by segmentation (2-D Otsu + watershed), per-region
//!    nonlinear least squares (BFGS / Nelder–Ead), and CLEAN-style subtraction.
//! 3. **Graphs** ([`graph_build`]) — organize extracted scatterers into a
//!    heterogeneous component graph with type-pair metapaths.
//! 4. **Recognition** ([`nn_core`], [`lemsf`], [`gvf`], [`fusion_loss`],
//!    [`harness`]) — classify with a multi-level-attention graph network fused
//!    with a small prunable SE-CNN, trained with a cross-entropy plus
//!    cut-distance topology loss.
//!
//! Everything is `f64`, deterministic under a fixed seed, and free of
//! deep-learning framework dependencies; the only numeric backend is an FFT.
//!
//! See the crate's `examples/` directory for one runnable program per stage.

pub mod asc_model;
pub mod core_types;
pub mod extraction;
pub mod fusion_loss;
pub mod graph_build;
pub mod gvf;
pub mod harness;
pub mod lemsf;
pub mod nn_core;
pub mod optim;
pub mod segmentation;

pub use core_types::{
    Complex64Image, LdsfError, RadarConfig, ScattererKind, ScattererParams, ScatterSet,
};
