//! Multiplane-image (MPI) scene fitting.
//!
//! An MPI is a stack of fronto-parallel RGB-α planes placed at increasing
//! depths in a source camera's frustum. Novel views are rendered by warping
//! each plane into the target camera with a plane-induced homography and
//! over-compositing front to back. Everything in the pipeline is
//! differentiable, so a scene can be fit to a handful of posed images by
//! first-order optimization of an image-synthesis loss, optionally combined
//! with a chamfer term that pulls the plane depths toward the scene's depth
//! distribution (adaptive bins).
//!
//! Module map:
//! - [`camera`]: pinhole intrinsics, rigid poses, plane-induced homographies
//! - [`image`]: the `f64` raster container, bilinear sampling, resizing
//! - [`mpi`]: the representation and the three plane-placement strategies
//! - [`renderer`]: forward rendering and its hand-derived adjoint
//! - [`losses`]: chamfer, SSIM, synthesis loss, PSNR
//! - [`fitter`]: coarse-to-fine per-scene optimization
//! - [`synth`]: procedural layered test scenes with an analytic renderer
//!
//! With the default `rayon` feature the heavy kernels run data-parallel over
//! image rows (or planes); without it the same code runs sequentially. All
//! reductions use a fixed chunking so results are bit-identical regardless
//! of thread count.

pub mod camera;
pub mod fitter;
pub mod image;
pub mod losses;
pub mod mpi;
pub mod renderer;
pub mod synth;

pub(crate) mod par;

pub use camera::{CameraError, CameraIntrinsics, Homography, RigidPose};
pub use image::{BorderPolicy, ImageBuffer, ImageError, ResizeMode};
pub use mpi::{BinWidths, DepthRange, MpiError, MultiplaneImage};
pub use renderer::{GradientBundle, WarpedPlaneStack};
