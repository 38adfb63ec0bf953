//! Differentiable 2D Gaussian splatting for fitting large images.
//!
//! An image is represented as a sum of anisotropic 2D Gaussians, each with a
//! position, a directly optimized symmetric covariance, and an unbounded
//! weighted color. Fitting runs in two levels: a small cloud learns a
//! downsampled copy of the image, then a larger cloud learns the normalized
//! residual at full resolution.

pub mod error;
pub mod gaussian;
pub mod io;
pub mod optim;
pub mod pipeline;
pub mod plane;
pub mod raster;

pub use error::{Error, Result};
pub use gaussian::{
    invert_cov, is_positive_definite, repair_covariance, sigma, CovUT, Gaussian2D, GaussianCloud,
    Real, EPS_DET, EPS_PSD,
};
pub use optim::{
    adam_step, adam_step_flat, fit_cloud, fit_level, init_cloud, mse_loss, AdamState, ColorInit,
    FitConfig, FitOutcome,
};
pub use pipeline::{
    allocate_points, benchmark_model, denormalize, downsample, fit_log, fit_single,
    normalize_residual, psnr, psnr_from_mse, reconstruct, reconstruct_with, upsample, FitReport,
    Level, LogConfig, LogModel,
};
pub use plane::ImagePlane;
pub use raster::{
    benchmark_render, bin_gaussians, naive_render, render, render_backward, Frame, ParamGrads,
    RenderConfig, TileGrid,
};
