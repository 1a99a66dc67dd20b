//! Single-image dehazing by joint estimation of scene transmittance and
//! environmental illumination.
//!
//! The crate covers the whole pipeline: synthetic haze generation from RGB-D
//! pairs ([`synth`]), a forked fully convolutional network and its
//! reconstruction loss ([`net`], built on the small engine in [`nn`]),
//! multilevel patch inference ([`multilevel`]), edge-aware regularisation
//! ([`regularize`]), scene recovery ([`imaging`]) and quality metrics
//! ([`metrics`]).

pub mod error;
pub mod imaging;
pub mod io;
pub mod metrics;
pub mod multilevel;
pub mod net;
pub mod nn;
pub mod pipeline;
pub mod regularize;
pub mod synth;

pub use error::{Error, Result};
pub use imaging::{
    recover_scene, synthesize_haze, transmittance_from_depth, ColorMap, DepthMap, Image, Raster, ScalarMap,
};
