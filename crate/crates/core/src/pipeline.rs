//! End-to-end dehazing: multilevel estimation, regularisation, recovery.

use crate::error::{Error, Result};
use crate::imaging::{recover_scene, ColorMap, Image, ScalarMap};
use crate::multilevel::{estimate_multilevel, Aggregate, MultilevelConfig, PatchEstimator};
use crate::regularize::{regularize_maps, RegularizerParams};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DehazeConfig {
    pub multilevel: MultilevelConfig,
    pub regularizer: RegularizerParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DehazeOutput {
    pub dehazed: Image,
    /// Regularised maps used for recovery.
    pub t: ScalarMap,
    pub a: ColorMap,
    /// Aggregated network estimates before regularisation.
    pub raw: Aggregate,
    pub levels: usize,
}

impl DehazeOutput {
    /// Pixels with at least one network estimate.
    pub fn coverage(&self) -> Vec<bool> {
        self.raw.mask()
    }
}

/// Dehazes `hazy` with maps estimated by `estimator`.
pub fn dehaze(hazy: &Image, estimator: &impl PatchEstimator, config: &DehazeConfig) -> Result<DehazeOutput> {
    let (levels, raw) = estimate_multilevel(hazy, estimator, &config.multilevel)?;
    if !raw.t_mask.iter().any(|&m| m) {
        return Err(Error::Singular(
            "no patch passed the variance gate: nothing to estimate the maps from".into(),
        ));
    }
    let reg = regularize_maps(&raw.t, &raw.a, &raw.t_mask, &raw.a_mask, hazy, &config.regularizer)?;
    for (k, &(iters, res, ok)) in reg.solves.iter().enumerate() {
        log::debug!("solve {k}: {iters} iterations, residual {res:.3e}, converged {ok}");
    }
    let dehazed = recover_scene(hazy, &reg.t, &reg.a)?;
    Ok(DehazeOutput {
        dehazed,
        t: reg.t,
        a: reg.a,
        raw,
        levels: levels.len(),
    })
}

/// Recovery with known maps, bypassing estimation.
pub fn oracle_dehaze(hazy: &Image, t: &ScalarMap, a: &ColorMap) -> Result<Image> {
    recover_scene(hazy, t, a)
}

/// Grey RGB rendering of a scalar map.
pub fn map_to_image(map: &ScalarMap) -> Image {
    let (h, w) = map.dims();
    Image::new(h, w, map.as_slice().iter().flat_map(|&v| [v; 3]).collect()).expect("values already validated")
}

/// Black/white rendering of a mask.
pub fn mask_to_image(mask: &[bool], height: usize, width: usize) -> Result<Image> {
    if mask.len() != height * width {
        return Err(Error::invalid("mask length does not match the image size"));
    }
    Image::new(height, width, mask.iter().flat_map(|&m| [if m { 1.0 } else { 0.0 }; 3]).collect())
}

/// Places equally tall images next to each other, left to right.
pub fn side_by_side(images: &[&Image]) -> Result<Image> {
    let h = images.first().ok_or_else(|| Error::invalid("no images to place"))?.height();
    if images.iter().any(|i| i.height() != h) {
        return Err(Error::invalid("side-by-side images must share a height"));
    }
    let w: usize = images.iter().map(|i| i.width()).sum();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for img in images {
            let row = img.width() * 3;
            data.extend_from_slice(&img.as_slice()[y * row..(y + 1) * row]);
        }
    }
    Image::new(h, w, data)
}
