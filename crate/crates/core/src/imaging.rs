//! Pixel containers and the haze imaging model.
//!
//! An observation under haze is modelled per pixel as
//! `I = J·t + (1 − t)·A`, where `J` is the scene radiance, `t` the
//! transmittance and `A` the (spatially varying) environmental illumination.
//! All values live in `[0, 1]`.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Lower bound applied to the transmittance in the recovery denominator.
pub const MIN_TRANSMITTANCE: f32 = 0.1;

/// A row-major, channel-interleaved raster whose values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<const C: usize> {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Three-channel scene radiance or hazy observation.
pub type Image = Raster<3>;
/// Per-pixel transmittance `t(x)`.
pub type ScalarMap = Raster<1>;
/// Per-pixel environmental illumination `A(x)`.
pub type ColorMap = Raster<3>;

impl<const C: usize> Raster<C> {
    pub const CHANNELS: usize = C;

    /// Wraps `data`, checking the length and that every value is finite and in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "raster dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * C {
            return Err(Error::invalid(format!(
                "raster {height}x{width}x{C} needs {} values, got {}",
                height * width * C,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!(
                "raster value {bad} outside [0, 1]"
            )));
        }
        Ok(Raster {
            height,
            width,
            data,
        })
    }

    /// Builds a raster by clamping every value into `[0, 1]`. NaN becomes 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: [f32; C]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| value).collect();
        Self::new(height, width, data)
    }

    /// Builds a raster from a per-pixel closure `(row, col) -> channels`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; C],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * C);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; C] {
        let i = (y * self.width + x) * C;
        let mut out = [0.0; C];
        out.copy_from_slice(&self.data[i..i + C]);
        out
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(C)
    }

    /// Values of one channel in row-major order.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        assert!(c < C, "channel {c} out of range");
        self.data.iter().skip(c).step_by(C).copied().collect()
    }

    /// Copies out the `h`×`w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * C);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * C;
            data.extend_from_slice(&self.data[start..start + w * C]);
        }
        Ok(Raster {
            height: h,
            width: w,
            data,
        })
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize target must be nonempty"));
        }
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let data = resize_bilinear(&self.data, self.height, self.width, C, height, width);
        // Convex combinations of values in [0, 1] stay in [0, 1] up to rounding.
        Self::from_clamped(height, width, data)
    }

    pub fn same_dims<const D: usize>(&self, other: &Raster<D>) -> bool {
        self.dims() == other.dims()
    }
}

impl Image {
    /// Rec.601 luma of every pixel.
    pub fn luma(&self) -> Vec<f32> {
        self.pixels()
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Per-pixel mean of the three channels.
    pub fn channel_mean(&self) -> Vec<f32> {
        self.pixels().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }
}

/// Bilinear resampling of an interleaved buffer, sampling at pixel centres.
pub fn resize_bilinear(
    src: &[f32],
    src_h: usize,
    src_w: usize,
    channels: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f32> {
    debug_assert_eq!(src.len(), src_h * src_w * channels);
    let taps = |dst: usize, src_n: usize| -> Vec<(usize, usize, f32)> {
        let scale = src_n as f32 / dst as f32;
        (0..dst)
            .map(|i| {
                let pos = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (src_n - 1) as f32);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src_n - 1);
                (lo, hi, pos - lo as f32)
            })
            .collect()
    };
    let ys = taps(dst_h, src_h);
    let xs = taps(dst_w, src_w);
    let mut out = vec![0.0f32; dst_h * dst_w * channels];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let o = (oy * dst_w + ox) * channels;
            for c in 0..channels {
                let at = |y: usize, x: usize| src[(y * src_w + x) * channels + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[o + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Scene depth in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid(format!(
                "depth map {height}x{width} with {} values",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("depth value {bad} is not a finite nonnegative number")));
        }
        Ok(DepthMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, depth: f32) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// `t(x) = exp(−β·d(x))`.
pub fn transmittance_from_depth(depth: &DepthMap, beta: f32) -> Result<ScalarMap> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::invalid(format!("scattering coefficient must be positive, got {beta}")));
    }
    let data = depth.data.iter().map(|d| (-beta * d).exp()).collect();
    ScalarMap::new(depth.height, depth.width, data)
}

fn check_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!(
            "{what}: dimension mismatch {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Applies `I = J·t + (1 − t)·A` per pixel and channel.
pub fn synthesize_haze(clean: &Image, t: &ScalarMap, a: &ColorMap) -> Result<Image> {
    check_dims("synthesize_haze", clean.dims(), t.dims())?;
    check_dims("synthesize_haze", clean.dims(), a.dims())?;
    let mut data = vec![0.0f32; clean.data.len()];
    data.par_chunks_mut(3)
        .zip(clean.data.par_chunks(3))
        .zip(t.data.par_iter())
        .zip(a.data.par_chunks(3))
        .for_each(|(((out, j), &t), a)| {
            for c in 0..3 {
                out[c] = j[c] * t + (1.0 - t) * a[c];
            }
        });
    Image::from_clamped(clean.height, clean.width, data)
}

/// Inverts the imaging model: `J = (I − (1 − t)·A) / max(0.1, t)`, clamped to `[0, 1]`.
pub fn recover_scene(hazy: &Image, t: &ScalarMap, a: &ColorMap) -> Result<Image> {
    check_dims("recover_scene", hazy.dims(), t.dims())?;
    check_dims("recover_scene", hazy.dims(), a.dims())?;
    let mut data = vec![0.0f32; hazy.data.len()];
    data.par_chunks_mut(3)
        .zip(hazy.data.par_chunks(3))
        .zip(t.data.par_iter())
        .zip(a.data.par_chunks(3))
        .for_each(|(((out, i), &t), a)| {
            let denom = t.max(MIN_TRANSMITTANCE);
            for c in 0..3 {
                out[c] = (i[c] - (1.0 - t) * a[c]) / denom;
            }
        });
    Image::from_clamped(hazy.height, hazy.width, data)
}
