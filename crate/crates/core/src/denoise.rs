//! Noise filters applied independently to each channel.
//!
//! All filters use reflect padding (`d c b | a b c d | c b a`) at the borders
//! and accumulate in `f64` with a fixed per-pixel summation order, so results
//! do not depend on how output pixels are scheduled.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageError, ImageTensor};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter parameter: {0}")]
    Parameter(String),
    #[error("image {height}x{width} is smaller than one {patch}x{patch} patch")]
    TooSmall {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Non-local means parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlmParams {
    pub patch_size: usize,
    pub patch_distance: usize,
    pub h: f32,
}

impl Default for NlmParams {
    fn default() -> Self {
        Self {
            patch_size: 3,
            patch_distance: 5,
            h: 0.1,
        }
    }
}

impl NlmParams {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(FilterError::Parameter(format!(
                "patch_size must be odd and >= 1, got {}",
                self.patch_size
            )));
        }
        if self.patch_distance == 0 {
            return Err(FilterError::Parameter("patch_distance must be >= 1".into()));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(FilterError::Parameter(format!("h must be > 0, got {}", self.h)));
        }
        Ok(())
    }
}

/// Reflects `i` into `0..len` without repeating the edge sample.
#[inline]
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= len as isize { period - m } else { m }) as usize
}

/// A single channel copied into a reflect-padded buffer.
struct PaddedPlane {
    data: Vec<f32>,
    stride: usize,
    pad: usize,
}

impl PaddedPlane {
    fn new(img: &ImageTensor, channel: usize, pad: usize) -> Self {
        let (h, w) = (img.height(), img.width());
        let stride = w + 2 * pad;
        let mut data = Vec::with_capacity((h + 2 * pad) * stride);
        for py in 0..h + 2 * pad {
            let y = reflect(py as isize - pad as isize, h);
            for px in 0..stride {
                let x = reflect(px as isize - pad as isize, w);
                data.push(img.get(y, x, channel));
            }
        }
        Self { data, stride, pad }
    }

    /// Sample at image coordinates offset by `(dy, dx)`; offsets must lie within the padding.
    #[inline]
    fn at(&self, y: usize, x: usize, dy: isize, dx: isize) -> f32 {
        let py = (y + self.pad) as isize + dy;
        let px = (x + self.pad) as isize + dx;
        self.data[py as usize * self.stride + px as usize]
    }
}

fn map_channels(
    img: &ImageTensor,
    pad: usize,
    mut per_pixel: impl FnMut(&PaddedPlane, usize, usize) -> f32,
) -> Result<ImageTensor, FilterError> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = vec![0.0f32; h * w * c];
    for ch in 0..c {
        let plane = PaddedPlane::new(img, ch, pad);
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = per_pixel(&plane, y, x);
            }
        }
    }
    Ok(ImageTensor::from_clamped(h, w, c, out)?)
}

fn check_odd(kernel_size: usize) -> Result<(), FilterError> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(FilterError::Parameter(format!(
            "kernel_size must be odd, got {kernel_size}"
        )));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps for an odd `kernel_size`.
pub fn gaussian_kernel(sigma: f32, kernel_size: usize) -> Vec<f64> {
    let r = (kernel_size / 2) as isize;
    let s = sigma as f64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * s * s)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur.
pub fn gaussian_blur(img: &ImageTensor, sigma: f32, kernel_size: usize) -> Result<ImageTensor, FilterError> {
    check_odd(kernel_size)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FilterError::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    let taps = gaussian_kernel(sigma, kernel_size);
    let r = (kernel_size / 2) as isize;
    let (h, w, c) = (img.height(), img.width(), img.channels());

    let mut horizontal = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - r, w);
                    acc += t * img.get(y, sx, ch) as f64;
                }
                horizontal[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - r, h);
                    acc += t * horizontal[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    Ok(ImageTensor::from_clamped(h, w, c, out)?)
}

/// Median of each `kernel_size x kernel_size` neighbourhood.
pub fn median_filter(img: &ImageTensor, kernel_size: usize) -> Result<ImageTensor, FilterError> {
    check_odd(kernel_size)?;
    let r = kernel_size / 2;
    let ri = r as isize;
    let mut window = Vec::with_capacity(kernel_size * kernel_size);
    map_channels(img, r, |plane, y, x| {
        window.clear();
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                window.push(plane.at(y, x, dy, dx));
            }
        }
        let mid = window.len() / 2;
        *window
            .select_nth_unstable_by(mid, |a, b| a.total_cmp(b))
            .1
    })
}

/// Edge-preserving bilateral filter with window radius `ceil(3 * sigma_spatial)`.
pub fn bilateral_filter(
    img: &ImageTensor,
    sigma_spatial: f32,
    sigma_range: f32,
) -> Result<ImageTensor, FilterError> {
    if !(sigma_spatial > 0.0 && sigma_spatial.is_finite()) || !(sigma_range > 0.0 && sigma_range.is_finite()) {
        return Err(FilterError::Parameter(format!(
            "bilateral sigmas must be > 0, got spatial {sigma_spatial}, range {sigma_range}"
        )));
    }
    let r = (3.0 * sigma_spatial as f64).ceil() as usize;
    let ri = r as isize;
    let two_ss = 2.0 * (sigma_spatial as f64).powi(2);
    let two_sr = 2.0 * (sigma_range as f64).powi(2);
    let spatial: Vec<f64> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (-((dy * dy + dx * dx) as f64) / two_ss).exp()))
        .collect();
    map_channels(img, r, |plane, y, x| {
        let center = plane.at(y, x, 0, 0) as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        let mut k = 0;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let v = plane.at(y, x, dy, dx) as f64;
                let d = v - center;
                let wgt = spatial[k] * (-(d * d) / two_sr).exp();
                num += wgt * v;
                den += wgt;
                k += 1;
            }
        }
        debug_assert!(den >= 1.0, "bilateral weights must include the center pixel");
        (num / den) as f32
    })
}

/// Non-local means: each pixel becomes the weighted mean of the pixels in its
/// `(2 * patch_distance + 1)^2` search window, weighted by
/// `exp(-max(d2 - 2 sigma^2, 0) / h^2)` where `d2` is the mean squared
/// difference between the two surrounding patches.
pub fn nlm_denoise(img: &ImageTensor, params: &NlmParams) -> Result<ImageTensor, FilterError> {
    nlm_denoise_with_sigma(img, params, 0.0)
}

/// [`nlm_denoise`] with an externally supplied noise standard deviation.
pub fn nlm_denoise_with_sigma(
    img: &ImageTensor,
    params: &NlmParams,
    sigma: f32,
) -> Result<ImageTensor, FilterError> {
    params.validate()?;
    if img.height() < params.patch_size || img.width() < params.patch_size {
        return Err(FilterError::TooSmall {
            height: img.height(),
            width: img.width(),
            patch: params.patch_size,
        });
    }
    let pr = (params.patch_size / 2) as isize;
    let sr = params.patch_distance as isize;
    let pad = (pr + sr) as usize;
    let patch_len = (params.patch_size * params.patch_size) as f64;
    let h2 = (params.h as f64).powi(2);
    let bias = 2.0 * (sigma as f64).powi(2);

    map_channels(img, pad, |plane, y, x| {
        let mut num = 0.0;
        let mut den = 0.0;
        for sy in -sr..=sr {
            for sx in -sr..=sr {
                let mut d2 = 0.0;
                for py in -pr..=pr {
                    for px in -pr..=pr {
                        let a = plane.at(y, x, py, px) as f64;
                        let b = plane.at(y, x, sy + py, sx + px) as f64;
                        d2 += (a - b) * (a - b);
                    }
                }
                d2 /= patch_len;
                let wgt = (-(d2 - bias).max(0.0) / h2).exp();
                num += wgt * plane.at(y, x, sy, sx) as f64;
                den += wgt;
            }
        }
        debug_assert!(den >= 1.0, "NLM weights must include the center pixel");
        (num / den) as f32
    })
}

/// Which denoiser the preprocessing pipeline applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Denoiser {
    Nlm(NlmParams),
    Median { kernel_size: usize },
    Bilateral { sigma_spatial: f32, sigma_range: f32 },
    Gaussian { sigma: f32, kernel_size: usize },
    None,
}

impl Default for Denoiser {
    fn default() -> Self {
        Denoiser::Nlm(NlmParams::default())
    }
}

impl Denoiser {
    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor, FilterError> {
        match *self {
            Denoiser::Nlm(ref p) => nlm_denoise(img, p),
            Denoiser::Median { kernel_size } => median_filter(img, kernel_size),
            Denoiser::Bilateral {
                sigma_spatial,
                sigma_range,
            } => bilateral_filter(img, sigma_spatial, sigma_range),
            Denoiser::Gaussian { sigma, kernel_size } => gaussian_blur(img, sigma, kernel_size),
            Denoiser::None => Ok(img.clone()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Denoiser::Nlm(_) => "nlm",
            Denoiser::Median { .. } => "median",
            Denoiser::Bilateral { .. } => "bilateral",
            Denoiser::Gaussian { .. } => "gaussian",
            Denoiser::None => "none",
        }
    }
}
