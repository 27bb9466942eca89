//! Global and contrast-limited adaptive histogram equalization.
//!
//! Both operate on the luma channel of RGB inputs (chroma is left alone) and
//! directly on single-channel inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{from_luma_chroma, quantize, to_luma_chroma, ImageError, ImageTensor, LEVELS};

#[derive(Debug, Error)]
pub enum EqualizeError {
    #[error("invalid CLAHE parameter: {0}")]
    Parameter(String),
    #[error("image {height}x{width} is smaller than the {tiles_y}x{tiles_x} tile grid")]
    TooSmall {
        height: usize,
        width: usize,
        tiles_y: usize,
        tiles_x: usize,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Multiple of the uniform bin height `tile_pixels / 256`.
    pub clip_limit: f32,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 2.0,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<(), EqualizeError> {
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(EqualizeError::Parameter("tile counts must be >= 1".into()));
        }
        if !(self.clip_limit >= 1.0 && self.clip_limit.is_finite()) {
            return Err(EqualizeError::Parameter(format!(
                "clip_limit must be >= 1.0, got {}",
                self.clip_limit
            )));
        }
        Ok(())
    }
}

/// Lookup table from input level to output level.
pub type LevelMap = [u8; LEVELS];

/// Equalization map `round(255 (cdf(v) - cdf_min) / (N - cdf_min))`.
/// A histogram with a single occupied level maps to the identity.
pub fn equalization_map(bins: &[u64; LEVELS]) -> LevelMap {
    let total: u64 = bins.iter().sum();
    let cdf_min = bins.iter().copied().find(|&b| b > 0).unwrap_or(0);
    let mut map = [0u8; LEVELS];
    if total == cdf_min {
        for (i, m) in map.iter_mut().enumerate() {
            *m = i as u8;
        }
        return map;
    }
    let denom = (total - cdf_min) as f64;
    let mut cdf = 0u64;
    for (m, &b) in map.iter_mut().zip(bins) {
        cdf += b;
        let scaled = 255.0 * cdf.saturating_sub(cdf_min) as f64 / denom;
        *m = scaled.round().clamp(0.0, 255.0) as u8;
    }
    map
}

/// Clips every bin at `ceil(clip_limit * pixels / 256)` (at least 1) and
/// spreads the excess over all bins in one pass: each bin gets
/// `excess / 256`, and the remainder goes one count at a time to the lowest
/// bins.
pub fn clip_histogram(bins: &mut [u64; LEVELS], clip_limit: f32) {
    let pixels: u64 = bins.iter().sum();
    let ceiling = clip_ceiling(pixels, clip_limit);
    let mut excess = 0u64;
    for b in bins.iter_mut() {
        if *b > ceiling {
            excess += *b - ceiling;
            *b = ceiling;
        }
    }
    let share = excess / LEVELS as u64;
    let remainder = (excess % LEVELS as u64) as usize;
    for (i, b) in bins.iter_mut().enumerate() {
        *b += share + u64::from(i < remainder);
    }
}

pub fn clip_ceiling(pixels: u64, clip_limit: f32) -> u64 {
    ((clip_limit as f64 * pixels as f64 / LEVELS as f64).ceil() as u64).max(1)
}

/// Runs `f` on the luma plane (or the only plane) and writes it back.
fn on_luma(
    img: &ImageTensor,
    f: impl FnOnce(&[usize], usize, usize) -> Result<Vec<f32>, EqualizeError>,
) -> Result<ImageTensor, EqualizeError> {
    let (h, w) = (img.height(), img.width());
    if img.channels() == 1 {
        let levels: Vec<usize> = img.data().iter().map(|&v| quantize(v)).collect();
        return Ok(ImageTensor::from_clamped(h, w, 1, f(&levels, h, w)?)?);
    }
    let ycc = to_luma_chroma(img)?;
    let levels: Vec<usize> = ycc.data().iter().step_by(3).map(|&v| quantize(v)).collect();
    let luma = f(&levels, h, w)?;
    let mut data = ycc.into_data();
    for (px, y) in data.chunks_exact_mut(3).zip(luma) {
        px[0] = y;
    }
    Ok(from_luma_chroma(&ImageTensor::from_clamped(h, w, 3, data)?)?)
}

/// Global histogram equalization.
pub fn hist_equalize(img: &ImageTensor) -> Result<ImageTensor, EqualizeError> {
    on_luma(img, |levels, _, _| {
        let mut bins = [0u64; LEVELS];
        for &l in levels {
            bins[l] += 1;
        }
        let map = equalization_map(&bins);
        Ok(levels.iter().map(|&l| map[l] as f32 / 255.0).collect())
    })
}

/// Half-open pixel range covered by tile `t` of `tiles` along an axis of `len`.
fn tile_span(t: usize, tiles: usize, len: usize) -> (usize, usize) {
    (t * len / tiles, (t + 1) * len / tiles)
}

/// Per-tile clipped histograms, row-major over the tile grid.
pub fn tile_histograms(levels: &[usize], h: usize, w: usize, params: &ClaheParams) -> Vec<[u64; LEVELS]> {
    let mut out = Vec::with_capacity(params.tiles_x * params.tiles_y);
    for ty in 0..params.tiles_y {
        let (y0, y1) = tile_span(ty, params.tiles_y, h);
        for tx in 0..params.tiles_x {
            let (x0, x1) = tile_span(tx, params.tiles_x, w);
            let mut bins = [0u64; LEVELS];
            for y in y0..y1 {
                for &l in &levels[y * w + x0..y * w + x1] {
                    bins[l] += 1;
                }
            }
            clip_histogram(&mut bins, params.clip_limit);
            out.push(bins);
        }
    }
    out
}

/// Neighbouring tile indices and the weight of the second one, for a pixel
/// coordinate along an axis. Pixels outside the outermost tile centers take
/// the nearest tile.
fn tile_blend(p: usize, tiles: usize, len: usize) -> (usize, usize, f64) {
    let centers: Vec<f64> = (0..tiles)
        .map(|t| {
            let (a, b) = tile_span(t, tiles, len);
            (a + b) as f64 / 2.0 - 0.5
        })
        .collect();
    let pos = p as f64;
    if pos <= centers[0] {
        return (0, 0, 0.0);
    }
    if pos >= centers[tiles - 1] {
        return (tiles - 1, tiles - 1, 0.0);
    }
    let i = centers.iter().rposition(|&c| c <= pos).unwrap_or(0);
    let t = (pos - centers[i]) / (centers[i + 1] - centers[i]);
    (i, i + 1, t)
}

/// Contrast-limited adaptive histogram equalization with bilinear blending
/// between the mappings of the four nearest tiles.
pub fn clahe(img: &ImageTensor, params: &ClaheParams) -> Result<ImageTensor, EqualizeError> {
    params.validate()?;
    if img.height() < params.tiles_y || img.width() < params.tiles_x {
        return Err(EqualizeError::TooSmall {
            height: img.height(),
            width: img.width(),
            tiles_y: params.tiles_y,
            tiles_x: params.tiles_x,
        });
    }
    on_luma(img, |levels, h, w| {
        let maps: Vec<LevelMap> = tile_histograms(levels, h, w, params)
            .iter()
            .map(equalization_map)
            .collect();
        let cols: Vec<_> = (0..w).map(|x| tile_blend(x, params.tiles_x, w)).collect();
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            let (ty0, ty1, fy) = tile_blend(y, params.tiles_y, h);
            for (x, &(tx0, tx1, fx)) in cols.iter().enumerate() {
                let l = levels[y * w + x];
                let m = |ty: usize, tx: usize| maps[ty * params.tiles_x + tx][l] as f64;
                let top = m(ty0, tx0) * (1.0 - fx) + m(ty0, tx1) * fx;
                let bottom = m(ty1, tx0) * (1.0 - fx) + m(ty1, tx1) * fx;
                out.push(((top * (1.0 - fy) + bottom * fy) / 255.0) as f32);
            }
        }
        Ok(out)
    })
}
