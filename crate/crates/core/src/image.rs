//! Image representation shared by every stage of the pipeline.
//!
//! An [`ImageTensor`] is an `H x W x C` raster of `f32` values in `[0, 1]`,
//! stored row-major with interleaved channels. Histogram operations quantize
//! to 256 levels with `floor(v * 255 + 0.5)`.

use std::io::Cursor;

use image::{ImageFormat, ImageReader};
use thiserror::Error;

/// Number of intensity levels used by histogram-based operations.
pub const LEVELS: usize = 256;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image dimensions {height}x{width}x{channels}")]
    Dimensions {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("data length {actual} does not match {height}x{width}x{channels}")]
    DataLength {
        height: usize,
        width: usize,
        channels: usize,
        actual: usize,
    },
    #[error("pixel value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("expected {expected} channels, got {actual}")]
    ChannelCount { expected: usize, actual: usize },
    #[error("channel index {channel} out of range for {channels}-channel image")]
    ChannelIndex { channel: usize, channels: usize },
    #[error("unsupported image format: {0}")]
    Unsupported(String),
    #[error("malformed image stream: {0}")]
    Decode(String),
    #[error("encoding failed: {0}")]
    Encode(String),
}

/// Row-major `H x W x C` raster of intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Builds a tensor, checking the shape and the `[0, 1]` value range.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(ImageError::Dimensions {
                height,
                width,
                channels,
            });
        }
        if data.len() != height * width * channels {
            return Err(ImageError::DataLength {
                height,
                width,
                channels,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Like [`ImageTensor::new`], but clamps every value into `[0, 1]` first.
    /// NaN becomes 0.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f32>,
    ) -> Result<Self, ImageError> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self, ImageError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Copies one channel out as a row-major plane.
    pub fn plane(&self, channel: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Assembles an image from per-channel planes of equal size, clamping to `[0, 1]`.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f32>]) -> Result<Self, ImageError> {
        let channels = planes.len();
        let mut data = vec![0.0; height * width * channels];
        for (c, plane) in planes.iter().enumerate() {
            if plane.len() != height * width {
                return Err(ImageError::DataLength {
                    height,
                    width,
                    channels: 1,
                    actual: plane.len(),
                });
            }
            for (i, &v) in plane.iter().enumerate() {
                data[i * channels + c] = v;
            }
        }
        Self::from_clamped(height, width, channels, data)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Converts to an 8-bit buffer using the histogram quantization rule.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v) as u8).collect()
    }
}

/// Maps an intensity in `[0, 1]` to its 8-bit level.
#[inline]
pub fn quantize(v: f32) -> usize {
    ((v * 255.0 + 0.5).floor() as isize).clamp(0, 255) as usize
}

/// Decodes a PNG or JPEG stream into a 3-channel tensor. Grayscale and
/// alpha sources are converted to RGB.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor, ImageError> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| ImageError::Decode(e.to_string()))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => {}
        Some(other) => return Err(ImageError::Unsupported(format!("{other:?}"))),
        None => {
            return Err(ImageError::Unsupported(
                "unrecognized signature (expected PNG or JPEG)".to_string(),
            ))
        }
    }
    let decoded = reader
        .decode()
        .map_err(|e| ImageError::Decode(e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (width, height) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    ImageTensor::new(height, width, 3, data)
}

/// Output container for [`encode_image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeFormat {
    Png,
    Jpeg { quality: u8 },
}

pub fn encode_image(img: &ImageTensor, format: EncodeFormat) -> Result<Vec<u8>, ImageError> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let color = if img.channels() == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    let raw = img.to_u8();
    let mut out = Vec::new();
    match format {
        EncodeFormat::Png => {
            use image::ImageEncoder;
            image::codecs::png::PngEncoder::new(&mut out)
                .write_image(&raw, w, h, color)
                .map_err(|e| ImageError::Encode(e.to_string()))?;
        }
        EncodeFormat::Jpeg { quality } => {
            image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality)
                .encode(&raw, w, h, color)
                .map_err(|e| ImageError::Encode(e.to_string()))?;
        }
    }
    Ok(out)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor, ImageError> {
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::Dimensions {
            height: out_h,
            width: out_w,
            channels: img.channels,
        });
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let c = img.channels;
    let xs = axis_samples(img.width, out_w);
    let ys = axis_samples(img.height, out_h);
    let mut data = vec![0.0f32; out_h * out_w * c];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = lerp(img.get(y0, x0, ch), img.get(y0, x1, ch), fx);
                let bottom = lerp(img.get(y1, x0, ch), img.get(y1, x1, ch), fx);
                data[(oy * out_w + ox) * c + ch] = lerp(top, bottom, fy);
            }
        }
    }
    ImageTensor::from_clamped(out_h, out_w, c, data)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// For each output coordinate: the two neighbouring source indices and the
/// fractional weight of the second.
fn axis_samples(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

const KR: f32 = 0.299;
const KG: f32 = 0.587;
const KB: f32 = 0.114;

/// RGB to full-range BT.601 YCbCr, with chroma offset to 0.5.
pub fn to_luma_chroma(img: &ImageTensor) -> Result<ImageTensor, ImageError> {
    require_rgb(img)?;
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| {
            let (r, g, b) = (p[0], p[1], p[2]);
            let y = KR * r + KG * g + KB * b;
            let cb = 0.5 + (b - y) / (2.0 * (1.0 - KB));
            let cr = 0.5 + (r - y) / (2.0 * (1.0 - KR));
            [y, cb, cr]
        })
        .collect();
    ImageTensor::from_clamped(img.height, img.width, 3, data)
}

/// Inverse of [`to_luma_chroma`].
pub fn from_luma_chroma(img: &ImageTensor) -> Result<ImageTensor, ImageError> {
    require_rgb(img)?;
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| {
            let (y, cb, cr) = (p[0], p[1] - 0.5, p[2] - 0.5);
            let r = y + 2.0 * (1.0 - KR) * cr;
            let b = y + 2.0 * (1.0 - KB) * cb;
            let g = (y - KR * r - KB * b) / KG;
            [r, g, b]
        })
        .collect();
    ImageTensor::from_clamped(img.height, img.width, 3, data)
}

fn require_rgb(img: &ImageTensor) -> Result<(), ImageError> {
    if img.channels != 3 {
        return Err(ImageError::ChannelCount {
            expected: 3,
            actual: img.channels,
        });
    }
    Ok(())
}

/// 256-bin intensity histogram of one channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntensityHistogram {
    pub bins: [u64; LEVELS],
    pub total: u64,
}

impl IntensityHistogram {
    pub fn from_levels(levels: impl IntoIterator<Item = usize>) -> Self {
        let mut bins = [0u64; LEVELS];
        let mut total = 0;
        for l in levels {
            bins[l] += 1;
            total += 1;
        }
        Self { bins, total }
    }
}

pub fn histogram_256(img: &ImageTensor, channel: usize) -> Result<IntensityHistogram, ImageError> {
    if channel >= img.channels {
        return Err(ImageError::ChannelIndex {
            channel,
            channels: img.channels,
        });
    }
    Ok(IntensityHistogram::from_levels(
        img.data.iter().skip(channel).step_by(img.channels).map(|&v| quantize(v)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn png_1x1(rgb: [u8; 3]) -> Vec<u8> {
        let img = ImageTensor::new(1, 1, 3, rgb.iter().map(|&v| v as f32 / 255.0).collect()).unwrap();
        encode_image(&img, EncodeFormat::Png).unwrap()
    }

    #[test]
    fn decode_white_and_black_pixels() {
        let white = decode_image(&png_1x1([255, 255, 255])).unwrap();
        assert_eq!(white.data(), &[1.0, 1.0, 1.0]);
        let black = decode_image(&png_1x1([0, 0, 0])).unwrap();
        assert_eq!(black.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn decode_promotes_grayscale() {
        let gray = ImageTensor::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let bytes = encode_image(&gray, EncodeFormat::Png).unwrap();
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn jpeg_round_trip_is_close() {
        let src = ImageTensor::new(2, 2, 3, vec![0.5; 12]).unwrap();
        let bytes = encode_image(&src, EncodeFormat::Jpeg { quality: 95 }).unwrap();
        let img = decode_image(&bytes).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 2, 3));
        for (a, b) in img.data().iter().zip(src.data()) {
            assert!((a - b).abs() <= 0.05);
        }
    }

    #[test]
    fn decode_errors_are_distinct() {
        let mut png = png_1x1([1, 2, 3]);
        png.truncate(20);
        assert!(matches!(decode_image(&png), Err(ImageError::Decode(_))));
        assert!(matches!(decode_image(b"GIF89a......"), Err(ImageError::Unsupported(_))));
        assert!(matches!(decode_image(b"not an image"), Err(ImageError::Unsupported(_))));
    }

    #[test]
    fn new_rejects_bad_values() {
        assert!(ImageTensor::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageTensor::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(ImageTensor::new(1, 2, 1, vec![0.0]).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let img = ImageTensor::new(2, 3, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 3).unwrap(), img);
    }

    #[test]
    fn resize_checkerboard_to_single_pixel() {
        let img = ImageTensor::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize_bilinear(&img, 1, 1).unwrap();
        assert_eq!(out.data(), &[0.5]);
    }

    /// Independent per-pixel bilinear evaluation.
    fn bilinear_oracle(img: &ImageTensor, oh: usize, ow: usize) -> Vec<f64> {
        let (h, w) = (img.height() as f64, img.width() as f64);
        let mut out = Vec::new();
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = ((oy as f64 + 0.5) * h / oh as f64 - 0.5).max(0.0).min(h - 1.0);
                let sx = ((ox as f64 + 0.5) * w / ow as f64 - 0.5).max(0.0).min(w - 1.0);
                let mut acc = 0.0;
                for yy in 0..img.height() {
                    for xx in 0..img.width() {
                        let wy = (1.0 - (sy - yy as f64).abs()).max(0.0);
                        let wx = (1.0 - (sx - xx as f64).abs()).max(0.0);
                        acc += wy * wx * img.get(yy, xx, 0) as f64;
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn resize_ramp_matches_oracle() {
        let data: Vec<f32> = (0..16).map(|i| i as f32 / 15.0).collect();
        let img = ImageTensor::new(4, 4, 1, data).unwrap();
        for (oh, ow) in [(2, 2), (3, 5), (7, 3)] {
            let out = resize_bilinear(&img, oh, ow).unwrap();
            let expected = bilinear_oracle(&img, oh, ow);
            for (a, b) in out.data().iter().zip(&expected) {
                assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn luma_chroma_gray_axis_and_red() {
        let gray = ImageTensor::new(1, 1, 3, vec![0.4, 0.4, 0.4]).unwrap();
        let ycc = to_luma_chroma(&gray).unwrap();
        assert!((ycc.data()[0] - 0.4).abs() < 1e-6);
        assert!((ycc.data()[1] - 0.5).abs() < 1e-6);
        assert!((ycc.data()[2] - 0.5).abs() < 1e-6);

        let red = ImageTensor::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let ycc = to_luma_chroma(&red).unwrap();
        assert!((ycc.data()[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn luma_chroma_requires_three_channels() {
        let img = ImageTensor::filled(2, 2, 1, 0.5).unwrap();
        assert!(matches!(to_luma_chroma(&img), Err(ImageError::ChannelCount { .. })));
        assert!(matches!(from_luma_chroma(&img), Err(ImageError::ChannelCount { .. })));
    }

    #[test]
    fn histogram_examples() {
        let img = ImageTensor::filled(4, 4, 1, 0.5).unwrap();
        let h = histogram_256(&img, 0).unwrap();
        assert_eq!(h.bins[128], 16);
        assert_eq!(h.total, 16);
        assert_eq!(h.bins.iter().sum::<u64>(), 16);

        let img = ImageTensor::new(2, 2, 1, vec![0.0, 1.0 / 255.0, 1.0 / 255.0, 1.0]).unwrap();
        let h = histogram_256(&img, 0).unwrap();
        assert_eq!((h.bins[0], h.bins[1], h.bins[255]), (1, 2, 1));
        assert_eq!(h.total, 4);

        assert!(matches!(histogram_256(&img, 1), Err(ImageError::ChannelIndex { .. })));
    }

    fn arb_image(max: usize) -> impl Strategy<Value = ImageTensor> {
        (1..=max, 1..=max, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(0.0f32..=1.0, h * w * c)
                .prop_map(move |d| ImageTensor::new(h, w, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn resize_stays_within_input_bounds(img in arb_image(9), oh in 1usize..12, ow in 1usize..12) {
            let (lo, hi) = img.min_max();
            let out = resize_bilinear(&img, oh, ow).unwrap();
            prop_assert_eq!((out.height(), out.width(), out.channels()), (oh, ow, img.channels()));
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }

        #[test]
        fn histogram_total_is_pixel_count(img in arb_image(10)) {
            for c in 0..img.channels() {
                let h = histogram_256(&img, c).unwrap();
                prop_assert_eq!(h.total, (img.height() * img.width()) as u64);
                prop_assert_eq!(h.bins.iter().sum::<u64>(), h.total);
            }
        }

        #[test]
        fn decoded_pngs_stay_in_unit_range(raw in proptest::collection::vec(any::<u8>(), 12)) {
            let img = ImageTensor::new(2, 2, 3, raw.iter().map(|&v| v as f32 / 255.0).collect()).unwrap();
            let back = decode_image(&encode_image(&img, EncodeFormat::Png).unwrap()).unwrap();
            prop_assert_eq!(back.to_u8(), raw);
            prop_assert!(back.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn luma_chroma_round_trip_on_random_tensors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let data: Vec<f32> = (0..3 * 4 * 3).map(|_| rng.gen::<f32>()).collect();
            let img = ImageTensor::new(3, 4, 3, data).unwrap();
            let back = from_luma_chroma(&to_luma_chroma(&img).unwrap()).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }
}
