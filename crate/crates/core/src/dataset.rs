//! Dataset ingestion, stratified splitting, augmentation and minority-class
//! oversampling.
//!
//! A dataset lives on disk as `<root>/<class_name>/*.{png,jpg,jpeg}`. The
//! [`DatasetManifest`] records every usable file with its label, SHA-256 and
//! split. Oversampling does not write files: an augmented copy is a manifest
//! entry pointing at its source sample, and the pixels are regenerated from
//! the master seed when the copy is materialized.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{decode_image, resize_bilinear, ImageError, ImageTensor};
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing class directory {0}")]
    MissingClass(PathBuf),
    #[error("class {0} has no usable images")]
    EmptyClass(ClassLabel),
    #[error("class {label} has {count} samples; at least 2 are needed to split")]
    ClassTooSmall { label: ClassLabel, count: usize },
    #[error("train fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
    #[error("manifest already has split assignments")]
    AlreadySplit,
    #[error("manifest has unassigned samples; split it first")]
    NotSplit,
    #[error("checksum mismatch for {path}: manifest {expected}, file {actual}")]
    Checksum {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("partition violated: {0}")]
    Leak(String),
    #[error("{0} is an augmented copy but the manifest records no augmentation")]
    MissingAugment(String),
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: ImageError,
    },
    #[error("manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Alopecia = 0,
    Psoriasis = 1,
    Folliculitis = 2,
}

pub const NUM_CLASSES: usize = 3;

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] =
        [ClassLabel::Alopecia, ClassLabel::Psoriasis, ClassLabel::Folliculitis];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Directory name and display name.
    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Alopecia => "alopecia",
            ClassLabel::Psoriasis => "psoriasis",
            ClassLabel::Folliculitis => "folliculitis",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

/// Marks a sample as an augmented copy of another manifest entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// Path of the original sample.
    pub source: String,
    /// Index into the `augment` random stream.
    pub copy_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledSample {
    /// Path relative to the manifest root, `/`-separated.
    pub path: String,
    pub label: ClassLabel,
    pub checksum: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented_from: Option<Provenance>,
}

impl LabeledSample {
    pub fn is_augmented(&self) -> bool {
        self.augmented_from.is_some()
    }

    /// Reads and decodes the file, verifying its checksum. Augmented copies
    /// load their source image; see [`materialize`] for the augmentation.
    pub fn load(&self, root: &Path) -> Result<ImageTensor, DatasetError> {
        let rel = self
            .augmented_from
            .as_ref()
            .map_or(self.path.as_str(), |p| p.source.as_str());
        let path = root.join(rel);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let actual = sha256_hex(&bytes);
        if actual != self.checksum {
            return Err(DatasetError::Checksum {
                path: rel.to_string(),
                expected: self.checksum.clone(),
                actual,
            });
        }
        decode_image(&bytes).map_err(|source| DatasetError::Image {
            path: rel.to_string(),
            source,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub type ClassCounts = BTreeMap<ClassLabel, usize>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub root: PathBuf,
    pub created_at: String,
    /// Set once the files under `root` are outputs of the preprocessing stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessed: Option<String>,
    /// Augmentation used to materialize oversampled copies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentSpec>,
    pub samples: Vec<LabeledSample>,
    pub class_counts: ClassCounts,
}

impl DatasetManifest {
    pub fn new(root: PathBuf, seed: u64, samples: Vec<LabeledSample>) -> Self {
        let class_counts = count_classes(samples.iter());
        Self {
            version: MANIFEST_VERSION,
            seed,
            root,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            preprocessed: None,
            augment: None,
            samples,
            class_counts,
        }
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(DatasetError::Version(m.version));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn split_counts(&self, split: Split) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in self.samples.iter().filter(|s| s.split == split) {
            counts[s.label.index()] += 1;
        }
        counts
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Checks the train/test partition: every sample assigned, no augmented
    /// copy in the test split, and no copy derived from a test sample.
    pub fn check_partition(&self) -> Result<(), DatasetError> {
        let mut split_of: HashMap<&str, Split> = HashMap::new();
        for s in self.samples.iter().filter(|s| !s.is_augmented()) {
            if s.split == Split::Unassigned {
                return Err(DatasetError::NotSplit);
            }
            if split_of.insert(&s.path, s.split).is_some() {
                return Err(DatasetError::Leak(format!("{} listed twice", s.path)));
            }
        }
        for s in self.samples.iter() {
            if let Some(p) = &s.augmented_from {
                if s.split != Split::Train {
                    return Err(DatasetError::Leak(format!("augmented copy of {} outside train", p.source)));
                }
                match split_of.get(p.source.as_str()) {
                    Some(Split::Train) => {}
                    _ => {
                        return Err(DatasetError::Leak(format!(
                            "augmented copy sourced from non-train sample {}",
                            p.source
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn count_classes<'a>(samples: impl Iterator<Item = &'a LabeledSample>) -> ClassCounts {
    let mut counts: ClassCounts = ClassLabel::ALL.iter().map(|&l| (l, 0)).collect();
    for s in samples {
        *counts.entry(s.label).or_default() += 1;
    }
    counts
}

/// A file found during ingestion that was left out of the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedFile {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    pub skipped: Vec<SkippedFile>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Scans `<root>/<class>/` for images. Files that fail to decode, or whose
/// content duplicates an earlier file, are listed in the report instead of
/// the manifest.
pub fn ingest(root: &Path, seed: u64) -> Result<IngestReport, DatasetError> {
    let mut candidates = Vec::new();
    let mut skipped = Vec::new();
    for label in ClassLabel::ALL {
        let dir = root.join(label.name());
        if !dir.is_dir() {
            return Err(DatasetError::MissingClass(dir));
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io_err(&dir))?;
        files.retain(|p| p.is_file());
        files.sort();
        for f in files {
            let rel = format!("{}/{}", label.name(), f.file_name().unwrap_or_default().to_string_lossy());
            if is_image_file(&f) {
                candidates.push((label, rel, f));
            } else {
                skipped.push(SkippedFile {
                    path: rel,
                    reason: "not a .png/.jpg/.jpeg file".into(),
                });
            }
        }
    }

    // Ok(checksum) for decodable files, Err(reason) otherwise.
    let checked: Vec<Result<Result<String, String>, DatasetError>> = candidates
        .par_iter()
        .map(|(_, _, path)| {
            let bytes = std::fs::read(path).map_err(io_err(path))?;
            Ok(decode_image(&bytes)
                .map(|_| sha256_hex(&bytes))
                .map_err(|e| e.to_string()))
        })
        .collect();

    let mut samples = Vec::new();
    let mut seen: HashMap<String, String> = HashMap::new();
    for ((label, rel, _), result) in candidates.into_iter().zip(checked) {
        match result? {
            Ok(checksum) => {
                if let Some(first) = seen.get(&checksum) {
                    skipped.push(SkippedFile {
                        path: rel,
                        reason: format!("duplicate content of {first}"),
                    });
                    continue;
                }
                seen.insert(checksum.clone(), rel.clone());
                samples.push(LabeledSample {
                    path: rel,
                    label,
                    checksum,
                    split: Split::Unassigned,
                    augmented_from: None,
                });
            }
            Err(reason) => skipped.push(SkippedFile { path: rel, reason }),
        }
    }
    skipped.sort_by(|a, b| a.path.cmp(&b.path));

    let manifest = DatasetManifest::new(root.to_path_buf(), seed, samples);
    for (&label, &count) in &manifest.class_counts {
        if count == 0 {
            return Err(DatasetError::EmptyClass(label));
        }
    }
    Ok(IngestReport { manifest, skipped })
}

/// Number of test samples per class: `floor(n * (1 - f))` each, then one
/// extra slot at a time to classes in ascending size order until the total
/// reaches `round(N * (1 - f))`.
pub fn test_counts(class_sizes: &[usize], train_fraction: f64) -> Vec<usize> {
    let test_fraction = 1.0 - train_fraction;
    let mut counts: Vec<usize> = class_sizes
        .iter()
        .map(|&n| (n as f64 * test_fraction + 1e-9).floor() as usize)
        .collect();
    let total: usize = class_sizes.iter().sum();
    let target = (total as f64 * test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by_key(|&i| (class_sizes[i], i));
    let mut assigned: usize = counts.iter().sum();
    let mut k = 0;
    while assigned < target {
        let i = order[k % order.len()];
        if counts[i] + 1 < class_sizes[i] {
            counts[i] += 1;
            assigned += 1;
        }
        k += 1;
        if k > order.len() * (target + 1) {
            break;
        }
    }
    counts
}

/// Seeded stratified train/test assignment.
pub fn stratified_split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Fraction(train_fraction));
    }
    if manifest.samples.iter().any(|s| s.split != Split::Unassigned) {
        return Err(DatasetError::AlreadySplit);
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, s) in manifest.samples.iter().enumerate() {
        by_class[s.label.index()].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(DatasetError::ClassTooSmall {
                label: ClassLabel::ALL[c],
                count: members.len(),
            });
        }
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let tests = test_counts(&sizes, train_fraction);

    let mut out = manifest.clone();
    out.seed = seed;
    for (c, members) in by_class.iter_mut().enumerate() {
        let mut rng = rng::stream(seed, rng::SPLIT, &[c as u64]);
        members.shuffle(&mut rng);
        for (k, &i) in members.iter().enumerate() {
            out.samples[i].split = if k < tests[c] { Split::Test } else { Split::Train };
        }
    }
    Ok(out)
}

/// Augmentation ranges. Angles are in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub rotation_range: f32,
    pub crop_fraction: f32,
    pub hflip: bool,
    pub vflip: bool,
    pub rescale_range: [f32; 2],
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation_range: 25.0,
            crop_fraction: 0.9,
            hflip: true,
            vflip: true,
            rescale_range: [0.9, 1.1],
        }
    }
}

impl AugmentSpec {
    /// A spec under which [`augment`] returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            rotation_range: 0.0,
            crop_fraction: 1.0,
            hflip: false,
            vflip: false,
            rescale_range: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(format!("crop_fraction must lie in (0, 1], got {}", self.crop_fraction));
        }
        if !(self.rotation_range >= 0.0 && self.rotation_range.is_finite()) {
            return Err(format!("rotation_range must be >= 0, got {}", self.rotation_range));
        }
        let [lo, hi] = self.rescale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(format!("rescale_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
        }
        Ok(())
    }
}

pub fn hflip(img: &ImageTensor) -> ImageTensor {
    remap(img, |y, x| (y, img.width() - 1 - x))
}

pub fn vflip(img: &ImageTensor) -> ImageTensor {
    remap(img, |y, x| (img.height() - 1 - y, x))
}

fn remap(img: &ImageTensor, src: impl Fn(usize, usize) -> (usize, usize)) -> ImageTensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            data.extend((0..c).map(|ch| img.get(sy, sx, ch)));
        }
    }
    ImageTensor::new(h, w, c, data).expect("remap preserves range")
}

/// Rotates about the image center by `degrees` (counter-clockwise as
/// displayed), sampling bilinearly with reflect fill. Multiples of 90 degrees
/// use exact trigonometric values.
pub fn rotate(img: &ImageTensor, degrees: f32) -> ImageTensor {
    let deg = degrees as f64;
    let (cos, sin) = if deg.rem_euclid(90.0) == 0.0 {
        match (deg.rem_euclid(360.0) / 90.0) as u32 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    };
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let sx = cos * px - sin * py + cx - 0.5;
            let sy = sin * px + cos * py + cy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let xs = [
                crate::denoise::reflect(x0 as isize, w),
                crate::denoise::reflect(x0 as isize + 1, w),
            ];
            let ys = [
                crate::denoise::reflect(y0 as isize, h),
                crate::denoise::reflect(y0 as isize + 1, h),
            ];
            for ch in 0..c {
                let v = |yy: usize, xx: usize| img.get(ys[yy], xs[xx], ch) as f64;
                let top = if fx == 0.0 { v(0, 0) } else { v(0, 0) * (1.0 - fx) + v(0, 1) * fx };
                let bottom = if fx == 0.0 { v(1, 0) } else { v(1, 0) * (1.0 - fx) + v(1, 1) * fx };
                let val = if fy == 0.0 { top } else { top * (1.0 - fy) + bottom * fy };
                data.push(val as f32);
            }
        }
    }
    ImageTensor::from_clamped(h, w, c, data).expect("rotation preserves shape")
}

/// Keeps the central `fraction` of each side, then resizes back.
pub fn center_crop_resize(img: &ImageTensor, fraction: f32) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let ch = ((h as f64 * fraction as f64).round() as usize).clamp(1, h);
    let cw = ((w as f64 * fraction as f64).round() as usize).clamp(1, w);
    if ch == h && cw == w {
        return img.clone();
    }
    let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
    let c = img.channels();
    let mut data = Vec::with_capacity(ch * cw * c);
    for y in y0..y0 + ch {
        for x in x0..x0 + cw {
            data.extend((0..c).map(|k| img.get(y, x, k)));
        }
    }
    let cropped = ImageTensor::new(ch, cw, c, data).expect("crop preserves range");
    resize_bilinear(&cropped, h, w).expect("non-zero dims")
}

pub fn rescale_intensity(img: &ImageTensor, factor: f32) -> ImageTensor {
    if factor == 1.0 {
        return img.clone();
    }
    let data = img.data().iter().map(|v| v * factor).collect();
    ImageTensor::from_clamped(img.height(), img.width(), img.channels(), data).expect("same shape")
}

/// Random augmentation: optional flips (p = 0.5 each), rotation, central crop
/// and intensity rescale, in that order. Every draw comes from `rng`, and the
/// same number of draws is made whatever the spec.
pub fn augment<R: Rng + ?Sized>(img: &ImageTensor, spec: &AugmentSpec, rng: &mut R) -> ImageTensor {
    let flip_h = rng.gen_bool(0.5);
    let flip_v = rng.gen_bool(0.5);
    let angle = rng.gen_range(-spec.rotation_range..=spec.rotation_range);
    let [lo, hi] = spec.rescale_range;
    let factor = rng.gen_range(lo..=hi);

    let mut out = img.clone();
    if spec.hflip && flip_h {
        out = hflip(&out);
    }
    if spec.vflip && flip_v {
        out = vflip(&out);
    }
    if angle != 0.0 {
        out = rotate(&out, angle);
    }
    out = center_crop_resize(&out, spec.crop_fraction);
    rescale_intensity(&out, factor)
}

/// Applies the augmentation recorded for an oversampled copy to its source
/// image.
pub fn materialize(source: &ImageTensor, provenance: &Provenance, spec: &AugmentSpec, seed: u64) -> ImageTensor {
    let mut rng = rng::stream(seed, rng::AUGMENT, &[provenance.copy_index]);
    augment(source, spec, &mut rng)
}

/// Tops up every minority class in the train split with augmented copies of
/// randomly chosen train originals until all train classes match the
/// largest one. The test split is left untouched.
pub fn oversample_balance(
    manifest: &DatasetManifest,
    spec: &AugmentSpec,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    if manifest.samples.iter().any(|s| s.split == Split::Unassigned) {
        return Err(DatasetError::NotSplit);
    }
    let counts = manifest.split_counts(Split::Train);
    let target = counts.iter().copied().max().unwrap_or(0);
    if counts.iter().all(|&c| c == target) {
        return Ok(manifest.clone());
    }
    let mut out = manifest.clone();
    out.augment = Some(*spec);
    let mut rng = rng::stream(seed, rng::OVERSAMPLE, &[]);
    let mut copy_index = manifest
        .samples
        .iter()
        .filter_map(|s| s.augmented_from.as_ref().map(|p| p.copy_index + 1))
        .max()
        .unwrap_or(0);
    for label in ClassLabel::ALL {
        let originals: Vec<&LabeledSample> = manifest
            .in_split(Split::Train)
            .filter(|s| s.label == label && !s.is_augmented())
            .collect();
        let missing = target - counts[label.index()];
        if missing > 0 && originals.is_empty() {
            return Err(DatasetError::EmptyClass(label));
        }
        for _ in 0..missing {
            let src = originals[rng.gen_range(0..originals.len())];
            out.samples.push(LabeledSample {
                path: format!("{}#aug{copy_index}", src.path),
                label,
                checksum: src.checksum.clone(),
                split: Split::Train,
                augmented_from: Some(Provenance {
                    source: src.path.clone(),
                    copy_index,
                }),
            });
            copy_index += 1;
        }
    }
    out.class_counts = count_classes(out.samples.iter());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{encode_image, EncodeFormat};

    fn sample(label: ClassLabel, i: usize) -> LabeledSample {
        LabeledSample {
            path: format!("{}/{i:03}.png", label.name()),
            label,
            checksum: format!("{:064x}", label.index() * 1000 + i),
            split: Split::Unassigned,
            augmented_from: None,
        }
    }

    pub(crate) fn synthetic_manifest(counts: [usize; 3]) -> DatasetManifest {
        let samples = ClassLabel::ALL
            .iter()
            .flat_map(|&l| (0..counts[l.index()]).map(move |i| sample(l, i)))
            .collect();
        DatasetManifest::new(PathBuf::from("/nonexistent"), 0, samples)
    }

    #[test]
    fn split_reproduces_published_counts() {
        let m = stratified_split(&synthetic_manifest([65, 45, 40]), 0.7, 42).unwrap();
        assert_eq!(m.split_counts(Split::Test), [19, 13, 13]);
        assert_eq!(m.split_counts(Split::Train), [46, 32, 27]);
        m.check_partition().unwrap();
    }

    #[test]
    fn split_exact_division() {
        let m = stratified_split(&synthetic_manifest([10, 10, 10]), 0.7, 1).unwrap();
        assert_eq!(m.split_counts(Split::Test), [3, 3, 3]);
        assert_eq!(m.split_counts(Split::Train), [7, 7, 7]);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let base = synthetic_manifest([10, 10, 10]);
        let assignment = |seed| {
            stratified_split(&base, 0.7, seed)
                .unwrap()
                .samples
                .iter()
                .map(|s| s.split)
                .collect::<Vec<_>>()
        };
        assert_eq!(assignment(5), assignment(5));
        let mut distinct: Vec<Vec<Split>> = (0..20).map(assignment).collect();
        distinct.sort_by_key(|v| format!("{v:?}"));
        distinct.dedup();
        assert!(distinct.len() >= 19, "only {} distinct splits over 20 seeds", distinct.len());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            stratified_split(&synthetic_manifest([5, 1, 5]), 0.7, 0),
            Err(DatasetError::ClassTooSmall { label: ClassLabel::Psoriasis, count: 1 })
        ));
        assert!(matches!(
            stratified_split(&synthetic_manifest([5, 5, 5]), 1.0, 0),
            Err(DatasetError::Fraction(_))
        ));
        let once = stratified_split(&synthetic_manifest([5, 5, 5]), 0.7, 0).unwrap();
        assert!(matches!(stratified_split(&once, 0.7, 0), Err(DatasetError::AlreadySplit)));
    }

    #[test]
    fn oversampling_balances_train_only() {
        let split = stratified_split(&synthetic_manifest([65, 45, 40]), 0.7, 42).unwrap();
        let balanced = oversample_balance(&split, &AugmentSpec::default(), 42).unwrap();
        assert_eq!(balanced.split_counts(Split::Train), [46, 46, 46]);
        assert_eq!(balanced.split_counts(Split::Test), split.split_counts(Split::Test));
        let copies: Vec<_> = balanced.samples.iter().filter(|s| s.is_augmented()).collect();
        assert_eq!(copies.iter().filter(|s| s.label == ClassLabel::Psoriasis).count(), 14);
        assert_eq!(copies.iter().filter(|s| s.label == ClassLabel::Folliculitis).count(), 19);
        assert_eq!(&balanced.samples[..split.samples.len()], &split.samples[..]);
        balanced.check_partition().unwrap();
        assert_eq!(balanced, oversample_balance(&split, &AugmentSpec::default(), 42).unwrap());
    }

    #[test]
    fn oversampling_balanced_set_is_noop() {
        let split = stratified_split(&synthetic_manifest([10, 10, 10]), 0.7, 3).unwrap();
        assert_eq!(oversample_balance(&split, &AugmentSpec::default(), 3).unwrap(), split);
    }

    #[test]
    fn partition_check_catches_leaks() {
        let split = stratified_split(&synthetic_manifest([10, 10, 10]), 0.7, 3).unwrap();
        let mut leaky = split.clone();
        let test_src = leaky.in_split(Split::Test).next().unwrap().clone();
        leaky.samples.push(LabeledSample {
            path: format!("{}#aug0", test_src.path),
            split: Split::Train,
            augmented_from: Some(Provenance {
                source: test_src.path.clone(),
                copy_index: 0,
            }),
            ..test_src
        });
        assert!(matches!(leaky.check_partition(), Err(DatasetError::Leak(_))));
    }

    fn tensor(h: usize, w: usize, vals: &[f32]) -> ImageTensor {
        ImageTensor::new(h, w, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn identity_spec_leaves_image_unchanged() {
        let img = tensor(3, 4, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.0, 0.25]);
        let mut rng = rng::stream(0, "test", &[]);
        for _ in 0..10 {
            assert_eq!(augment(&img, &AugmentSpec::identity(), &mut rng), img);
        }
    }

    #[test]
    fn flips_are_involutions() {
        let img = tensor(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(hflip(&img).data(), &[0.3, 0.2, 0.1, 0.6, 0.5, 0.4]);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(vflip(&vflip(&img)), img);
    }

    #[test]
    fn right_angle_rotation_permutes_pixels() {
        let (a, b, c, d) = (0.1, 0.2, 0.3, 0.4);
        let img = tensor(2, 2, &[a, b, c, d]);
        assert_eq!(rotate(&img, 90.0).data(), &[b, d, a, c]);
        assert_eq!(rotate(&img, 0.0), img);
        assert_eq!(rotate(&rotate(&img, 90.0), -90.0), img);
        assert_eq!(rotate(&img, 180.0).data(), &[d, c, b, a]);
    }

    #[test]
    fn augment_stays_in_range_and_is_seeded() {
        let data: Vec<f32> = (0..16 * 16 * 3).map(|i| (i % 97) as f32 / 96.0).collect();
        let img = ImageTensor::new(16, 16, 3, data).unwrap();
        let p = Provenance {
            source: "x".into(),
            copy_index: 4,
        };
        let a = materialize(&img, &p, &AugmentSpec::default(), 9);
        assert_eq!(a, materialize(&img, &p, &AugmentSpec::default(), 9));
        assert_ne!(a, img);
        assert_eq!((a.height(), a.width(), a.channels()), (16, 16, 3));
    }

    #[test]
    fn augment_spec_validation() {
        assert!(AugmentSpec::default().validate().is_ok());
        assert!(AugmentSpec { crop_fraction: 0.0, ..Default::default() }.validate().is_err());
        assert!(AugmentSpec { rotation_range: -1.0, ..Default::default() }.validate().is_err());
        assert!(AugmentSpec { rescale_range: [1.2, 1.1], ..Default::default() }.validate().is_err());
    }

    fn write_png(path: &Path, value: f32) {
        let img = ImageTensor::filled(4, 4, 3, value).unwrap();
        std::fs::write(path, encode_image(&img, EncodeFormat::Png).unwrap()).unwrap();
    }

    #[test]
    fn ingest_minimal_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        for (i, label) in ClassLabel::ALL.iter().enumerate() {
            std::fs::create_dir(dir.path().join(label.name())).unwrap();
            write_png(&dir.path().join(label.name()).join("a.png"), i as f32 / 4.0);
        }
        let report = ingest(dir.path(), 1).unwrap();
        assert_eq!(report.manifest.class_counts.values().copied().collect::<Vec<_>>(), vec![1, 1, 1]);
        assert!(report.skipped.is_empty());

        std::fs::write(dir.path().join("psoriasis/broken.jpg"), b"\xff\xd8\xff\xe0garbage").unwrap();
        let report = ingest(dir.path(), 1).unwrap();
        assert_eq!(report.manifest.samples.len(), 3);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].path, "psoriasis/broken.jpg");
        assert!(!report.skipped[0].reason.is_empty());

        let s = &report.manifest.samples[0];
        assert_eq!(s.load(dir.path()).unwrap().height(), 4);
        let mut tampered = s.clone();
        tampered.checksum = "00".into();
        assert!(matches!(tampered.load(dir.path()), Err(DatasetError::Checksum { .. })));
    }

    #[test]
    fn ingest_errors_name_the_class() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("alopecia")).unwrap();
        std::fs::create_dir(dir.path().join("psoriasis")).unwrap();
        let err = ingest(dir.path(), 0).unwrap_err();
        assert!(err.to_string().contains("folliculitis"), "{err}");

        std::fs::create_dir(dir.path().join("folliculitis")).unwrap();
        write_png(&dir.path().join("alopecia/a.png"), 0.1);
        write_png(&dir.path().join("psoriasis/a.png"), 0.2);
        assert!(matches!(ingest(dir.path(), 0), Err(DatasetError::EmptyClass(ClassLabel::Folliculitis))));
    }

    #[test]
    fn manifest_json_round_trip() {
        let split = stratified_split(&synthetic_manifest([4, 4, 4]), 0.7, 3).unwrap();
        let balanced = oversample_balance(&split, &AugmentSpec::default(), 3).unwrap();
        let back: DatasetManifest = serde_json::from_str(&balanced.to_json()).unwrap();
        assert_eq!(back, balanced);
        let json: serde_json::Value = serde_json::from_str(&balanced.to_json()).unwrap();
        // test counts (2, 1, 1) leave train (2, 3, 3); one alopecia copy is added
        assert_eq!(json["class_counts"]["alopecia"], 5);
    }
}
