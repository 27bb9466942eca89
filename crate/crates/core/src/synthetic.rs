//! Procedural stand-in corpus: three visually distinct scalp-like textures
//! with seeded noise, written in the `<root>/<class>/` layout that
//! [`crate::dataset::ingest`] reads.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{ClassLabel, NUM_CLASSES};
use crate::image::{encode_image, EncodeFormat, ImageTensor};
use crate::rng;

/// Per-class image counts of the reference dataset.
pub const REFERENCE_COUNTS: [usize; NUM_CLASSES] = [65, 45, 40];

pub const SYNTHETIC: &str = "synthetic";

const NOISE_STD: f64 = 0.05;

struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn new(size: usize, base: [f32; 3]) -> Self {
        Self {
            size,
            px: vec![base; size * size],
        }
    }

    /// Blends `color` into every pixel whose coverage `f(y, x)` is positive,
    /// restricted to the box around `(cy, cx)` with half-size `reach`.
    fn paint(&mut self, cy: f32, cx: f32, reach: f32, color: [f32; 3], f: impl Fn(f32, f32) -> f32) {
        let s = self.size as f32;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil().min(s - 1.0)).max(0.0) as usize;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil().min(s - 1.0)).max(0.0) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let a = f(y as f32, x as f32).clamp(0.0, 1.0);
                if a > 0.0 {
                    let p = &mut self.px[y * self.size + x];
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - a) + color[c] * a;
                    }
                }
            }
        }
    }

    fn disc(&mut self, cy: f32, cx: f32, r: f32, color: [f32; 3]) {
        self.paint(cy, cx, r + 1.0, color, |y, x| r + 0.5 - ((y - cy).powi(2) + (x - cx).powi(2)).sqrt());
    }

    /// Line segment of the given half-width; pixels where `keep` is false are
    /// left alone.
    fn strand(&mut self, p: (f32, f32), q: (f32, f32), half_width: f32, color: [f32; 3], keep: &dyn Fn(f32, f32) -> bool) {
        let (cy, cx) = ((p.0 + q.0) / 2.0, (p.1 + q.1) / 2.0);
        let reach = ((q.0 - p.0).abs().max((q.1 - p.1).abs())) / 2.0 + half_width + 1.0;
        let (dy, dx) = (q.0 - p.0, q.1 - p.1);
        let len2 = (dy * dy + dx * dx).max(1e-6);
        self.paint(cy, cx, reach, color, |y, x| {
            if !keep(y, x) {
                return 0.0;
            }
            let t = (((y - p.0) * dy + (x - p.1) * dx) / len2).clamp(0.0, 1.0);
            let d = ((y - p.0 - t * dy).powi(2) + (x - p.1 - t * dx).powi(2)).sqrt();
            half_width + 0.5 - d
        });
    }

    fn hair<R: Rng>(&mut self, rng: &mut R, count: usize, keep: &dyn Fn(f32, f32) -> bool) {
        let s = self.size as f32;
        let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        for _ in 0..count {
            let a = angle + rng.gen_range(-0.3..0.3);
            let len = rng.gen_range(0.2..0.45) * s;
            let (y, x) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
            let (dy, dx) = (a.sin() * len / 2.0, a.cos() * len / 2.0);
            let shade = rng.gen_range(0.08..0.2);
            self.strand((y - dy, x - dx), (y + dy, x + dx), 0.6, [shade, shade * 0.8, shade * 0.6], keep);
        }
    }
}

fn jitter<R: Rng>(rng: &mut R, base: [f32; 3], amount: f32) -> [f32; 3] {
    base.map(|v| (v + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

/// One `size x size` RGB image of `label`, fully determined by
/// `(seed, label, index)`.
pub fn generate(label: ClassLabel, index: usize, seed: u64, size: usize) -> ImageTensor {
    let mut rng = rng::stream(seed, SYNTHETIC, &[label.index() as u64, index as u64]);
    let s = size as f32;
    let skin = jitter(&mut rng, [0.80, 0.62, 0.52], 0.05);
    let mut canvas = Canvas::new(size, skin);
    match label {
        ClassLabel::Alopecia => {
            // Dense hair with one large bare ellipse.
            let (cy, cx) = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
            let (ry, rx) = (rng.gen_range(0.25..0.36) * s, rng.gen_range(0.25..0.36) * s);
            let bare = move |y: f32, x: f32| ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0;
            canvas.hair(&mut rng, size * 3 / 2, &move |y, x| !bare(y, x));
        }
        ClassLabel::Psoriasis => {
            // Red inflamed base with silvery scale plaques and sparse hair.
            canvas = Canvas::new(size, jitter(&mut rng, [0.82, 0.40, 0.40], 0.05));
            for _ in 0..rng.gen_range(5..10) {
                let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                let r = rng.gen_range(0.07..0.14) * s;
                let scale = jitter(&mut rng, [0.92, 0.90, 0.88], 0.04);
                canvas.paint(cy, cx, r + 1.0, scale, |y, x| {
                    let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                    let ridge = 0.75 + 0.25 * ((y + x) * 0.9).sin();
                    (r + 0.5 - d).min(1.0) * ridge
                });
            }
            canvas.hair(&mut rng, size / 4, &|_, _| true);
        }
        ClassLabel::Folliculitis => {
            // Hair with scattered red papules around yellow pustule heads.
            canvas.hair(&mut rng, size, &|_, _| true);
            for _ in 0..rng.gen_range(15..30) {
                let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                let r = rng.gen_range(0.04..0.065) * s;
                canvas.disc(cy, cx, r, jitter(&mut rng, [0.78, 0.18, 0.18], 0.05));
                canvas.disc(cy, cx, r * 0.4, jitter(&mut rng, [0.95, 0.88, 0.55], 0.04));
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let data: Vec<f32> = canvas
        .px
        .iter()
        .flat_map(|p| *p)
        .map(|v| v + noise.sample(&mut rng) as f32)
        .collect();
    ImageTensor::from_clamped(size, size, 3, data).expect("canvas dimensions")
}

/// Writes `counts[k]` PNG images for each class under `root/<class>/`.
pub fn write_corpus(root: &Path, seed: u64, counts: [usize; NUM_CLASSES], size: usize) -> std::io::Result<()> {
    for label in ClassLabel::ALL {
        let dir = root.join(label.name());
        std::fs::create_dir_all(&dir)?;
        for i in 0..counts[label.index()] {
            let png = encode_image(&generate(label, i, seed, size), EncodeFormat::Png)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
            std::fs::write(dir.join(format!("{:03}.png", i)), png)?;
        }
    }
    Ok(())
}
