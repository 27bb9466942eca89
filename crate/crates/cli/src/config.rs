//! Pipeline configuration: a strict JSON file overlaid with command-line
//! flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, ValueEnum};
use follicle::dataset::AugmentSpec;
use follicle::denoise::{Denoiser, NlmParams};
use follicle::equalize::ClaheParams;
use follicle::nn::TrainConfig;
use follicle::preprocess::Preprocessor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dataset_root: Option<PathBuf>,
    pub seed: u64,
    pub denoiser: Denoiser,
    /// `null` disables equalization.
    pub clahe: Option<ClaheParams>,
    pub augment: AugmentSpec,
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            seed: 42,
            denoiser: Denoiser::default(),
            clahe: Some(ClaheParams::default()),
            augment: AugmentSpec::default(),
            train: TrainConfig::default(),
            train_fraction: 0.7,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            bail!("train_fraction must lie in (0, 1), got {}", self.train_fraction);
        }
        self.augment.validate().map_err(anyhow::Error::msg)?;
        if let Some(c) = &self.clahe {
            c.validate()?;
        }
        if let Denoiser::Nlm(p) = &self.denoiser {
            p.validate()?;
        }
        Ok(())
    }

    pub fn preprocessor(&self) -> Preprocessor {
        Preprocessor {
            denoiser: self.denoiser,
            clahe: self.clahe,
            input_size: self.train.input_size,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form, with the
    /// location fields (`dataset_root`, `output_dir`) blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset_root = None;
        c.output_dir = PathBuf::new();
        let compact = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))[..16].to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DenoiserKind {
    Nlm,
    Median,
    Bilateral,
    Gaussian,
    None,
}

/// One flag per config field. Unset flags leave the file value alone.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Directory holding one subdirectory per class.
    #[arg(long, global = true)]
    pub dataset_root: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub denoiser: Option<DenoiserKind>,
    #[arg(long, global = true)]
    pub nlm_patch_size: Option<usize>,
    #[arg(long, global = true)]
    pub nlm_patch_distance: Option<usize>,
    #[arg(long, global = true)]
    pub nlm_h: Option<f32>,
    #[arg(long, global = true)]
    pub median_kernel: Option<usize>,
    #[arg(long, global = true)]
    pub bilateral_sigma_spatial: Option<f32>,
    #[arg(long, global = true)]
    pub bilateral_sigma_range: Option<f32>,
    #[arg(long, global = true)]
    pub gaussian_sigma: Option<f32>,
    #[arg(long, global = true)]
    pub gaussian_kernel: Option<usize>,
    /// Disable CLAHE.
    #[arg(long, global = true, action = ArgAction::SetTrue)]
    pub no_clahe: bool,
    #[arg(long, global = true)]
    pub clahe_tiles_x: Option<usize>,
    #[arg(long, global = true)]
    pub clahe_tiles_y: Option<usize>,
    #[arg(long, global = true)]
    pub clahe_clip: Option<f32>,
    #[arg(long, global = true)]
    pub rotation_range: Option<f32>,
    #[arg(long, global = true)]
    pub crop_fraction: Option<f32>,
    #[arg(long, global = true)]
    pub hflip: Option<bool>,
    #[arg(long, global = true)]
    pub vflip: Option<bool>,
    #[arg(long, global = true)]
    pub rescale_min: Option<f32>,
    #[arg(long, global = true)]
    pub rescale_max: Option<f32>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub beta1: Option<f64>,
    #[arg(long, global = true)]
    pub beta2: Option<f64>,
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    #[arg(long, global = true)]
    pub input_size: Option<usize>,
    /// Comma-separated filter counts of the three conv blocks.
    #[arg(long, global = true, value_delimiter = ',')]
    pub conv_filters: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub dense_hidden: Option<usize>,
    #[arg(long, global = true)]
    pub train_fraction: Option<f64>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl Overrides {
    fn apply_denoiser(&self, d: &mut Denoiser) -> Result<()> {
        if let Some(kind) = self.denoiser {
            let same = matches!(
                (kind, &*d),
                (DenoiserKind::Nlm, Denoiser::Nlm(_))
                    | (DenoiserKind::Median, Denoiser::Median { .. })
                    | (DenoiserKind::Bilateral, Denoiser::Bilateral { .. })
                    | (DenoiserKind::Gaussian, Denoiser::Gaussian { .. })
                    | (DenoiserKind::None, Denoiser::None)
            );
            if !same {
                *d = match kind {
                    DenoiserKind::Nlm => Denoiser::Nlm(NlmParams::default()),
                    DenoiserKind::Median => Denoiser::Median { kernel_size: 3 },
                    DenoiserKind::Bilateral => Denoiser::Bilateral {
                        sigma_spatial: 1.5,
                        sigma_range: 0.1,
                    },
                    DenoiserKind::Gaussian => Denoiser::Gaussian {
                        sigma: 1.0,
                        kernel_size: 5,
                    },
                    DenoiserKind::None => Denoiser::None,
                };
            }
        }
        let flags: [(&str, &str, bool); 8] = [
            ("nlm-patch-size", "nlm", self.nlm_patch_size.is_some()),
            ("nlm-patch-distance", "nlm", self.nlm_patch_distance.is_some()),
            ("nlm-h", "nlm", self.nlm_h.is_some()),
            ("median-kernel", "median", self.median_kernel.is_some()),
            ("bilateral-sigma-spatial", "bilateral", self.bilateral_sigma_spatial.is_some()),
            ("bilateral-sigma-range", "bilateral", self.bilateral_sigma_range.is_some()),
            ("gaussian-sigma", "gaussian", self.gaussian_sigma.is_some()),
            ("gaussian-kernel", "gaussian", self.gaussian_kernel.is_some()),
        ];
        for (flag, kind, given) in flags {
            if given && d.name() != kind {
                bail!("--{flag} needs the {kind} denoiser, configured is {}", d.name());
            }
        }
        match d {
            Denoiser::Nlm(p) => {
                set(&mut p.patch_size, self.nlm_patch_size);
                set(&mut p.patch_distance, self.nlm_patch_distance);
                set(&mut p.h, self.nlm_h);
            }
            Denoiser::Median { kernel_size } => set(kernel_size, self.median_kernel),
            Denoiser::Bilateral {
                sigma_spatial,
                sigma_range,
            } => {
                set(sigma_spatial, self.bilateral_sigma_spatial);
                set(sigma_range, self.bilateral_sigma_range);
            }
            Denoiser::Gaussian { sigma, kernel_size } => {
                set(sigma, self.gaussian_sigma);
                set(kernel_size, self.gaussian_kernel);
            }
            Denoiser::None => {}
        }
        Ok(())
    }

    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if self.dataset_root.is_some() {
            cfg.dataset_root = self.dataset_root.clone();
        }
        self.apply_denoiser(&mut cfg.denoiser)?;
        let clahe_flags = self.clahe_tiles_x.is_some() || self.clahe_tiles_y.is_some() || self.clahe_clip.is_some();
        if self.no_clahe {
            if clahe_flags {
                bail!("--no-clahe conflicts with --clahe-* flags");
            }
            cfg.clahe = None;
        } else if clahe_flags {
            let c = cfg.clahe.get_or_insert_with(ClaheParams::default);
            set(&mut c.tiles_x, self.clahe_tiles_x);
            set(&mut c.tiles_y, self.clahe_tiles_y);
            set(&mut c.clip_limit, self.clahe_clip);
        }
        let a = &mut cfg.augment;
        set(&mut a.rotation_range, self.rotation_range);
        set(&mut a.crop_fraction, self.crop_fraction);
        set(&mut a.hflip, self.hflip);
        set(&mut a.vflip, self.vflip);
        set(&mut a.rescale_range[0], self.rescale_min);
        set(&mut a.rescale_range[1], self.rescale_max);
        let t = &mut cfg.train;
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.epochs, self.epochs);
        set(&mut t.optimizer.lr, self.lr);
        set(&mut t.optimizer.beta1, self.beta1);
        set(&mut t.optimizer.beta2, self.beta2);
        set(&mut t.optimizer.eps, self.eps);
        set(&mut t.dropout, self.dropout);
        set(&mut t.input_size, self.input_size);
        set(&mut t.conv_filters, self.conv_filters.clone());
        set(&mut t.dense_hidden, self.dense_hidden);
        set(&mut cfg.train_fraction, self.train_fraction);
        Ok(())
    }
}

/// File (or defaults), then flags, then `--seed` / `--out`, then validation.
/// The master seed replaces whatever `train.seed` held.
pub fn resolve(
    config_path: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    overrides: &Overrides,
) -> Result<PipelineConfig> {
    let mut cfg = match config_path {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o.to_path_buf();
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}
