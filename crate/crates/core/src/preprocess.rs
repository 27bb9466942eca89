//! Per-image preprocessing chain: denoise, then CLAHE on luma, then resize
//! to the network input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoise::{Denoiser, FilterError};
use crate::equalize::{clahe, ClaheParams, EqualizeError};
use crate::image::{resize_bilinear, ImageError, ImageTensor};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("denoise: {0}")]
    Denoise(#[from] FilterError),
    #[error("clahe: {0}")]
    Equalize(#[from] EqualizeError),
    #[error("resize: {0}")]
    Resize(#[from] ImageError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocessor {
    pub denoiser: Denoiser,
    /// `None` disables equalization.
    pub clahe: Option<ClaheParams>,
    pub input_size: usize,
}

impl Preprocessor {
    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor, PreprocessError> {
        let mut out = self.denoiser.apply(img)?;
        if let Some(p) = &self.clahe {
            out = clahe(&out, p)?;
        }
        Ok(resize_bilinear(&out, self.input_size, self.input_size)?)
    }
}
