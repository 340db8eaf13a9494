//! Synthetic degradations and the patch pipeline that turns clean images into
//! (degraded, clean) training and evaluation pairs.

mod dataset;
mod jpeg;
mod patches;
mod resample;
mod texture;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError};

pub use dataset::{load_dataset, DatasetSource};
pub use jpeg::{dequantize, forward_dct, inverse_dct, jpeg_degrade, quantization_table, quantize, LUMINANCE_TABLE};
pub use patches::{extract_patches, grid_positions, PatchSet};
pub use resample::{bicubic_resize, cubic, gaussian_blur, gaussian_kernel, resized_extent};
pub use texture::{procedural_dataset, procedural_image};

#[derive(Debug, Error)]
pub enum DegradeError {
    #[error("noise sigma must be finite and >= 0, got {0}")]
    InvalidSigma(f64),
    #[error("JPEG quality must be in 1..=100, got {0}")]
    InvalidQuality(u32),
    #[error("invalid scale: {0}")]
    InvalidScale(String),
    #[error("blur kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("blur std must be > 0, got {0}")]
    InvalidBlur(f64),
    #[error("patch {patch} does not fit: {detail}")]
    PatchTooLarge { patch: usize, detail: String },
    #[error("invalid patch grid: {0}")]
    InvalidGrid(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Result<T, E = DegradeError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationKind {
    /// Additive white Gaussian noise with std `sigma` on the 0..255 scale.
    Awgn {
        sigma: f64,
    },
    Jpeg {
        quality: u32,
    },
    BicubicDown {
        scale: usize,
    },
    BlurThenDown {
        scale: usize,
        blur_size: usize,
        blur_std: f64,
    },
}

/// A corruption recipe. `seed` only matters for stochastic kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    #[serde(flatten)]
    pub kind: DegradationKind,
    #[serde(default)]
    pub seed: u64,
}

impl DegradationSpec {
    pub fn awgn(sigma: f64, seed: u64) -> Self {
        Self { kind: DegradationKind::Awgn { sigma }, seed }
    }

    pub fn jpeg(quality: u32) -> Self {
        Self { kind: DegradationKind::Jpeg { quality }, seed: 0 }
    }

    pub fn bicubic_down(scale: usize) -> Self {
        Self { kind: DegradationKind::BicubicDown { scale }, seed: 0 }
    }

    pub fn blur_then_down(scale: usize, blur_size: usize, blur_std: f64) -> Self {
        Self { kind: DegradationKind::BlurThenDown { scale, blur_size, blur_std }, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DegradationKind::Awgn { sigma } if !(sigma.is_finite() && sigma >= 0.0) => {
                Err(DegradeError::InvalidSigma(sigma))
            }
            DegradationKind::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(DegradeError::InvalidQuality(quality))
            }
            DegradationKind::BicubicDown { scale } | DegradationKind::BlurThenDown { scale, .. } if scale == 0 => {
                Err(DegradeError::InvalidScale("scale must be >= 1".into()))
            }
            DegradationKind::BlurThenDown { blur_size, .. } if blur_size % 2 == 0 => {
                Err(DegradeError::EvenKernel(blur_size))
            }
            DegradationKind::BlurThenDown { blur_std, .. } if !(blur_std > 0.0 && blur_std.is_finite()) => {
                Err(DegradeError::InvalidBlur(blur_std))
            }
            _ => Ok(()),
        }
    }

    /// Ratio of clean to degraded spatial extent.
    pub fn downscale(&self) -> usize {
        match self.kind {
            DegradationKind::BicubicDown { scale } | DegradationKind::BlurThenDown { scale, .. } => scale,
            _ => 1,
        }
    }

    /// Degrades `image`. `stream` selects an independent noise field under
    /// the same seed, so patch `i` of a set can use `stream = i`.
    pub fn apply(&self, image: &Image, stream: u64) -> Result<Image> {
        self.validate()?;
        match self.kind {
            DegradationKind::Awgn { sigma } => add_awgn_stream(image, sigma, self.seed, stream),
            DegradationKind::Jpeg { quality } => jpeg_degrade(image, quality),
            DegradationKind::BicubicDown { scale } => bicubic_resize(image, 1, scale),
            DegradationKind::BlurThenDown { scale, blur_size, blur_std } => {
                bicubic_resize(&gaussian_blur(image, blur_size, blur_std)?, 1, scale)
            }
        }
    }
}

/// `image + N(0, sigma^2)` per sample, without clipping.
pub fn add_awgn(image: &Image, sigma: f64, seed: u64) -> Result<Image> {
    add_awgn_stream(image, sigma, seed, 0)
}

fn add_awgn_stream(image: &Image, sigma: f64, seed: u64, stream: u64) -> Result<Image> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(DegradeError::InvalidSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut out = image.clone();
    for v in out.data_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = (*v as f64 + sigma * n) as f32;
    }
    Ok(out)
}
