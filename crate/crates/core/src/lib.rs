//! Memory-augmented masked autoencoder for unsupervised image anomaly
//! detection.
//!
//! The encoder sees a random subset of image patches and extends every
//! self-attention layer with learnable key/value memory. A light decoder
//! reconstructs all patches from the visible tokens plus a shared mask token,
//! cross-attending to every encoder level and fusing them with sigmoid gates.
//! Test images are scored by the structural dissimilarity between input and
//! reconstruction, pooled over several mask seeds.
//!
//! ```
//! use memae::patchgrid::{sample_mask, ImageTensor};
//! use memae::pipeline::{MaskedAutoencoder, ModelConfig};
//!
//! let mut cfg = ModelConfig::tiny();
//! cfg.encoder.depth = 2;
//! let model = MaskedAutoencoder::<f32>::new(cfg.clone()).unwrap();
//! let image = ImageTensor::zeros(cfg.image_size, cfg.image_size, cfg.channels).unwrap();
//! let partition = sample_mask(cfg.num_patches(), cfg.mask_ratio, 7).unwrap();
//! let recon = model.forward(&image, &partition).unwrap();
//! assert_eq!(recon.image.height(), 64);
//! ```

pub mod autodiff;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evalharness;
pub mod imaging;
pub mod params;
pub mod patchgrid;
pub mod pipeline;
pub mod real;
pub mod scoring;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
pub struct ReadmeDoctests;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/patches.md")]
    mod patches {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/decoder.md")]
    mod decoder {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
