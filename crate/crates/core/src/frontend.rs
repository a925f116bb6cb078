//! The fixed, non-learned parts around the model: vocabulary, visual codec
//! and the frozen understanding encoder.

use crate::codec::{LatentGrid, ToyImage, UnderstandingEncoder, VisualCodec, Vocab, LATENT_CHANNELS};
use crate::data::CANVAS;
use crate::error::Result;
use crate::model::ModelConfig;

#[derive(Debug, Clone)]
pub struct Frontend {
    pub vocab: Vocab,
    pub codec: VisualCodec,
    pub encoder: UnderstandingEncoder,
}

impl Frontend {
    pub fn new(cfg: &ModelConfig, codec_seed: u64, encoder_seed: u64) -> Self {
        Self {
            vocab: Vocab::with_size(cfg.vocab_size),
            codec: VisualCodec::new(codec_seed),
            encoder: UnderstandingEncoder::new(encoder_seed, cfg.d_model),
        }
    }

    /// Raster-ordered latent tokens of an image (unstandardized).
    pub fn latent_tokens(&self, img: &ToyImage) -> Result<Vec<Vec<f64>>> {
        Ok(self.codec.encode(img)?.to_tokens())
    }

    /// Inverse of [`Frontend::latent_tokens`], clamped to `[0, 1]`.
    pub fn decode_tokens(&self, tokens: &[Vec<f64>]) -> Result<ToyImage> {
        let latent = CANVAS / crate::codec::CODEC_PATCH;
        let grid = LatentGrid::from_tokens(tokens, latent, latent, LATENT_CHANNELS)?;
        self.codec.decode(&grid)
    }

    /// One frozen feature vector per encoder patch.
    pub fn features(&self, img: &ToyImage) -> Result<Vec<Vec<f64>>> {
        Ok(self.encoder.encode(img)?.features)
    }
}
