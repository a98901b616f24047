//! 3D Vision Transformer: masked-patch encoder, light reconstruction decoder
//! with a shared mask token, projection heads and positional-table
//! interpolation for views whose patch grid differs from the stored one.

mod layers;
mod model;
mod params;

pub use layers::{softmax_last, Block, LayerNorm, Linear};
pub use model::{
    decode, encode, encode_full, grid_for, init_params, interp_pos_embed, project, Decoder, Encoder, PatchBatch,
    ProjectionHead, TokenEmbedding,
};
pub use params::ParamStore;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{numel, Shape3};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: Shape3,
    /// Patch grid the positional tables are stored at (the local-view grid).
    pub base_grid_dims: Shape3,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub proj_hidden: usize,
    /// Output width K of the projection heads.
    pub proj_dim: usize,
}

impl ModelConfig {
    fn with_encoder(encoder: EncoderConfig) -> Self {
        Self {
            decoder_dim: encoder.embed_dim / 2,
            decoder_depth: 2,
            decoder_heads: encoder.num_heads,
            proj_hidden: 2048,
            proj_dim: 512,
            encoder,
        }
    }

    pub fn vit_tiny(patch_size: Shape3, base_grid_dims: Shape3) -> Self {
        Self::with_encoder(EncoderConfig {
            embed_dim: 192,
            depth: 12,
            num_heads: 3,
            mlp_ratio: 4,
            patch_size,
            base_grid_dims,
        })
    }

    pub fn vit_base(patch_size: Shape3, base_grid_dims: Shape3) -> Self {
        Self::with_encoder(EncoderConfig {
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            patch_size,
            base_grid_dims,
        })
    }

    /// 64-wide, 4-deep encoder on 8^3 patches of 16^3 local views.
    pub fn desk() -> Self {
        Self::with_encoder(EncoderConfig {
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            patch_size: [8; 3],
            base_grid_dims: [2; 3],
        })
    }

    pub fn patch_voxels(&self) -> usize {
        numel(self.encoder.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if e.depth == 0 || self.decoder_depth == 0 {
            return bad("encoder and decoder depth must be at least 1".into());
        }
        if e.num_heads == 0 || e.embed_dim % e.num_heads != 0 {
            return bad(format!("embed_dim {} not divisible by {} heads", e.embed_dim, e.num_heads));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return bad(format!(
                "decoder_dim {} not divisible by {} heads",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if self.proj_dim < 2 || self.proj_hidden == 0 {
            return bad("projection output must have K > 1".into());
        }
        if numel(e.patch_size) == 0 || numel(e.base_grid_dims) == 0 {
            return bad("patch size and base grid must be non-empty".into());
        }
        Ok(())
    }
}
