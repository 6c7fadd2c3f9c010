//! Convolutional prenet, Transformer encoder/decoder and the prediction
//! heads, expressed as operations on a [`Tape`](crate::numerics::Tape).
//!
//! Parameters live in [`ModelParams`] under hierarchical names:
//!
//! - `prenet.conv{1,2}.{weight,bias}`, `prenet.proj.{weight,bias}`
//! - `encoder.layers.{l}.…` with `l` counted from 1
//! - `mpc_head.{weight,bias}` (frame reconstruction, `d_model → D·r`)
//! - `ctc_head.{weight,bias}`
//! - `decoder.embed`, `decoder.layers.{l}.…`, `decoder.norm.*`, `decoder.out.*`

mod attention;
mod forward;
mod params;

pub use attention::{causal_mask, AttentionMask, MaskKind};
pub use forward::{
    blocks_to_frames, ctc_logits, decoder_forward, encoder_forward, frames_to_blocks,
    mpc_projection_reshape, positional_encoding, prenet_forward, teacher_forcing_pair, Bound,
};
pub use params::{encoder_layer_of, init_params, param_group, param_specs, ModelParams, ParamInit};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temporal downsampling of the prenet: two stride-2 convolutions.
pub const DOWNSAMPLE: usize = 4;

/// Token id shared by the CTC blank and the decoder's start/end symbol.
pub const BLANK: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub downsample: usize,
    pub feat_dim: usize,
    /// Output vocabulary, including the blank id 0.
    pub vocab_size: usize,
    pub prenet_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_layers: 4,
            decoder_layers: 2,
            d_model: 32,
            d_ff: 64,
            heads: 4,
            downsample: DOWNSAMPLE,
            feat_dim: 40,
            vocab_size: 8,
            prenet_channels: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.encoder_layers < 1 {
            return fail("encoder needs at least one layer".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.downsample != DOWNSAMPLE {
            return fail(format!(
                "downsample rate is fixed at {DOWNSAMPLE}, got {}",
                self.downsample
            ));
        }
        if self.d_model < 2 || self.d_ff == 0 || self.prenet_channels == 0 || self.feat_dim == 0 {
            return fail("model dimensions must be positive (d_model >= 2)".into());
        }
        if self.vocab_size < 2 {
            return fail("vocabulary needs the blank plus at least one token".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
