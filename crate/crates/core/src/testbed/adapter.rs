//! Contract for capturing attention stacks from external generators.
//!
//! No external model ships with this crate. An adapter wraps a generator,
//! hooks its cross-attention layers at the requested denoising steps and
//! returns [`AttentionStack`]s that satisfy the core invariants: maps
//! post-softmax, heads averaged, one token slot per prompt word (padding
//! masked), `block_ids` strictly increasing.
//!
//! Block choice per architecture:
//! - UNet generators: the final 10 encoder blocks ([`unet_final_encoder_blocks`]).
//! - DiT generators: 10 consecutive blocks from the middle of the stack ([`dit_middle_blocks`]).
//! - The toy generator: all of its cross-attention layers.
//!
//! Joint-sequence transformers have no separate cross-attention: text and
//! image tokens share one self-attention. Their text→image maps are the
//! image-query/text-key sub-block of that attention ([`slice_joint_attention`]).

use alloc::vec::Vec;

use crate::data::{AttentionStack, Prompt};
use crate::error::{bail, Result};

/// Number of blocks an adapter for a large generator captures.
pub const ADAPTER_BLOCKS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    UNet,
    Dit,
    JointSequence,
    Toy,
}

pub trait CaptureAdapter {
    fn architecture(&self) -> Architecture;

    /// Indices of the hooked blocks, strictly increasing.
    fn block_ids(&self) -> Vec<u32>;

    /// Runs the generator for `prompt` and `seed` far enough to capture one
    /// stack per entry of `steps` (1-based).
    fn capture(&mut self, prompt: &Prompt, seed: u64, steps: &[u32]) -> Result<Vec<AttentionStack>>;
}

/// The last `count` of `n_encoder_blocks` encoder blocks.
pub fn unet_final_encoder_blocks(n_encoder_blocks: usize, count: usize) -> Result<Vec<u32>> {
    if count == 0 || count > n_encoder_blocks {
        bail!(Argument, "cannot take {count} of {n_encoder_blocks} encoder blocks");
    }
    Ok((n_encoder_blocks - count..n_encoder_blocks).map(|b| b as u32).collect())
}

/// `count` consecutive blocks centered in a stack of `n_blocks`.
pub fn dit_middle_blocks(n_blocks: usize, count: usize) -> Result<Vec<u32>> {
    if count == 0 || count > n_blocks {
        bail!(Argument, "cannot take {count} of {n_blocks} blocks");
    }
    let start = (n_blocks - count) / 2;
    Ok((start..start + count).map(|b| b as u32).collect())
}

/// Extracts text→image weights from a joint attention matrix.
///
/// `probs` is `[query, key]` over a sequence of `n_text` text tokens
/// followed (or preceded, when `text_first` is false) by `n_image` image
/// tokens. Returns `[text token, image position]`, i.e. for each text token
/// the weight every image query places on it.
pub fn slice_joint_attention(probs: &[f32], n_text: usize, n_image: usize, text_first: bool) -> Result<Vec<f32>> {
    let len = n_text + n_image;
    if probs.len() != len * len {
        bail!(Shape, "joint attention has {} entries, expected {len}²", probs.len());
    }
    let (text0, image0) = if text_first { (0, n_text) } else { (n_image, 0) };
    let mut out = Vec::with_capacity(n_text * n_image);
    for t in 0..n_text {
        for p in 0..n_image {
            out.push(probs[(image0 + p) * len + text0 + t]);
        }
    }
    Ok(out)
}
