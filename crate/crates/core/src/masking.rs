//! Dynamic chunk masking of input features.
//!
//! Frames are grouped into fixed-size chunks and each chunk overlapping the
//! valid region is masked independently. A fresh plan is drawn every time a
//! sequence is fed to the model.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureSequence;

pub const DEFAULT_CHUNK_SIZE: usize = 4;
pub const DEFAULT_MASK_PROB: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub chunk_size: usize,
    pub masked_chunks: BTreeSet<usize>,
    /// One flag per frame, `true` where the frame is masked. Never set on
    /// padding frames.
    pub frame_mask: Vec<bool>,
}

impl MaskPlan {
    /// A plan that masks nothing.
    pub fn empty(t: usize, chunk_size: usize) -> Self {
        MaskPlan {
            chunk_size,
            masked_chunks: BTreeSet::new(),
            frame_mask: vec![false; t],
        }
    }

    pub fn masked_frames(&self) -> usize {
        self.frame_mask.iter().filter(|&&m| m).count()
    }

    /// Number of chunks that were eligible for masking.
    pub fn eligible_chunks(&self, valid: usize) -> usize {
        valid.div_ceil(self.chunk_size)
    }
}

pub fn plan_masks<R: Rng + ?Sized>(
    t: usize,
    valid: usize,
    chunk_size: usize,
    p: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("mask probability must lie in [0, 1], got {p}")));
    }
    if chunk_size == 0 {
        return Err(Error::Invalid("chunk size must be at least 1".into()));
    }
    if valid > t {
        return Err(Error::Invalid(format!("valid length {valid} exceeds {t} frames")));
    }
    let mut plan = MaskPlan::empty(t, chunk_size);
    for chunk in 0..valid.div_ceil(chunk_size) {
        if rng.gen::<f64>() < p {
            plan.masked_chunks.insert(chunk);
            let end = ((chunk + 1) * chunk_size).min(valid);
            plan.frame_mask[chunk * chunk_size..end].fill(true);
        }
    }
    Ok(plan)
}

/// Zeroes every masked frame; other frames are copied unchanged.
pub fn apply_mask(seq: &FeatureSequence, plan: &MaskPlan) -> Result<FeatureSequence> {
    if plan.frame_mask.len() != seq.num_frames() {
        return Err(Error::shape(
            "apply_mask",
            &[seq.num_frames()],
            &[plan.frame_mask.len()],
        ));
    }
    let d = seq.dim();
    let mut out = seq.clone();
    for (row, &masked) in out
        .frames_mut()
        .data_mut()
        .chunks_exact_mut(d)
        .zip(&plan.frame_mask)
    {
        if masked {
            row.fill(0.0);
        }
    }
    Ok(out)
}
