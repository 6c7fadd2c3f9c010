//! Filterbank-like feature sequences: synthesis, file I/O, corpus manifests
//! and normalization.

mod io;
mod manifest;
mod normalize;
mod synth;

pub use io::{load_features, save_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use manifest::{Manifest, ManifestEntry};
pub use normalize::{Normalizer, STD_FLOOR};
pub use synth::{synth_generate, synth_labeled, SynthStyle};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default number of feature bins.
pub const DEFAULT_FEAT_DIM: usize = 40;

/// A `T×D` matrix of feature frames with its utterance metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
    pub utterance_id: String,
    /// Nominal sample rate in Hz; informational only.
    pub sample_rate_tag: u32,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, utterance_id: impl Into<String>) -> Result<Self> {
        let (t, d) = frames.dims2()?;
        if t == 0 || d == 0 {
            return Err(Error::Invalid(format!(
                "feature sequence needs at least one frame and one bin, got {t}x{d}"
            )));
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite("feature sequence"));
        }
        Ok(FeatureSequence {
            frames: frames.with_requires_grad(false),
            utterance_id: utterance_id.into(),
            sample_rate_tag: 16_000,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }

    pub(crate) fn frames_mut(&mut self) -> &mut Tensor {
        &mut self.frames
    }
}

/// Appends zero frames so the length becomes the least multiple of `r`
/// that is at least the original length. Returns the padded sequence and
/// the original frame count.
pub fn pad_to_multiple(seq: &FeatureSequence, r: usize) -> (FeatureSequence, usize) {
    let r = r.max(1);
    let (t, d) = (seq.num_frames(), seq.dim());
    let padded_t = t.div_ceil(r) * r;
    let mut data = seq.frames.data().to_vec();
    data.resize(padded_t * d, 0.0);
    let mut out = seq.clone();
    out.frames = Tensor::matrix(padded_t, d, data).expect("padded shape");
    (out, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize, d: usize) -> FeatureSequence {
        let data = (0..t * d).map(|i| i as f64 + 1.0).collect();
        FeatureSequence::new(Tensor::matrix(t, d, data).unwrap(), "u").unwrap()
    }

    #[test]
    fn padding_examples() {
        let (p, valid) = pad_to_multiple(&seq(8, 2), 4);
        assert_eq!((p.num_frames(), valid), (8, 8));

        let s = seq(9, 2);
        let (p, valid) = pad_to_multiple(&s, 4);
        assert_eq!((p.num_frames(), valid), (12, 9));
        assert!(p.frames().data()[18..].iter().all(|&v| v == 0.0));
        assert_eq!(&p.frames().data()[..18], s.frames().data());

        let (p, valid) = pad_to_multiple(&seq(1, 3), 4);
        assert_eq!((p.num_frames(), valid), (4, 1));
    }

    #[test]
    fn empty_or_non_finite_sequences_are_rejected() {
        assert!(FeatureSequence::new(Tensor::zeros(&[0, 3]), "x").is_err());
        let bad = Tensor::matrix(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(FeatureSequence::new(bad, "x").is_err());
    }
}
