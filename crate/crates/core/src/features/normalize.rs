use crate::error::{Error, Result};
use crate::features::FeatureSequence;

pub const STD_FLOOR: f64 = 1e-5;

/// Per-bin corpus statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation of every bin over all frames
    /// of the corpus.
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let seqs: Vec<&FeatureSequence> = corpus.into_iter().collect();
        let Some(first) = seqs.first() else {
            return Err(Error::Invalid("cannot fit a normalizer on an empty corpus".into()));
        };
        let d = first.dim();
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for s in &seqs {
            if s.dim() != d {
                return Err(Error::shape("Normalizer::fit", &[d], &[s.dim()]));
            }
            for row in s.frames().data().chunks_exact(d) {
                sum.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            count += s.num_frames();
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; d];
        for s in &seqs {
            for row in s.frames().data().chunks_exact(d) {
                for ((a, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *a += (v - m) * (v - m);
                }
            }
        }
        let std = sq.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        let d = self.mean.len();
        if seq.dim() != d {
            return Err(Error::shape("Normalizer::apply", &[d], &[seq.dim()]));
        }
        let mut out = seq.clone();
        for row in out.frames_mut().data_mut().chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}
