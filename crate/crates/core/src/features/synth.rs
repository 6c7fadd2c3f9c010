//! Synthetic speech-like features with controllable style statistics.
//!
//! Each bin follows a stationary AR(1) process driven by innovations that
//! are correlated across neighbouring bins. Slow sinusoidal drift and
//! multiplicative low-energy pauses are layered on top. Labeled sequences
//! additionally carry a latent token sequence, each token raising a
//! token-specific band of bins over a span of frames.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numerics::Tensor;

const DRIFT_PERIOD: f64 = 256.0;
const PAUSE_GAIN: f64 = 0.1;
const PAUSE_LEN: (usize, usize) = (4, 12);
const SPAN_LEN: (usize, usize) = (12, 20);
const GAP_LEN: (usize, usize) = (2, 4);
const TOKEN_AMPLITUDE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthStyle {
    /// Lag-1 autocorrelation of every bin, in `[0, 1]`.
    pub smoothness: f64,
    /// Expected pause onsets per 100 frames.
    pub pause_rate: f64,
    /// Amplitude of the slow drift.
    pub pitch_drift: f64,
    pub seed: u64,
}

impl SynthStyle {
    /// Read-speech analogue: smooth, few pauses.
    pub fn reading(seed: u64) -> Self {
        SynthStyle {
            smoothness: 0.9,
            pause_rate: 0.5,
            pitch_drift: 0.5,
            seed,
        }
    }

    /// Spontaneous-speech analogue: rougher, frequent pauses.
    pub fn spontaneous(seed: u64) -> Self {
        SynthStyle {
            smoothness: 0.6,
            pause_rate: 3.0,
            pitch_drift: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.smoothness) {
            return Err(Error::Invalid(format!(
                "smoothness must lie in [0, 1], got {}",
                self.smoothness
            )));
        }
        if !(self.pause_rate >= 0.0 && self.pause_rate <= 100.0) {
            return Err(Error::Invalid(format!(
                "pause_rate must lie in [0, 100], got {}",
                self.pause_rate
            )));
        }
        if !(self.pitch_drift >= 0.0) || !self.pitch_drift.is_finite() {
            return Err(Error::Invalid(format!(
                "pitch_drift must be non-negative, got {}",
                self.pitch_drift
            )));
        }
        Ok(())
    }
}

fn background(style: &SynthStyle, t: usize, d: usize) -> Result<Vec<f64>> {
    style.validate()?;
    if t == 0 || d == 0 {
        return Err(Error::Invalid(format!("need T >= 1 and D >= 1, got {t}x{d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(style.seed);
    let a = style.smoothness;
    let innov_gain = (1.0 - a * a).max(0.0).sqrt();
    let phases: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let mut out = vec![0.0; t * d];
    let mut state = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut pause_left = 0usize;
    for frame in 0..t {
        for zv in z.iter_mut() {
            *zv = rng.sample(StandardNormal);
        }
        let gain = if pause_left > 0 {
            pause_left -= 1;
            PAUSE_GAIN
        } else if rng.gen::<f64>() < style.pause_rate / 100.0 {
            pause_left = rng.gen_range(PAUSE_LEN.0..=PAUSE_LEN.1) - 1;
            PAUSE_GAIN
        } else {
            1.0
        };
        for b in 0..d {
            // band-structured innovation with unit variance
            let mut e = z[b];
            let mut var = 1.0;
            if b > 0 {
                e += 0.5 * z[b - 1];
                var += 0.25;
            }
            if b + 1 < d {
                e += 0.5 * z[b + 1];
                var += 0.25;
            }
            e /= f64::sqrt(var);
            state[b] = if frame == 0 { e } else { a * state[b] + innov_gain * e };
            let drift = style.pitch_drift
                * (2.0 * PI * frame as f64 / DRIFT_PERIOD + phases[b]).sin();
            out[frame * d + b] = gain * (state[b] + drift);
        }
    }
    Ok(out)
}

/// Generates an unlabeled `t×d` sequence; identical inputs give bitwise
/// identical frames.
pub fn synth_generate(style: &SynthStyle, t: usize, d: usize) -> Result<FeatureSequence> {
    let data = background(style, t, d)?;
    FeatureSequence::new(Tensor::matrix(t, d, data)?, format!("synth-{}", style.seed))
}

/// Generates a labeled sequence over token ids `1..vocab`.
///
/// Tokens occupy non-overlapping spans of 12 to 20 frames separated by
/// 2 to 4 frame gaps, and consecutive tokens always differ. The returned
/// transcript lists one id per span, in order.
pub fn synth_labeled(
    style: &SynthStyle,
    t: usize,
    d: usize,
    vocab: usize,
) -> Result<(FeatureSequence, Vec<usize>)> {
    if vocab < 3 {
        return Err(Error::Invalid(format!(
            "labeled synthesis needs at least two content tokens, vocab = {vocab}"
        )));
    }
    let mut data = background(style, t, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(style.seed ^ 0x5eed_70ce_a11c_e5e7);
    let content = vocab - 1;
    let width = (d as f64 / (2.0 * content as f64)).max(1.0);
    let mut tokens = Vec::new();
    let mut pos = rng.gen_range(GAP_LEN.0..=GAP_LEN.1);
    loop {
        let len = rng.gen_range(SPAN_LEN.0..=SPAN_LEN.1);
        if pos + len > t {
            break;
        }
        let token = loop {
            let k = rng.gen_range(1..vocab);
            if tokens.last() != Some(&k) {
                break k;
            }
        };
        let center = (token as f64 - 0.5) * d as f64 / content as f64;
        for frame in pos..pos + len {
            for b in 0..d {
                let x = (b as f64 + 0.5 - center) / width;
                data[frame * d + b] += TOKEN_AMPLITUDE * (-0.5 * x * x).exp();
            }
        }
        tokens.push(token);
        pos += len + rng.gen_range(GAP_LEN.0..=GAP_LEN.1);
    }
    let seq = FeatureSequence::new(Tensor::matrix(t, d, data)?, format!("synth-{}", style.seed))?;
    Ok((seq, tokens))
}
