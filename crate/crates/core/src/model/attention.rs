use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Full,
    Causal,
}

/// Additive self-attention mask with entries in `{0, -inf}`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub kind: MaskKind,
    pub matrix: Tensor,
}

impl AttentionMask {
    pub fn new(kind: MaskKind, t: usize) -> Result<Self> {
        match kind {
            MaskKind::Full => {
                if t < 1 {
                    return Err(Error::Invalid("attention mask needs t >= 1".into()));
                }
                Ok(AttentionMask {
                    kind,
                    matrix: Tensor::zeros(&[t, t]),
                })
            }
            MaskKind::Causal => causal_mask(t),
        }
    }

    pub fn len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Strictly-upper-triangular `-inf`, zero elsewhere.
pub fn causal_mask(t: usize) -> Result<AttentionMask> {
    if t < 1 {
        return Err(Error::Invalid("attention mask needs t >= 1".into()));
    }
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = f64::NEG_INFINITY;
        }
    }
    Ok(AttentionMask {
        kind: MaskKind::Causal,
        matrix: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn causal_mask_shapes() {
        assert_eq!(causal_mask(1).unwrap().matrix.data(), &[0.0]);
        let ninf = f64::NEG_INFINITY;
        assert_eq!(
            causal_mask(3).unwrap().matrix.data(),
            &[0.0, ninf, ninf, 0.0, 0.0, ninf, 0.0, 0.0, 0.0]
        );
        assert!(causal_mask(0).is_err());
        let full = AttentionMask::new(MaskKind::Full, 3).unwrap();
        assert!(full.matrix.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causal_softmax_rows_normalize() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![0.3, -2.0, 1.5, 0.7]).unwrap());
        let y = tape.masked_softmax(x, &causal_mask(2).unwrap().matrix).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[..2], [1.0, 0.0]);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-12);
    }
}
