//! Binary feature files.
//!
//! Layout (little-endian): `b"MPCF"`, version `u32` = 1, frame count `u32`,
//! bin count `u32`, then `T·D` `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"MPCF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn save_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (t, d) = (seq.num_frames(), seq.dim());
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in seq.frames().data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a feature file; the utterance id is the file stem.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            what: format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::BadVersion {
            path: path.into(),
            version,
        });
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    if t == 0 || d == 0 {
        return Err(Error::Malformed {
            path: path.into(),
            what: format!("empty shape {t}x{d}"),
        });
    }
    let expected = HEADER_LEN + 4 * t * d;
    let payload = bytes.len();
    if payload < expected {
        return Err(Error::Truncated {
            path: path.into(),
            what: format!(
                "header declares {t}x{d} values, payload holds {}",
                (payload - HEADER_LEN) / 4
            ),
        });
    }
    if payload > expected {
        return Err(Error::Malformed {
            path: path.into(),
            what: format!("{} trailing bytes after {t}x{d} values", payload - expected),
        });
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Malformed {
            path: path.into(),
            what: "non-finite feature value".into(),
        });
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(Tensor::matrix(t, d, data)?, id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_raw(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    fn header(t: u32, d: u32) -> Vec<u8> {
        let mut b = FEATURE_MAGIC.to_vec();
        for w in [1u32, t, d] {
            b.extend_from_slice(&w.to_le_bytes());
        }
        b
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header(1, 1);
        bytes[0] = b'X';
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        let p = write_raw(dir.path(), "a.mpcf", &bytes);
        assert!(matches!(load_features(p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn short_payload_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header(10, 1);
        for i in 0..9 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let p = write_raw(dir.path(), "a.mpcf", &bytes);
        assert!(matches!(load_features(p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_and_bad_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header(1, 1);
        bytes.extend_from_slice(&[0u8; 8]);
        let p = write_raw(dir.path(), "a.mpcf", &bytes);
        assert!(matches!(load_features(p), Err(Error::Malformed { .. })));

        let mut bytes = header(1, 1);
        bytes[4] = 7;
        bytes.extend_from_slice(&[0u8; 4]);
        let p = write_raw(dir.path(), "b.mpcf", &bytes);
        assert!(matches!(load_features(p), Err(Error::BadVersion { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_exact_at_single_precision(
            t in 1usize..20,
            d in 1usize..10,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1e6..1e6)).collect();
            let seq = FeatureSequence::new(Tensor::matrix(t, d, data.clone()).unwrap(), "utt").unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("utt.mpcf");
            save_features(&seq, &p).unwrap();
            let back = load_features(&p).unwrap();
            prop_assert_eq!(back.frames().shape(), &[t, d]);
            prop_assert_eq!(back.utterance_id.as_str(), "utt");
            for (a, b) in back.frames().data().iter().zip(&data) {
                prop_assert_eq!(*a, *b as f32 as f64);
            }
        }
    }
}
