//! Corpus manifests: one `feature_path<TAB>token ids` entry per line.
//! The token field is optional; lines starting with `#` are comments.
//! Relative feature paths are resolved against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::{load_features, FeatureSequence, Normalizer};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub feature_path: PathBuf,
    pub transcript: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path, source: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |what: String| Error::Manifest {
                path: source.to_path_buf(),
                line: i + 1,
                what,
            };
            let mut fields = line.splitn(2, '\t');
            let path_field = fields.next().unwrap_or_default().trim();
            if path_field.is_empty() {
                return Err(err("missing feature path".into()));
            }
            let transcript = match fields.next() {
                None => None,
                Some(tokens) => Some(
                    tokens
                        .split_whitespace()
                        .map(|t| {
                            t.parse::<usize>()
                                .map_err(|_| err(format!("bad token id {t:?}")))
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
            };
            let p = Path::new(path_field);
            let feature_path = if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            };
            entries.push(ManifestEntry {
                feature_path,
                transcript,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Manifest::parse(&text, base, path)
    }

    /// Writes the manifest; entries under the manifest's directory are
    /// stored as relative paths.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut out = String::new();
        for e in &self.entries {
            let p = e.feature_path.strip_prefix(base).unwrap_or(&e.feature_path);
            out.push_str(&p.to_string_lossy());
            if let Some(tokens) = &e.transcript {
                out.push('\t');
                let ids: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
                out.push_str(&ids.join(" "));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads every referenced feature file, checking that all share one
    /// bin count.
    pub fn load_sequences(&self) -> Result<Vec<FeatureSequence>> {
        let mut out: Vec<FeatureSequence> = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let seq = load_features(&e.feature_path)?;
            if let Some(first) = out.first() {
                if first.dim() != seq.dim() {
                    return Err(Error::Malformed {
                        path: e.feature_path.clone(),
                        what: format!("{} bins, corpus uses {}", seq.dim(), first.dim()),
                    });
                }
            }
            out.push(seq);
        }
        Ok(out)
    }

    /// Checks that every entry has a transcript with ids below `vocab`.
    pub fn check_transcripts(&self, vocab: usize) -> Result<()> {
        for e in &self.entries {
            let Some(tokens) = &e.transcript else {
                return Err(Error::Malformed {
                    path: e.feature_path.clone(),
                    what: "labeled manifest entry has no transcript".into(),
                });
            };
            if let Some(&id) = tokens.iter().find(|&&id| id >= vocab) {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
        }
        Ok(())
    }

    pub fn fit_normalizer(&self) -> Result<Normalizer> {
        if self.is_empty() {
            return Err(Error::Invalid("cannot fit a normalizer on an empty manifest".into()));
        }
        let seqs = self.load_sequences()?;
        Normalizer::fit(&seqs)
    }
}
