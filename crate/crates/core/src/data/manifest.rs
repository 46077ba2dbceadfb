//! Split manifests (TOML). Paths are relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::features::read_features;
use super::labels::read_labels;
use super::{segment, SubSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub audio: PathBuf,
    pub visual: PathBuf,
    pub labels: PathBuf,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    pub d_a: usize,
    pub d_v: usize,
    /// Frames per clip.
    pub clip_len: usize,
    /// Clips per sub-sequence.
    pub seq_len: usize,
    #[serde(default)]
    pub sequences: Vec<SequenceRecord>,
}

impl DatasetManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Checks that referenced files exist and declare matching dimensions.
    pub fn validate(&self, base: &Path) -> Result<()> {
        let mut ids = BTreeSet::new();
        for rec in &self.sequences {
            if !ids.insert(&rec.id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate sequence id {} in {} manifest",
                    rec.id, self.split
                )));
            }
            for p in [&rec.audio, &rec.visual, &rec.labels] {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(Error::InvalidArgument(format!(
                        "sequence {}: missing file {}",
                        rec.id,
                        full.display()
                    )));
                }
            }
            let a = read_features(&base.join(&rec.audio))?;
            let v = read_features(&base.join(&rec.visual))?;
            if a.cols() != self.d_a || v.cols() != self.d_v {
                return Err(Error::InvalidArgument(format!(
                    "sequence {}: feature dims {}/{} differ from manifest {}/{}",
                    rec.id,
                    a.cols(),
                    v.cols(),
                    self.d_a,
                    self.d_v
                )));
            }
            if a.rows() != rec.frames || v.rows() != rec.frames {
                return Err(Error::InvalidArgument(format!(
                    "sequence {}: frame counts {}/{} differ from manifest {}",
                    rec.id,
                    a.rows(),
                    v.rows(),
                    rec.frames
                )));
            }
        }
        Ok(())
    }
}

/// Errors if any sequence id appears in more than one manifest.
pub fn check_disjoint(manifests: &[&DatasetManifest]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for m in manifests {
        for r in &m.sequences {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "sequence id {} appears in more than one split",
                    r.id
                )));
            }
        }
    }
    Ok(())
}

/// Reads every sequence of a manifest and segments it, in manifest order.
/// Unannotated frames are removed from features and labels alike.
pub fn load_split(manifest_path: &Path) -> Result<(DatasetManifest, Vec<SubSequence>)> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for rec in &manifest.sequences {
        let audio = read_features(&base.join(&rec.audio))?;
        let visual = read_features(&base.join(&rec.visual))?;
        if audio.cols() != manifest.d_a || visual.cols() != manifest.d_v {
            return Err(Error::shape(
                "sequence features vs manifest dims",
                (audio.cols(), visual.cols()),
                (manifest.d_a, manifest.d_v),
            ));
        }
        let labels = read_labels(&base.join(&rec.labels))?;
        let keep: Vec<usize> = labels.iter().map(|l| l.frame).collect();
        if let Some(&bad) = keep.iter().find(|&&f| f >= audio.rows() || f >= visual.rows()) {
            return Err(Error::InvalidArgument(format!(
                "sequence {}: label frame {bad} beyond {} feature frames",
                rec.id,
                audio.rows()
            )));
        }
        let (audio, visual) = if keep.len() == audio.rows() && keep.iter().enumerate().all(|(i, &f)| i == f) {
            (audio, visual)
        } else {
            let pick = |m: &crate::numerics::Matrix| {
                crate::numerics::Matrix::from_vec(
                    keep.len(),
                    m.cols(),
                    keep.iter().flat_map(|&f| m.row(f).iter().copied()).collect(),
                )
            };
            (pick(&audio)?, pick(&visual)?)
        };
        let pairs: Vec<(f64, f64)> = labels.iter().map(|l| (l.valence, l.arousal)).collect();
        let seg = segment(&rec.id, &audio, &visual, &pairs, manifest.clip_len, manifest.seq_len)?;
        out.extend(seg.subsequences);
    }
    Ok((manifest, out))
}
