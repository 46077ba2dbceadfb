//! Sub-sequences, segmentation of per-frame streams, dataset manifests,
//! and the synthetic generator.

pub mod features;
pub mod labels;
pub mod manifest;
pub mod probe;
pub mod synth;

use crate::error::{Error, Result};
use crate::model::{Modality, ModalityFeatures, Target};
use crate::numerics::Matrix;

pub use features::{read_features, write_features};
pub use labels::{read_labels, FrameLabel};
pub use manifest::{load_split, DatasetManifest, SequenceRecord, Split};
pub use synth::{synth_generate, SynthConfig};

/// `L` clips of paired audio/visual features with per-clip targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SubSequence {
    pub id: String,
    pub audio: ModalityFeatures,
    pub visual: ModalityFeatures,
    pub valence: Vec<f64>,
    pub arousal: Vec<f64>,
}

impl SubSequence {
    pub fn new(
        id: impl Into<String>,
        audio: Matrix,
        visual: Matrix,
        valence: Vec<f64>,
        arousal: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        let l = audio.rows();
        if visual.rows() != l || valence.len() != l || arousal.len() != l {
            return Err(Error::InvalidArgument(format!(
                "sub-sequence {id}: clip counts disagree (audio {l}, visual {}, valence {}, arousal {})",
                visual.rows(),
                valence.len(),
                arousal.len()
            )));
        }
        if let Some(v) = valence.iter().chain(&arousal).find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "sub-sequence {id}: label {v} outside [-1, 1]"
            )));
        }
        Ok(SubSequence {
            id,
            audio: ModalityFeatures::new(Modality::Audio, audio)?,
            visual: ModalityFeatures::new(Modality::Visual, visual)?,
            valence,
            arousal,
        })
    }

    pub fn clips(&self) -> usize {
        self.valence.len()
    }

    /// Per-clip labels for a single target.
    ///
    /// Panics on [`Target::Both`]; use [`SubSequence::target_matrix`].
    pub fn labels(&self, target: Target) -> &[f64] {
        match target {
            Target::Valence => &self.valence,
            Target::Arousal => &self.arousal,
            Target::Both => panic!("labels() needs a single target"),
        }
    }

    /// `L x outputs` target block.
    pub fn target_matrix(&self, target: Target) -> Matrix {
        match target {
            Target::Both => {
                let rows: Vec<[f64; 2]> = self
                    .valence
                    .iter()
                    .zip(&self.arousal)
                    .map(|(&v, &a)| [v, a])
                    .collect();
                Matrix::from_rows(&rows)
            }
            t => Matrix::column(self.labels(t)),
        }
    }
}

/// Result of segmenting one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub subsequences: Vec<SubSequence>,
    /// Trailing frames that did not fill a whole sub-sequence.
    pub dropped_frames: usize,
    pub warnings: Vec<String>,
}

fn clip_means(features: &Matrix, clip_len: usize, clips: usize) -> Matrix {
    let mut out = Matrix::zeros(clips, features.cols());
    for c in 0..clips {
        let row = out.row_mut(c);
        for f in c * clip_len..(c + 1) * clip_len {
            for (o, v) in row.iter_mut().zip(features.row(f)) {
                *o += v;
            }
        }
        for o in row.iter_mut() {
            *o /= clip_len as f64;
        }
    }
    out
}

/// Groups frames into non-overlapping clips of `clip_len` (features and
/// labels are frame means), then clips into non-overlapping
/// sub-sequences of `seq_len`. A trailing partial sub-sequence is dropped.
pub fn segment(
    id: &str,
    audio: &Matrix,
    visual: &Matrix,
    labels: &[(f64, f64)],
    clip_len: usize,
    seq_len: usize,
) -> Result<Segmentation> {
    if clip_len == 0 || seq_len == 0 {
        return Err(Error::InvalidArgument(
            "clip length and sub-sequence length must be positive".into(),
        ));
    }
    let frames = audio.rows();
    if visual.rows() != frames || labels.len() != frames {
        return Err(Error::InvalidArgument(format!(
            "sequence {id}: frame counts disagree (audio {frames}, visual {}, labels {})",
            visual.rows(),
            labels.len()
        )));
    }
    let per_sub = clip_len * seq_len;
    let n_sub = frames / per_sub;
    let dropped_frames = frames - n_sub * per_sub;
    let mut warnings = Vec::new();
    if n_sub == 0 {
        let msg = format!(
            "sequence {id}: {frames} frames is shorter than one sub-sequence ({per_sub} frames)"
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let clips = n_sub * seq_len;
    let a = clip_means(audio, clip_len, clips);
    let v = clip_means(visual, clip_len, clips);
    let lab = Matrix::from_rows(&labels.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>());
    let lab = if labels.is_empty() {
        Matrix::zeros(0, 2)
    } else {
        clip_means(&lab, clip_len, clips)
    };
    let mut subsequences = Vec::with_capacity(n_sub);
    for s in 0..n_sub {
        let rows: Vec<usize> = (s * seq_len..(s + 1) * seq_len).collect();
        let take = |m: &Matrix| {
            Matrix::from_rows(&rows.iter().map(|&r| m.row(r).to_vec()).collect::<Vec<_>>())
        };
        let valence = rows.iter().map(|&r| lab.get(r, 0)).collect();
        let arousal = rows.iter().map(|&r| lab.get(r, 1)).collect();
        subsequences.push(SubSequence::new(
            format!("{id}#{s}"),
            take(&a),
            take(&v),
            valence,
            arousal,
        )?);
    }
    Ok(Segmentation {
        subsequences,
        dropped_frames,
        warnings,
    })
}
