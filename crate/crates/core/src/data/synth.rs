//! Synthetic complementary-modality dataset.
//!
//! Each sequence carries two independent AR(1) latents (valence, arousal),
//! squashed by `tanh` into the targets. Both modalities observe the
//! targets through fixed random projections plus Gaussian noise. On each
//! clip at most one modality is masked (zeroed), so the target is always
//! recoverable from the other.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::Target;
use crate::numerics::Matrix;

use super::features::write_features;
use super::labels::{write_labels, FrameLabel};
use super::manifest::{check_disjoint, DatasetManifest, SequenceRecord, Split};
use super::probe::{linear_probe_ccc, ProbeInput};
use super::{segment, SubSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub test_sequences: usize,
    /// Sub-sequences per generated sequence.
    pub subseqs_per_sequence: usize,
    pub seq_len: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub ar_coef: f64,
    pub noise_sigma: f64,
    /// Per-clip probability of masking each modality.
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_sequences: 200,
            val_sequences: 50,
            test_sequences: 50,
            subseqs_per_sequence: 10,
            seq_len: 8,
            d_a: 16,
            d_v: 16,
            ar_coef: 0.9,
            noise_sigma: 1.0,
            mask_prob: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=0.5).contains(&self.mask_prob) {
            return bad(format!("mask_prob {} must lie in [0, 0.5]", self.mask_prob));
        }
        if !(self.ar_coef > -1.0 && self.ar_coef < 1.0) {
            return bad(format!("ar_coef {} must lie in (-1, 1)", self.ar_coef));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if self.seq_len == 0 || self.d_a == 0 || self.d_v == 0 || self.subseqs_per_sequence == 0 {
            return bad("seq_len, d_a, d_v and subseqs_per_sequence must be positive".into());
        }
        Ok(())
    }

    pub fn sequences(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_sequences,
            Split::Val => self.val_sequences,
            Split::Test => self.test_sequences,
        }
    }
}

/// One generated sequence at frame level (one frame per clip).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    pub id: String,
    pub audio: Matrix,
    pub visual: Matrix,
    pub labels: Vec<FrameLabel>,
    pub audio_masked: Vec<bool>,
    pub visual_masked: Vec<bool>,
}

impl SynthSequence {
    pub fn subsequences(&self, seq_len: usize) -> Result<Vec<SubSequence>> {
        let pairs: Vec<(f64, f64)> = self.labels.iter().map(|l| (l.valence, l.arousal)).collect();
        Ok(segment(&self.id, &self.audio, &self.visual, &pairs, 1, seq_len)?.subsequences)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub config: SynthConfig,
    pub splits: Vec<(Split, Vec<SynthSequence>)>,
}

impl SynthData {
    pub fn split(&self, split: Split) -> &[SynthSequence] {
        self.splits
            .iter()
            .find(|(s, _)| *s == split)
            .map_or(&[], |(_, v)| v.as_slice())
    }

    pub fn subsequences(&self, split: Split) -> Result<Vec<SubSequence>> {
        let mut out = Vec::new();
        for s in self.split(split) {
            out.extend(s.subsequences(self.config.seq_len)?);
        }
        Ok(out)
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn ar_latent<R: Rng + ?Sized>(n: usize, rho: f64, rng: &mut R) -> Vec<f64> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut z = normal(rng);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(z);
        z = rho * z + innov * normal(rng);
    }
    out
}

/// Generates all three splits in memory.
pub fn synth_data(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // projections shared by every split
    let proj_a = Matrix::from_vec(
        2,
        config.d_a,
        (0..2 * config.d_a).map(|_| normal(&mut rng)).collect(),
    )?;
    let proj_v = Matrix::from_vec(
        2,
        config.d_v,
        (0..2 * config.d_v).map(|_| normal(&mut rng)).collect(),
    )?;
    let frames = config.seq_len * config.subseqs_per_sequence;
    let mut splits = Vec::new();
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(si as u64 + 1);
        let mut seqs = Vec::with_capacity(config.sequences(split));
        for q in 0..config.sequences(split) {
            let zv = ar_latent(frames, config.ar_coef, &mut rng);
            let za = ar_latent(frames, config.ar_coef, &mut rng);
            let targets: Vec<[f64; 2]> = zv
                .iter()
                .zip(&za)
                .map(|(v, a)| [v.tanh(), a.tanh()])
                .collect();
            let latent = Matrix::from_rows(&targets);
            let mut audio = latent.matmul(&proj_a)?;
            let mut visual = latent.matmul(&proj_v)?;
            for m in [&mut audio, &mut visual] {
                for x in m.as_mut_slice() {
                    *x += config.noise_sigma * normal(&mut rng);
                }
            }
            let mut audio_masked = vec![false; frames];
            let mut visual_masked = vec![false; frames];
            for f in 0..frames {
                let u: f64 = rng.random();
                if u < config.mask_prob {
                    audio_masked[f] = true;
                    audio.row_mut(f).fill(0.0);
                } else if u < 2.0 * config.mask_prob {
                    visual_masked[f] = true;
                    visual.row_mut(f).fill(0.0);
                }
            }
            let labels = targets
                .iter()
                .enumerate()
                .map(|(f, t)| FrameLabel {
                    frame: f,
                    valence: t[0],
                    arousal: t[1],
                })
                .collect();
            seqs.push(SynthSequence {
                id: format!("{split}-{q:05}"),
                audio,
                visual,
                labels,
                audio_masked,
                visual_masked,
            });
        }
        splits.push((split, seqs));
    }
    Ok(SynthData {
        config: config.clone(),
        splits,
    })
}

/// Probe CCCs for one split and target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSummary {
    pub audio: f64,
    pub visual: f64,
    pub both: f64,
}

pub fn probe_summary(data: &[SubSequence], target: Target) -> Result<ProbeSummary> {
    Ok(ProbeSummary {
        audio: linear_probe_ccc(data, ProbeInput::Audio, target)?,
        visual: linear_probe_ccc(data, ProbeInput::Visual, target)?,
        both: linear_probe_ccc(data, ProbeInput::Both, target)?,
    })
}

/// What [`synth_generate`] wrote.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifests: Vec<(Split, PathBuf, DatasetManifest)>,
    pub report: String,
}

/// Generates the dataset and writes AVF1 features, label files, one
/// manifest per split and `synth_report.txt` under `out_dir`.
pub fn synth_generate(config: &SynthConfig, out_dir: &Path) -> Result<SynthOutput> {
    let data = synth_data(config)?;
    let mut manifests = Vec::new();
    let mut report = String::new();
    writeln!(report, "# synthetic dataset report").ok();
    for (split, seqs) in &data.splits {
        let dir = out_dir.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut records = Vec::with_capacity(seqs.len());
        for s in seqs {
            let rel = |ext: &str| PathBuf::from(split.as_str()).join(format!("{}.{ext}", s.id));
            let rec = SequenceRecord {
                id: s.id.clone(),
                audio: rel("audio.avf"),
                visual: rel("visual.avf"),
                labels: rel("labels.csv"),
                frames: s.labels.len(),
            };
            write_features(&out_dir.join(&rec.audio), &s.audio)?;
            write_features(&out_dir.join(&rec.visual), &s.visual)?;
            write_labels(&out_dir.join(&rec.labels), &s.labels)?;
            records.push(rec);
        }
        let manifest = DatasetManifest {
            split: *split,
            d_a: config.d_a,
            d_v: config.d_v,
            clip_len: 1,
            seq_len: config.seq_len,
            sequences: records,
        };
        let path = out_dir.join(format!("{split}.toml"));
        manifest.write(&path)?;

        let subs = data.subsequences(*split)?;
        let masked_a: usize = seqs.iter().flat_map(|s| &s.audio_masked).filter(|m| **m).count();
        let masked_v: usize = seqs.iter().flat_map(|s| &s.visual_masked).filter(|m| **m).count();
        writeln!(
            report,
            "split={split} sequences={} subsequences={} clips={} audio_masked={masked_a} visual_masked={masked_v}",
            seqs.len(),
            subs.len(),
            subs.len() * config.seq_len
        )
        .ok();
        if subs.len() * config.seq_len > config.d_a + config.d_v + 1 {
            for t in [Target::Valence, Target::Arousal] {
                let p = probe_summary(&subs, t)?;
                writeln!(
                    report,
                    "probe split={split} target={t} audio={:.6} visual={:.6} both={:.6}",
                    p.audio, p.visual, p.both
                )
                .ok();
            }
        }
        manifests.push((*split, path, manifest));
    }
    let refs: Vec<&DatasetManifest> = manifests.iter().map(|(_, _, m)| m).collect();
    check_disjoint(&refs)?;
    let report_path = out_dir.join("synth_report.txt");
    fs::write(&report_path, &report).map_err(|e| Error::io(&report_path, e))?;
    Ok(SynthOutput { manifests, report })
}
