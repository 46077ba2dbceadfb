//! Audio front end: resampling, short-time power spectra in dB, band
//! aggregation and normalisation.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const TARGET_RATE: u32 = 44100;
const DB_EPS: f64 = 1e-10;
const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowFn {
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandScale {
    /// Equal-width averaging of dB bins; the last band takes the remainder.
    Linear,
    /// Triangular mel filters applied to linear power.
    Mel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Global,
    PerBand,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub window: usize,
    pub hop: usize,
    pub bands: usize,
    pub db_floor: f64,
    pub window_fn: WindowFn,
    pub band_scale: BandScale,
    pub normalization: Normalization,
    /// Zeros appended to the signal before framing. The default of
    /// `window - hop` makes a clip of `n` samples yield `n / hop` frames.
    pub tail_pad: usize,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            sample_rate: TARGET_RATE,
            n_fft: 1024,
            window: 882,
            hop: 441,
            bands: 64,
            db_floor: -80.0,
            window_fn: WindowFn::Hann,
            band_scale: BandScale::Linear,
            normalization: Normalization::Global,
            tail_pad: 441,
        }
    }
}

impl SpectrogramConfig {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.window == 0 || self.hop == 0 || self.bands == 0 {
            return bad("window, hop and bands must be positive".into());
        }
        if self.window > self.n_fft {
            return bad(format!("window {} exceeds DFT length {}", self.window, self.n_fft));
        }
        if self.hop > self.window {
            return bad(format!("hop {} exceeds window {}", self.hop, self.window));
        }
        if self.bands > self.bins() {
            return bad(format!("{} bands exceed {} DFT bins", self.bands, self.bins()));
        }
        Ok(())
    }

    /// Frames produced for a signal of `n` samples (before padding).
    pub fn frames(&self, n: usize) -> usize {
        let padded = n + self.tail_pad;
        if padded < self.window {
            0
        } else {
            1 + (padded - self.window) / self.hop
        }
    }
}

/// Linear-interpolation resampling to 44100 Hz.
pub fn resample(signal: &[f64], src_rate: u32) -> Result<Vec<f64>> {
    resample_to(signal, src_rate, TARGET_RATE)
}

pub fn resample_to(signal: &[f64], src_rate: u32, dst_rate: u32) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(Error::InvalidArgument("cannot resample an empty signal".into()));
    }
    if src_rate == 0 || dst_rate == 0 {
        return Err(Error::InvalidArgument("sample rates must be positive".into()));
    }
    if src_rate == dst_rate {
        return Ok(signal.to_vec());
    }
    let n = signal.len();
    let out_len = ((n as f64) * dst_rate as f64 / src_rate as f64).round() as usize;
    let ratio = src_rate as f64 / dst_rate as f64;
    Ok((0..out_len)
        .map(|i| {
            let t = i as f64 * ratio;
            let j = t.floor() as usize;
            if j + 1 >= n {
                signal[n - 1]
            } else {
                let f = t - j as f64;
                signal[j] * (1.0 - f) + signal[j + 1] * f
            }
        })
        .collect())
}

fn window_coeffs(cfg: &SpectrogramConfig) -> Vec<f64> {
    let n = cfg.window;
    match cfg.window_fn {
        WindowFn::Hann => (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect(),
        WindowFn::Rectangular => vec![1.0; n],
    }
}

/// Linear power of the non-negative DFT bins, one row per frame
/// (frames × bins).
pub fn power_frames(signal: &[f64], cfg: &SpectrogramConfig) -> Result<Matrix> {
    cfg.validate()?;
    if signal.len() < cfg.window {
        return Err(Error::SignalTooShort {
            len: signal.len(),
            needed: cfg.window,
        });
    }
    let frames = cfg.frames(signal.len());
    let bins = cfg.bins();
    let win = window_coeffs(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut out = Matrix::zeros(frames, bins);
    for f in 0..frames {
        let start = f * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = if i < cfg.window {
                signal.get(start + i).copied().unwrap_or(0.0) * win[i]
            } else {
                0.0
            };
            *b = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in out.row_mut(f).iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
    }
    Ok(out)
}

fn to_db(p: f64, floor: f64) -> f64 {
    (10.0 * (p + DB_EPS).log10()).max(floor)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, bands × bins.
pub fn mel_filterbank(bands: usize, n_fft: usize, sample_rate: u32) -> Matrix {
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64) * n_fft as f64 / sample_rate as f64)
        .collect();
    let mut fb = Matrix::zeros(bands, bins);
    for b in 0..bands {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..bins {
            let x = k as f64;
            let w = if x > lo && x <= mid {
                (x - lo) / (mid - lo)
            } else if x > mid && x < hi {
                (hi - x) / (hi - mid)
            } else {
                0.0
            };
            fb.set(b, k, w);
        }
    }
    fb
}

/// Band index of DFT bin `k` under equal-width aggregation.
pub fn band_of_bin(k: usize, bins: usize, bands: usize) -> usize {
    (k / (bins / bands)).min(bands - 1)
}

/// Spectrogram before normalisation, in dB (bands × frames).
pub fn spectrogram_db(signal: &[f64], cfg: &SpectrogramConfig) -> Result<Matrix> {
    let power = power_frames(signal, cfg)?;
    let frames = power.rows();
    let bins = cfg.bins();
    let mut out = Matrix::zeros(cfg.bands, frames);
    match cfg.band_scale {
        BandScale::Linear => {
            let mut counts = vec![0usize; cfg.bands];
            for k in 0..bins {
                counts[band_of_bin(k, bins, cfg.bands)] += 1;
            }
            for f in 0..frames {
                for (k, &p) in power.row(f).iter().enumerate() {
                    let b = band_of_bin(k, bins, cfg.bands);
                    let v = out.get(b, f) + to_db(p, cfg.db_floor);
                    out.set(b, f, v);
                }
                for (b, &c) in counts.iter().enumerate() {
                    out.set(b, f, out.get(b, f) / c as f64);
                }
            }
        }
        BandScale::Mel => {
            let fb = mel_filterbank(cfg.bands, cfg.n_fft, cfg.sample_rate);
            let banded = fb.matmul(&power.transpose())?;
            out = banded.map(|p| to_db(p, cfg.db_floor));
        }
    }
    Ok(out)
}

fn normalize(m: &mut Matrix, groups: &[Vec<usize>]) {
    for g in groups {
        let n = g.len() as f64;
        let data = m.as_mut_slice();
        let mean = g.iter().map(|&i| data[i]).sum::<f64>() / n;
        let var = g.iter().map(|&i| (data[i] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.max(VAR_FLOOR).sqrt();
        for &i in g {
            data[i] = (data[i] - mean) / sd;
        }
    }
}

/// Normalised log-power spectrogram (bands × frames).
pub fn spectrogram(signal: &[f64], cfg: &SpectrogramConfig) -> Result<Matrix> {
    let mut m = spectrogram_db(signal, cfg)?;
    let (rows, cols) = m.shape();
    match cfg.normalization {
        Normalization::Global => normalize(&mut m, &[(0..rows * cols).collect()]),
        Normalization::PerBand => {
            let groups: Vec<Vec<usize>> = (0..rows).map(|r| (r * cols..(r + 1) * cols).collect()).collect();
            normalize(&mut m, &groups)
        }
        Normalization::None => {}
    }
    if !m.is_finite() {
        return Err(Error::NonFinite {
            stage: "spectrogram".into(),
        });
    }
    Ok(m)
}

/// Reads a mono wave file as samples in [-1, 1] and its sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedAudio(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    let bad = |e: hound::Error| Error::UnsupportedAudio(format!("{}: {e}", path.display()));
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedAudio(format!(
                "{}: {bits}-bit {fmt:?} samples, expected 16-bit int or 32-bit float",
                path.display()
            )))
        }
    };
    Ok((samples, spec.sample_rate))
}

/// Reads, resamples and transforms a wave file.
pub fn wav_spectrogram(path: &Path, cfg: &SpectrogramConfig) -> Result<Matrix> {
    let (samples, rate) = read_wav(path)?;
    if samples.is_empty() {
        return Err(Error::SignalTooShort {
            len: 0,
            needed: cfg.window,
        });
    }
    let signal = resample_to(&samples, rate, cfg.sample_rate)?;
    spectrogram(&signal, cfg)
}
