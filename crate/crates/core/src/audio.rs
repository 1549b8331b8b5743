//! Log-mel spectrogram features at a fixed frame rate (20 fps by default).
//!
//! One STFT hop per output frame: `hop = round(sample_rate / frame_rate)`,
//! Hann window, reflect padding of half a window at both ends so frame `t`
//! is centred on sample `t * hop`. Frames are emitted for every centre that
//! falls inside the signal, giving `ceil(len / hop)` frames.

use std::io::{Read, Seek};
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("audio too short: {samples} samples, needs more than {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error("invalid audio configuration: {0}")]
    Config(String),
    #[error("invalid waveform: {0}")]
    Waveform(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::Waveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::Waveform(format!("non-finite sample at {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Reads mono or multi-channel PCM/float WAV; channels are averaged.
pub fn read_wav<R: Read>(reader: R) -> Result<Waveform, AudioError> {
    let mut wav = hound::WavReader::new(reader)?;
    let spec = wav.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => wav
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            wav.samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()?
        }
    };
    let samples = interleaved
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

pub fn read_wav_file(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let f = std::fs::File::open(path.as_ref()).map_err(hound::Error::IoError)?;
    read_wav(std::io::BufReader::new(f))
}

/// Writes 16-bit mono PCM. Samples are clipped to [-1, 1].
pub fn write_wav<W: std::io::Write + Seek>(w: &Waveform, writer: W) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut out = hound::WavWriter::new(writer, spec)?;
    for &s in &w.samples {
        out.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    out.finalize()?;
    Ok(())
}

pub fn write_wav_file(w: &Waveform, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let f = std::fs::File::create(path.as_ref()).map_err(hound::Error::IoError)?;
    write_wav(w, std::io::BufWriter::new(f))
}

#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// One row of `n_fft / 2 + 1` bins per frame.
    pub frames: Vec<Vec<Complex<f64>>>,
    pub n_fft: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn stft(w: &Waveform, window_length: usize, hop: usize) -> Result<Spectrogram, AudioError> {
    if hop == 0 || window_length < hop {
        return Err(AudioError::Config(format!(
            "need window_length >= hop > 0, got window {window_length}, hop {hop}"
        )));
    }
    let x = w.samples();
    let pad = window_length / 2;
    if x.len() <= pad || x.is_empty() {
        return Err(AudioError::TooShort {
            samples: x.len(),
            needed: pad,
        });
    }
    let mut padded = Vec::with_capacity(x.len() + 2 * pad);
    padded.extend((1..=pad).rev().map(|k| x[k]));
    padded.extend_from_slice(x);
    let n = x.len();
    padded.extend((1..=pad).map(|k| x[n - 1 - k]));

    let window = hann(window_length);
    let fft = FftPlanner::new().plan_fft_forward(window_length);
    let frame_count = n.div_ceil(hop);
    let bins = window_length / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); window_length];
    let mut frames = Vec::with_capacity(frame_count);
    for t in 0..frame_count {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..bins].to_vec());
    }
    Ok(Spectrogram {
        frames,
        n_fft: window_length,
        hop,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels` rows of `n_fft_bins` weights.
    pub weights: Matrix,
    pub centers_hz: Vec<f64>,
    pub edges_hz: Vec<f64>,
}

/// Triangular filters with peaks of one at mel-spaced centres, for an
/// even-length FFT with `n_fft_bins` non-negative frequency bins.
pub fn mel_filterbank(
    n_fft_bins: usize,
    n_mels: usize,
    sample_rate: f64,
    f_min: f64,
    f_max: f64,
) -> Result<MelFilterbank, AudioError> {
    let n_fft = 2 * n_fft_bins.saturating_sub(1);
    filterbank_for_fft(n_fft, n_fft_bins, n_mels, sample_rate, f_min, f_max)
}

fn filterbank_for_fft(
    n_fft: usize,
    n_fft_bins: usize,
    n_mels: usize,
    sample_rate: f64,
    f_min: f64,
    f_max: f64,
) -> Result<MelFilterbank, AudioError> {
    if n_mels == 0 || n_fft_bins < 2 {
        return Err(AudioError::Config("need n_mels >= 1 and at least 2 bins".into()));
    }
    if !(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0) {
        return Err(AudioError::Config(format!(
            "need 0 <= f_min < f_max <= sample_rate/2, got {f_min}, {f_max}, {sample_rate}"
        )));
    }
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = Matrix::zeros(n_mels, n_fft_bins);
    for m in 0..n_mels {
        let (lo, c, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let row = weights.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * sample_rate / n_fft as f64;
            *w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(AudioError::Config(format!(
                "mel filter {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; reduce n_mels or lengthen the window"
            )));
        }
    }
    let centers_hz = edges_hz[1..=n_mels].to_vec();
    Ok(MelFilterbank {
        weights,
        centers_hz,
        edges_hz,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub n_mels: usize,
    pub window_seconds: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub energy_floor: f64,
    pub frame_rate: f64,
    /// Power (|X|^2) rather than magnitude spectra.
    pub power: bool,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 27,
            window_seconds: 0.05,
            f_min: 20.0,
            f_max: 8000.0,
            energy_floor: 1e-10,
            frame_rate: 20.0,
            power: true,
        }
    }
}

impl MelConfig {
    pub fn hop(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 / self.frame_rate).round() as usize
    }

    pub fn window_length(&self, sample_rate: u32) -> usize {
        ((self.window_seconds * sample_rate as f64).round() as usize).max(self.hop(sample_rate))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Matrix,
    pub frame_rate: f64,
    pub log_floor: f64,
}

impl MelSpectrogram {
    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}

pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram, AudioError> {
    if !(cfg.frame_rate > 0.0 && cfg.energy_floor > 0.0) {
        return Err(AudioError::Config(
            "frame_rate and energy_floor must be positive".into(),
        ));
    }
    let hop = cfg.hop(w.sample_rate());
    let spec = stft(w, cfg.window_length(w.sample_rate()), hop)?;
    let fb = filterbank_for_fft(
        spec.n_fft,
        spec.bins(),
        cfg.n_mels,
        w.sample_rate() as f64,
        cfg.f_min,
        cfg.f_max,
    )?;
    let mut frames = Matrix::zeros(spec.frames.len(), cfg.n_mels);
    let floor = cfg.energy_floor;
    for (t, bins) in spec.frames.iter().enumerate() {
        let energy: Vec<f64> = bins
            .iter()
            .map(|c| if cfg.power { c.norm_sqr() } else { c.norm() })
            .collect();
        for (m, out) in frames.row_mut(t).iter_mut().enumerate() {
            let e: f64 = fb.weights.row(m).iter().zip(&energy).map(|(a, b)| a * b).sum();
            *out = e.max(floor).ln();
        }
    }
    Ok(MelSpectrogram {
        frames,
        frame_rate: cfg.frame_rate,
        log_floor: floor.ln(),
    })
}

/// RMS amplitude in a one-hop window centred on each feature frame.
pub fn rms_envelope(w: &Waveform, frame_rate: f64) -> Vec<f64> {
    let hop = (w.sample_rate() as f64 / frame_rate).round() as usize;
    let x = w.samples();
    let frames = x.len().div_ceil(hop.max(1));
    (0..frames)
        .map(|t| {
            let lo = (t * hop).saturating_sub(hop / 2);
            let hi = (t * hop + hop.div_ceil(2)).min(x.len());
            let n = (hi - lo).max(1) as f64;
            (x[lo..hi].iter().map(|s| s * s).sum::<f64>() / n).sqrt()
        })
        .collect()
}
