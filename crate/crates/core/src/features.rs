//! Log-Mel spectrogram front end.
//!
//! Framing is fixed at 512-sample periodic Hann windows with a 160-sample hop
//! and no centre padding, so a clip of `n` samples yields
//! `1 + (n - 512) / 160` frames. Power spectra are projected through
//! triangular Mel filters (peak weight 1, no area normalization) and
//! compressed with `ln(max(x, 1e-10))`.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio::{require_rate, AudioClip, AudioError, CORPUS_SAMPLE_RATE};

/// Floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

const CACHE_MAGIC: u32 = u32::from_le_bytes(*b"LMEL");
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip has {samples} samples, fewer than the {window}-sample window")]
    ClipTooShort { samples: usize, window: usize },
    #[error("mel filter {index} has no positive weight at this FFT resolution")]
    DegenerateFilter { index: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("feature cache {path}: {message}")]
    Cache { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WindowKind {
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub window_kind: WindowKind,
}

impl Default for StftConfig {
    /// 32 ms window, 10 ms hop at 16 kHz.
    fn default() -> Self {
        Self {
            window_length: 512,
            hop_length: 160,
            fft_size: 512,
            window_kind: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.hop_length == 0 || self.window_length == 0 || self.fft_size == 0 {
            return Err(FeatureError::InvalidConfig("STFT lengths must be positive".into()));
        }
        if !(self.hop_length <= self.window_length && self.window_length <= self.fft_size) {
            return Err(FeatureError::InvalidConfig(format!(
                "need hop ({}) <= window ({}) <= fft size ({})",
                self.hop_length, self.window_length, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `1 + floor((n - window) / hop)`, or `None` when the clip is shorter than one window.
    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.window_length)
            .then(|| 1 + (n_samples - self.window_length) / self.hop_length)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: u32,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            f_min: 0.0,
            f_max: 8000.0,
            sample_rate: CORPUS_SAMPLE_RATE,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.n_mels == 0 {
            return Err(FeatureError::InvalidConfig("n_mels must be at least 1".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(FeatureError::InvalidConfig(format!(
                "need 0 <= f_min ({}) < f_max ({}) <= {nyquist}",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window `0.5 (1 - cos(2 pi k / n))`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
        .collect()
}

/// Non-negative-frequency half of a framed DFT, row-major `n_frames x n_bins`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }
}

/// Short-time Fourier transform without centre padding.
pub fn stft(samples: &[f32], cfg: &StftConfig) -> Result<Spectrum, FeatureError> {
    cfg.validate()?;
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    stft_with(samples, cfg, &hann_window(cfg.window_length), fft.as_ref())
}

fn stft_with(
    samples: &[f32],
    cfg: &StftConfig,
    window: &[f64],
    fft: &dyn Fft<f64>,
) -> Result<Spectrum, FeatureError> {
    let n_frames = cfg.n_frames(samples.len()).ok_or(FeatureError::ClipTooShort {
        samples: samples.len(),
        window: cfg.window_length,
    })?;
    let n_bins = cfg.n_bins();
    let mut data = Vec::with_capacity(n_frames * n_bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..n_frames {
        let frame = &samples[t * cfg.hop_length..t * cfg.hop_length + cfg.window_length];
        for (slot, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(window)) {
            *slot = Complex64::new(s as f64 * w, 0.0);
        }
        for slot in &mut buf[cfg.window_length..] {
            *slot = Complex64::new(0.0, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..n_bins]);
    }
    Ok(Spectrum {
        n_frames,
        n_bins,
        data,
    })
}

/// Triangular Mel filters, row-major `n_mels x n_bins`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    /// Inclusive-exclusive bin range holding each filter's non-zero weights.
    pub support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

pub fn mel_filterbank(cfg: &MelConfig, fft_size: usize) -> Result<MelFilterbank, FeatureError> {
    cfg.validate()?;
    if fft_size < 2 {
        return Err(FeatureError::InvalidConfig("fft size must be at least 2".into()));
    }
    let n_bins = fft_size / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / fft_size as f64;

    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    let mut support = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (lower, centre, upper) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        let mut first = None;
        let mut last = 0;
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rising = (f - lower) / (centre - lower);
            let falling = (upper - f) / (upper - centre);
            let v = rising.min(falling);
            if v > 0.0 {
                *w = v;
                first.get_or_insert(k);
                last = k;
            }
        }
        let first = first.ok_or(FeatureError::DegenerateFilter { index: m })?;
        support.push((first, last + 1));
    }
    Ok(MelFilterbank {
        n_mels: cfg.n_mels,
        n_bins,
        weights,
        support,
    })
}

/// Log-Mel energies, row-major `n_frames x n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub n_frames: usize,
    pub n_mels: usize,
    pub hop_seconds: f64,
    pub values: Vec<f32>,
}

impl LogMelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Keeps `frames` frames centred in the spectrogram.
    pub fn center_crop(&self, frames: usize) -> Option<LogMelSpectrogram> {
        if frames == 0 || frames > self.n_frames {
            return None;
        }
        let start = (self.n_frames - frames) / 2;
        Some(LogMelSpectrogram {
            n_frames: frames,
            n_mels: self.n_mels,
            hop_seconds: self.hop_seconds,
            values: self.values[start * self.n_mels..(start + frames) * self.n_mels].to_vec(),
        })
    }

    /// Writes the cache layout: magic, version, n_frames, n_mels (u32 LE) then f32 LE values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        for word in [CACHE_MAGIC, CACHE_VERSION, self.n_frames as u32, self.n_mels as u32] {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], hop_seconds: f64) -> Result<Self, String> {
        if bytes.len() < 16 {
            return Err("truncated header".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        if word(0) != CACHE_MAGIC {
            return Err("bad magic".into());
        }
        if word(1) != CACHE_VERSION {
            return Err(format!("unsupported version {}", word(1)));
        }
        let (n_frames, n_mels) = (word(2) as usize, word(3) as usize);
        let expected = 16 + 4 * n_frames * n_mels;
        if bytes.len() != expected {
            return Err(format!("expected {expected} bytes, found {}", bytes.len()));
        }
        let values = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            n_frames,
            n_mels,
            hop_seconds,
            values,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), FeatureError> {
        let io = |source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn read(path: &Path, hop_seconds: f64) -> Result<Self, FeatureError> {
        let io = |source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut bytes = Vec::new();
        fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        Self::from_bytes(&bytes, hop_seconds).map_err(|message| FeatureError::Cache {
            path: path.display().to_string(),
            message,
        })
    }
}

/// Reusable log-Mel extractor holding the FFT plan, window and filterbank.
#[derive(Clone)]
pub struct LogMelExtractor {
    stft_cfg: StftConfig,
    mel_cfg: MelConfig,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor")
            .field("stft_cfg", &self.stft_cfg)
            .field("mel_cfg", &self.mel_cfg)
            .finish()
    }
}

impl LogMelExtractor {
    pub fn new(stft_cfg: StftConfig, mel_cfg: MelConfig) -> Result<Self, FeatureError> {
        stft_cfg.validate()?;
        let filterbank = mel_filterbank(&mel_cfg, stft_cfg.fft_size)?;
        Ok(Self {
            window: hann_window(stft_cfg.window_length),
            fft: FftPlanner::new().plan_fft_forward(stft_cfg.fft_size),
            stft_cfg,
            mel_cfg,
            filterbank,
        })
    }

    pub fn stft_config(&self) -> &StftConfig {
        &self.stft_cfg
    }

    pub fn mel_config(&self) -> &MelConfig {
        &self.mel_cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn hop_seconds(&self) -> f64 {
        self.stft_cfg.hop_length as f64 / self.mel_cfg.sample_rate as f64
    }

    /// Log-Mel of raw samples assumed to be at the configured rate.
    pub fn compute_samples(&self, samples: &[f32]) -> Result<LogMelSpectrogram, FeatureError> {
        let spec = stft_with(samples, &self.stft_cfg, &self.window, self.fft.as_ref())?;
        let n_mels = self.filterbank.n_mels;
        let mut values = Vec::with_capacity(spec.n_frames * n_mels);
        let mut power = vec![0.0; spec.n_bins];
        for t in 0..spec.n_frames {
            for (p, c) in power.iter_mut().zip(spec.frame(t)) {
                *p = c.norm_sqr();
            }
            for m in 0..n_mels {
                let (lo, hi) = self.filterbank.support[m];
                let row = self.filterbank.row(m);
                let energy: f64 = (lo..hi).map(|k| row[k] * power[k]).sum();
                values.push(energy.max(LOG_FLOOR).ln() as f32);
            }
        }
        Ok(LogMelSpectrogram {
            n_frames: spec.n_frames,
            n_mels,
            hop_seconds: self.hop_seconds(),
            values,
        })
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<LogMelSpectrogram, FeatureError> {
        if clip.sample_rate() != self.mel_cfg.sample_rate {
            return Err(AudioError::SampleRateMismatch {
                found: clip.sample_rate(),
                expected: self.mel_cfg.sample_rate,
            }
            .into());
        }
        self.compute_samples(clip.samples())
    }
}

/// One-shot log-Mel extraction; rejects clips not at `mel_cfg.sample_rate`.
pub fn log_mel(
    clip: &AudioClip,
    stft_cfg: &StftConfig,
    mel_cfg: &MelConfig,
) -> Result<LogMelSpectrogram, FeatureError> {
    let clip = require_rate(clip.clone(), mel_cfg.sample_rate)?;
    LogMelExtractor::new(*stft_cfg, *mel_cfg)?.compute(&clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft_bin(frame: &[f64], k: usize, n: usize) -> Complex64 {
        frame
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let phi = -2.0 * PI * (k * j) as f64 / n as f64;
                Complex64::new(x * phi.cos(), x * phi.sin())
            })
            .sum()
    }

    #[test]
    fn hann_examples() {
        assert_eq!(hann_window(1), [0.0]);
        let w4 = hann_window(4);
        for (a, b) in w4.iter().zip([0.0, 0.5, 1.0, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        for n in 1..50 {
            let w = hann_window(n);
            assert_eq!(w[0], 0.0);
            assert!(w.iter().all(|&v| v <= 1.0));
        }
    }

    #[test]
    fn frame_counts() {
        let cfg = StftConfig::default();
        let spec = stft(&vec![0.0; 16000], &cfg).unwrap();
        assert_eq!(spec.n_frames, 97);
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
        assert_eq!(cfg.n_frames(480_000), Some(2997));
        assert!(matches!(
            stft(&[0.0; 100], &cfg),
            Err(FeatureError::ClipTooShort { samples: 100, window: 512 })
        ));
    }

    #[test]
    fn bin_centred_sinusoid_peaks_in_its_bin() {
        let cfg = StftConfig::default();
        let k = 37;
        let f = k as f64 * 16000.0 / 512.0;
        let x: Vec<f32> = (0..4000)
            .map(|n| (2.0 * PI * f * n as f64 / 16000.0).sin() as f32)
            .collect();
        let spec = stft(&x, &cfg).unwrap();
        let window = hann_window(512);
        for t in 0..spec.n_frames {
            let row = spec.frame(t);
            let peak = (0..row.len())
                .max_by(|&a, &b| row[a].norm().partial_cmp(&row[b].norm()).unwrap())
                .unwrap();
            assert_eq!(peak, k);
            let frame: Vec<f64> = (0..512)
                .map(|j| x[t * 160 + j] as f64 * window[j])
                .collect();
            for bin in [0, k - 1, k, k + 1, 200] {
                let d = naive_dft_bin(&frame, bin, 512) - row[bin];
                assert!(d.norm() < 1e-6, "frame {t} bin {bin}: {}", d.norm());
            }
        }
    }

    #[test]
    fn mel_scale_points() {
        assert!((hz_to_mel(1000.0) - 999.99).abs() < 0.01);
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((mel_to_hz(hz_to_mel(2000.0)) - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn filterbank_shape_and_support() {
        let fb = mel_filterbank(&MelConfig::default(), 512).unwrap();
        assert_eq!((fb.n_mels, fb.n_bins), (64, 257));
        for m in 0..fb.n_mels {
            let (lo, hi) = fb.support[m];
            let row = fb.row(m);
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert!(row[lo..hi].iter().any(|&w| w > 0.0));
            assert!(row[..lo].iter().chain(&row[hi..]).all(|&w| w == 0.0));
        }
        // peaks ascend with the filter index
        let peak = |m: usize| {
            let r = fb.row(m);
            (0..r.len()).max_by(|&a, &b| r[a].partial_cmp(&r[b]).unwrap()).unwrap()
        };
        assert!((1..64).all(|m| peak(m) >= peak(m - 1)));
    }

    #[test]
    fn degenerate_filters_are_reported() {
        let cfg = MelConfig {
            n_mels: 128,
            ..MelConfig::default()
        };
        assert!(matches!(
            mel_filterbank(&cfg, 256),
            Err(FeatureError::DegenerateFilter { .. })
        ));
    }

    #[test]
    fn invalid_configs() {
        let bad = MelConfig {
            f_max: 9000.0,
            ..MelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_stft = StftConfig {
            hop_length: 600,
            ..StftConfig::default()
        };
        assert!(bad_stft.validate().is_err());
    }

    #[test]
    fn silent_clip_hits_the_floor() {
        let clip = AudioClip::new(vec![0.0; 480_000], 16000).unwrap();
        let lm = log_mel(&clip, &StftConfig::default(), &MelConfig::default()).unwrap();
        assert_eq!((lm.n_frames, lm.n_mels), (2997, 64));
        let floor = (1e-10f64).ln() as f32;
        assert!(lm.values.iter().all(|&v| v == floor));
        assert!((floor as f64 + 23.0259).abs() < 1e-4);
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let clip = AudioClip::new(vec![0.0; 4800], 48000).unwrap();
        assert!(matches!(
            log_mel(&clip, &StftConfig::default(), &MelConfig::default()),
            Err(FeatureError::Audio(AudioError::SampleRateMismatch { .. }))
        ));
    }

    #[test]
    fn higher_tone_lands_in_higher_band() {
        let tone = |f: f64| {
            let s: Vec<f32> = (0..16000)
                .map(|n| 0.5 * (2.0 * PI * f * n as f64 / 16000.0).sin() as f32)
                .collect();
            log_mel(&AudioClip::new(s, 16000).unwrap(), &StftConfig::default(), &MelConfig::default())
                .unwrap()
        };
        let (low, high) = (tone(60.0), tone(2000.0));
        let argmax = |row: &[f32]| {
            (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap()
        };
        for t in 0..low.n_frames {
            assert!(argmax(high.frame(t)) > argmax(low.frame(t)));
        }
    }

    #[test]
    fn cache_round_trip_and_crop() {
        let lm = LogMelSpectrogram {
            n_frames: 5,
            n_mels: 2,
            hop_seconds: 0.01,
            values: (0..10).map(|v| v as f32 * 0.5 - 1.0).collect(),
        };
        let bytes = lm.to_bytes();
        assert_eq!(&bytes[..4], b"LMEL");
        assert_eq!(LogMelSpectrogram::from_bytes(&bytes, 0.01).unwrap(), lm);
        assert!(LogMelSpectrogram::from_bytes(&bytes[..bytes.len() - 1], 0.01).is_err());
        let crop = lm.center_crop(3).unwrap();
        assert_eq!(crop.values, lm.values[2..8]);
        assert!(lm.center_crop(6).is_none());
    }
}
