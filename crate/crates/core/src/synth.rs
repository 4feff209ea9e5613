//! Synthetic running sessions whose 2 kHz band energy tracks exertion.
//!
//! Each session mixes three sources at 16 kHz:
//! * footstep thumps: damped 50 Hz sinusoids at the step rate, no label signal;
//! * breathing: white noise through a 2 kHz band-pass whose RMS is affine in
//!   the instantaneous RPE;
//! * a white noise floor.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{encode_wav, CORPUS_SAMPLE_RATE};
use crate::dataset::{
    write_manifest, AgeRange, AnswerEvent, DatasetError, RunnerProfile, SessionManifest, Sex, DEFAULT_HALF_WINDOW_S,
};
use crate::features::{stft, FeatureError, StftConfig};

pub const SURFACES: [&str; 3] = ["asphalt", "gravel", "concrete"];
pub const BREATHING_CENTRE_HZ: f64 = 2000.0;
const BREATHING_Q: f64 = 2.0;
const STEP_FREQ_HZ: f64 = 50.0;
const STEP_DECAY_S: f64 = 0.03;
/// Knot spacing of the trajectory noise.
const KNOT_S: f64 = 60.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Inclusive range of sessions per runner, within [1, 5].
    pub sessions_per_runner: (usize, usize),
    pub session_duration_s: f64,
    /// Gap between consecutive questions, drawn uniformly.
    pub question_interval_s: (f64, f64),
    /// Session-start RPE is drawn from this range.
    pub rpe_start: (f64, f64),
    /// Session-end RPE is drawn from this range.
    pub rpe_end: (f64, f64),
    /// Standard deviation of the trajectory noise knots.
    pub rpe_noise_sd: f64,
    /// Knot noise is clipped to this magnitude.
    pub rpe_noise_max: f64,
    /// Breathing RMS at RPE 6.
    pub breathing_base: f64,
    /// Breathing RMS added per 14 RPE points (6 to 20).
    pub breathing_gain: f64,
    pub step_rate_hz: f64,
    pub step_amplitude: f64,
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sessions_per_runner: (1, 5),
            session_duration_s: 2700.0,
            question_interval_s: (180.0, 300.0),
            rpe_start: (8.0, 11.0),
            rpe_end: (13.0, 17.0),
            rpe_noise_sd: 0.7,
            rpe_noise_max: 1.5,
            breathing_base: 0.01,
            breathing_gain: 0.08,
            step_rate_hz: 2.7,
            step_amplitude: 0.3,
            noise_floor: 0.005,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        let (lo, hi) = self.sessions_per_runner;
        if lo < 1 || hi > 5 || lo > hi {
            return bad(format!("sessions per runner {lo}..={hi} must lie in 1..=5"));
        }
        let (a, b) = self.question_interval_s;
        if !(a > 0.0) || !(b >= a) || !b.is_finite() {
            return bad(format!("question interval [{a}, {b}] must be positive and ordered"));
        }
        if !(self.session_duration_s > 2.0 * DEFAULT_HALF_WINDOW_S) || !self.session_duration_s.is_finite() {
            return bad(format!(
                "session duration {} must exceed {} s",
                self.session_duration_s,
                2.0 * DEFAULT_HALF_WINDOW_S
            ));
        }
        for (name, (x, y)) in [("rpe_start", self.rpe_start), ("rpe_end", self.rpe_end)] {
            if !(x <= y) || !x.is_finite() || !y.is_finite() {
                return bad(format!("{name} range ({x}, {y}) must be ordered"));
            }
        }
        let nonneg = [
            ("rpe_noise_sd", self.rpe_noise_sd),
            ("rpe_noise_max", self.rpe_noise_max),
            ("breathing_base", self.breathing_base),
            ("breathing_gain", self.breathing_gain),
            ("step_amplitude", self.step_amplitude),
            ("noise_floor", self.noise_floor),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
            return bad(format!("{name} = {v} must be finite and non-negative"));
        }
        if !(self.step_rate_hz > 0.0) {
            return bad(format!("step rate {} must be positive", self.step_rate_hz));
        }
        Ok(())
    }

    /// Breathing-band RMS at exertion `rpe`.
    pub fn breathing_rms(&self, rpe: f64) -> f64 {
        self.breathing_base + self.breathing_gain * (rpe - 6.0) / 14.0
    }
}

/// Runner counts per (age range, sex) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicsPlan {
    pub cells: Vec<(AgeRange, Sex, usize)>,
}

impl DemographicsPlan {
    /// 48 runners over the four age ranges with a mixed M/F split.
    pub fn table1() -> Self {
        use AgeRange::*;
        Self {
            cells: vec![
                (From21To30, Sex::M, 5),
                (From21To30, Sex::F, 7),
                (From31To40, Sex::M, 8),
                (From31To40, Sex::F, 8),
                (From41To50, Sex::M, 2),
                (From41To50, Sex::F, 4),
                (From51To60, Sex::M, 6),
                (From51To60, Sex::F, 8),
            ],
        }
    }

    /// `n` runners dealt round-robin over the eight cells.
    pub fn balanced(n: usize) -> Self {
        let mut cells: Vec<(AgeRange, Sex, usize)> = AgeRange::ALL
            .iter()
            .flat_map(|&a| [(a, Sex::M, 0), (a, Sex::F, 0)])
            .collect();
        for i in 0..n {
            cells[i % 8].2 += 1;
        }
        cells.retain(|c| c.2 > 0);
        Self { cells }
    }

    pub fn n_runners(&self) -> usize {
        self.cells.iter().map(|c| c.2).sum()
    }

    /// Profiles `r001`, `r002`, ... in cell order.
    pub fn runners(&self) -> Vec<RunnerProfile> {
        let mut out = Vec::with_capacity(self.n_runners());
        for &(age_range, sex, n) in &self.cells {
            for _ in 0..n {
                out.push(RunnerProfile {
                    runner_id: format!("r{:03}", out.len() + 1),
                    age_range,
                    sex,
                });
            }
        }
        out
    }
}

/// 64-bit FNV-1a.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn runner_seed(master: u64, runner_id: &str) -> u64 {
    master ^ fnv1a(runner_id)
}

fn session_seed(master: u64, runner_id: &str, session_index: usize) -> u64 {
    runner_seed(master, runner_id).wrapping_add((session_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Smooth rising exertion path: linear from start to end plus clipped noise
/// knots every minute, linearly interpolated, clamped to [6, 20].
#[derive(Debug, Clone)]
pub struct RpeTrajectory {
    start: f64,
    end: f64,
    duration_s: f64,
    knots: Vec<f64>,
}

impl RpeTrajectory {
    fn sample(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let start = uniform(rng, cfg.rpe_start);
        let end = uniform(rng, cfg.rpe_end);
        let n = (cfg.session_duration_s / KNOT_S).ceil() as usize + 1;
        let knots = if cfg.rpe_noise_sd > 0.0 {
            let normal = Normal::new(0.0, cfg.rpe_noise_sd).expect("finite sd");
            (0..n)
                .map(|_| normal.sample(rng).clamp(-cfg.rpe_noise_max, cfg.rpe_noise_max))
                .collect()
        } else {
            vec![0.0; n]
        };
        Self {
            start,
            end,
            duration_s: cfg.session_duration_s,
            knots,
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        let base = self.start + (self.end - self.start) * (t / self.duration_s).clamp(0.0, 1.0);
        let k = (t / KNOT_S).max(0.0);
        let i = (k.floor() as usize).min(self.knots.len() - 1);
        let j = (i + 1).min(self.knots.len() - 1);
        let frac = k - i as f64;
        let noise = self.knots[i] * (1.0 - frac) + self.knots[j] * frac;
        (base + noise).clamp(6.0, 20.0)
    }
}

fn uniform(rng: &mut ChaCha8Rng, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.random_range(a..b)
    }
}

/// RBJ band-pass biquad (0 dB peak gain).
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    fn bandpass(centre_hz: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * centre_hz / sample_rate;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// Direct form I over `x`.
    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b0 * x0 + self.b2 * x2 - self.a1 * y1 - self.a2 * y2;
                (x2, x1, y2, y1) = (x1, x0, y1, y0);
                y0
            })
            .collect()
    }

    /// Sum of the squared impulse response: the output variance for unit
    /// white input.
    fn noise_gain(&self) -> f64 {
        let mut imp = vec![0.0; 1 << 14];
        imp[0] = 1.0;
        self.run(&imp).iter().map(|v| v * v).sum()
    }
}

/// One synthesized session.
#[derive(Debug, Clone)]
pub struct SynthSession {
    pub wav: Vec<u8>,
    pub manifest: SessionManifest,
    pub trajectory: RpeTrajectory,
}

/// Renders one session. The manifest's audio path is `audio/<session>.wav`.
pub fn generate_session(
    cfg: &SynthConfig,
    runner: &RunnerProfile,
    session_index: usize,
) -> Result<SynthSession, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(session_seed(cfg.seed, &runner.runner_id, session_index));
    let sr = CORPUS_SAMPLE_RATE as f64;
    let n = (cfg.session_duration_s * sr).round() as usize;
    let traj = RpeTrajectory::sample(cfg, &mut rng);

    // question times, kept where a full segment fits
    let mut events = Vec::new();
    let surface = SURFACES[rng.random_range(0..SURFACES.len())].to_string();
    let mut t = uniform(&mut rng, cfg.question_interval_s);
    while t + DEFAULT_HALF_WINDOW_S <= cfg.session_duration_s {
        if t >= DEFAULT_HALF_WINDOW_S {
            let time_s = (t * 1000.0).round() / 1000.0;
            events.push(AnswerEvent {
                time_s,
                fatigue: traj.at(time_s).round().clamp(6.0, 20.0) as u8,
                wellbeing: rng.random_range(-5..=5),
                surface: surface.clone(),
            });
        }
        t += uniform(&mut rng, cfg.question_interval_s);
    }

    let white = Normal::new(0.0, 1.0).expect("unit normal");
    let mut breath_src: Vec<f64> = (0..n).map(|_| white.sample(&mut rng)).collect();
    let filt = Biquad::bandpass(BREATHING_CENTRE_HZ, BREATHING_Q, sr);
    let norm = 1.0 / filt.noise_gain().sqrt();
    breath_src = filt.run(&breath_src);

    let mut out = vec![0.0f64; n];
    for (i, (o, b)) in out.iter_mut().zip(&breath_src).enumerate() {
        let rpe = traj.at(i as f64 / sr);
        *o = b * norm * cfg.breathing_rms(rpe) + cfg.noise_floor * white.sample(&mut rng);
    }

    let jitter = Uniform::new_inclusive(-0.01, 0.01).expect("valid range");
    let period = 1.0 / cfg.step_rate_hz;
    let burst_len = (5.0 * STEP_DECAY_S * sr) as usize;
    let mut k = 0usize;
    loop {
        let onset = k as f64 * period + jitter.sample(&mut rng);
        k += 1;
        if onset >= cfg.session_duration_s {
            break;
        }
        let start = (onset.max(0.0) * sr).round() as usize;
        for j in 0..burst_len.min(n.saturating_sub(start)) {
            let dt = j as f64 / sr;
            out[start + j] += cfg.step_amplitude * (-dt / STEP_DECAY_S).exp() * (2.0 * PI * STEP_FREQ_HZ * dt).sin();
        }
    }

    let samples: Vec<f32> = out.iter().map(|&v| v as f32).collect();
    let session_id = format!("{}-s{}", runner.runner_id, session_index + 1);
    Ok(SynthSession {
        wav: encode_wav(&samples, CORPUS_SAMPLE_RATE),
        manifest: SessionManifest {
            audio_path: PathBuf::from("audio").join(format!("{session_id}.wav")),
            session_id,
            runner_id: runner.runner_id.clone(),
            events,
        },
        trajectory: traj,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub n_runners: usize,
    pub n_sessions: usize,
    pub n_events: usize,
}

/// Sessions per runner, drawn from the runner's own stream.
pub fn sessions_for(cfg: &SynthConfig, runner_id: &str) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(runner_seed(cfg.seed, runner_id));
    let (lo, hi) = cfg.sessions_per_runner;
    rng.random_range(lo..=hi)
}

/// Writes `runners.csv`, `sessions.csv`, `events.csv` and `audio/*.wav`
/// under `dir`. Sessions render in parallel; content depends only on
/// `(cfg, plan)`.
pub fn generate_corpus(cfg: &SynthConfig, plan: &DemographicsPlan, dir: &Path) -> Result<CorpusSummary, SynthError> {
    cfg.validate()?;
    if plan.cells.is_empty() || plan.cells.iter().any(|c| c.2 == 0) {
        return Err(SynthError::InvalidConfig("every plan cell needs at least one runner".into()));
    }
    let runners = plan.runners();
    let jobs: Vec<(&RunnerProfile, usize)> = runners
        .iter()
        .flat_map(|r| (0..sessions_for(cfg, &r.runner_id)).map(move |k| (r, k)))
        .collect();
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|source| SynthError::Io {
        path: audio_dir.clone(),
        source,
    })?;
    let manifests: Vec<SessionManifest> = jobs
        .par_iter()
        .map(|&(r, k)| {
            let s = generate_session(cfg, r, k)?;
            let path = dir.join(&s.manifest.audio_path);
            fs::write(&path, &s.wav).map_err(|source| SynthError::Io { path, source })?;
            Ok(s.manifest)
        })
        .collect::<Result<_, SynthError>>()?;
    write_manifest(dir, &manifests, &runners)?;
    Ok(CorpusSummary {
        n_runners: runners.len(),
        n_sessions: manifests.len(),
        n_events: manifests.iter().map(|m| m.events.len()).sum(),
    })
}

/// Mean log power in `[lo_hz, hi_hz]` over the STFT frames of `samples`.
pub fn band_log_energy(samples: &[f32], sample_rate: u32, lo_hz: f64, hi_hz: f64) -> Result<f64, FeatureError> {
    let cfg = StftConfig::default();
    let spec = stft(samples, &cfg)?;
    let hz_per_bin = sample_rate as f64 / cfg.fft_size as f64;
    let bins: Vec<usize> = (0..cfg.n_bins())
        .filter(|&k| (lo_hz..=hi_hz).contains(&(k as f64 * hz_per_bin)))
        .collect();
    let mut total = 0.0;
    for t in 0..spec.n_frames {
        let f = spec.frame(t);
        total += bins.iter().map(|&k| f[k].norm_sqr()).sum::<f64>() / bins.len() as f64;
    }
    Ok((total / spec.n_frames as f64).max(1e-20).ln())
}
