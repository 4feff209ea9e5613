//! RIFF/WAVE ingestion for 16-bit PCM recordings.
//!
//! Only the corpus format is accepted: little-endian 16-bit integer PCM with
//! one or two channels. Stereo input is downmixed by averaging the channels.
//! Nothing here resamples; callers use [`require_rate`] to reject clips whose
//! rate does not match the pipeline.

use std::fs;
use std::path::Path;

use thiserror::Error;

/// Sample rate used by every stage of the pipeline.
pub const CORPUS_SAMPLE_RATE: u32 = 16_000;

const PCM_SCALE: f32 = 32768.0;
const FORMAT_PCM: u16 = 0x0001;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV container: {0}")]
    MalformedContainer(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("WAV data chunk holds zero frames")]
    EmptyAudio,
    #[error("channel length mismatch: left {left}, right {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("sample rate mismatch: found {found} Hz, expected {expected} Hz")]
    SampleRateMismatch { found: u32, expected: u32 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mono clip with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
    channel_count_original: u16,
}

impl AudioClip {
    /// Builds a clip from already-normalized mono samples.
    ///
    /// Returns `EmptyAudio` for an empty buffer and `UnsupportedEncoding` if
    /// any sample is non-finite or outside `[-1, 1]`.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::EmptyAudio);
        }
        if sample_rate == 0 {
            return Err(AudioError::UnsupportedEncoding("sample rate 0".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
            return Err(AudioError::UnsupportedEncoding(format!(
                "sample {bad} outside [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
            channel_count_original: 1,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel_count_original(&self) -> u16 {
        self.channel_count_original
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copies `len` samples starting at `start` into a new clip.
    pub fn slice(&self, start: usize, len: usize) -> Option<AudioClip> {
        let end = start.checked_add(len)?;
        if len == 0 || end > self.samples.len() {
            return None;
        }
        Some(AudioClip {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
            channel_count_original: self.channel_count_original,
        })
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// Format fields of a parsed `fmt ` chunk plus the location of `data`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavInfo {
    pub sample_rate: u32,
    pub channels: u16,
    pub bits_per_sample: u16,
    pub frames: usize,
    data_offset: usize,
}

impl WavInfo {
    pub fn duration_s(&self) -> f64 {
        self.frames as f64 / self.sample_rate as f64
    }
}

fn read_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Walks the chunk list and validates the format without decoding samples.
pub fn probe_wav(bytes: &[u8]) -> Result<WavInfo, AudioError> {
    let malformed = |msg: &str| AudioError::MalformedContainer(msg.to_string());
    if bytes.len() < 12 {
        return Err(malformed("shorter than RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(malformed("missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing WAVE form type"));
    }

    let mut fmt: Option<(u16, u16, u32, u16, u16)> = None;
    let mut pos = 12;
    loop {
        if pos + 8 > bytes.len() {
            return Err(malformed("no data chunk"));
        }
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if fmt.is_some() {
                    return Err(malformed("duplicate fmt chunk"));
                }
                if size < 16 || body + size > bytes.len() {
                    return Err(malformed("fmt chunk truncated"));
                }
                let mut format = read_u16(bytes, body);
                let channels = read_u16(bytes, body + 2);
                let rate = read_u32(bytes, body + 4);
                let block_align = read_u16(bytes, body + 12);
                let bits = read_u16(bytes, body + 14);
                if format == FORMAT_EXTENSIBLE {
                    // cbSize(2) validBits(2) channelMask(4) then the subformat GUID
                    if size < 40 {
                        return Err(malformed("extensible fmt chunk truncated"));
                    }
                    format = read_u16(bytes, body + 24);
                }
                fmt = Some((format, channels, rate, block_align, bits));
            }
            b"data" => {
                let (format, channels, rate, block_align, bits) =
                    fmt.ok_or_else(|| malformed("data chunk before fmt chunk"))?;
                if format != FORMAT_PCM {
                    return Err(AudioError::UnsupportedEncoding(format!(
                        "format tag {format:#06x} is not integer PCM"
                    )));
                }
                if bits != 16 {
                    return Err(AudioError::UnsupportedEncoding(format!(
                        "{bits}-bit samples (only 16-bit supported)"
                    )));
                }
                if channels != 1 && channels != 2 {
                    return Err(AudioError::UnsupportedEncoding(format!(
                        "{channels} channels (only mono or stereo supported)"
                    )));
                }
                if rate == 0 {
                    return Err(malformed("sample rate 0"));
                }
                if block_align != channels * 2 {
                    return Err(malformed("block align inconsistent with channel count"));
                }
                if body + size > bytes.len() {
                    return Err(malformed("data chunk extends past end of file"));
                }
                let frames = size / block_align as usize;
                if frames == 0 {
                    return Err(AudioError::EmptyAudio);
                }
                return Ok(WavInfo {
                    sample_rate: rate,
                    channels,
                    bits_per_sample: bits,
                    frames,
                    data_offset: body,
                });
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body
            .checked_add(size + (size & 1))
            .ok_or_else(|| malformed("chunk size overflow"))?;
    }
}

/// Decodes a 16-bit PCM WAV into a normalized mono clip.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    let info = probe_wav(bytes)?;
    let data = &bytes[info.data_offset..];
    let channels = info.channels as usize;
    let sample = |frame: usize, ch: usize| {
        let at = (frame * channels + ch) * 2;
        i16::from_le_bytes([data[at], data[at + 1]]) as f32 / PCM_SCALE
    };
    let samples = if channels == 1 {
        (0..info.frames).map(|f| sample(f, 0)).collect()
    } else {
        let left: Vec<f32> = (0..info.frames).map(|f| sample(f, 0)).collect();
        let right: Vec<f32> = (0..info.frames).map(|f| sample(f, 1)).collect();
        downmix_to_mono(&left, &right)?
    };
    Ok(AudioClip {
        samples,
        sample_rate: info.sample_rate,
        channel_count_original: info.channels,
    })
}

/// Element-wise mean of two channels.
pub fn downmix_to_mono(left: &[f32], right: &[f32]) -> Result<Vec<f32>, AudioError> {
    if left.len() != right.len() {
        return Err(AudioError::LengthMismatch {
            left: left.len(),
            right: right.len(),
        });
    }
    Ok(left
        .iter()
        .zip(right)
        .map(|(&l, &r)| ((l as f64 + r as f64) * 0.5) as f32)
        .collect())
}

/// Passes the clip through when its rate equals `expected`.
pub fn require_rate(clip: AudioClip, expected: u32) -> Result<AudioClip, AudioError> {
    if clip.sample_rate != expected {
        return Err(AudioError::SampleRateMismatch {
            found: clip.sample_rate,
            expected,
        });
    }
    Ok(clip)
}

/// Quantizes a single amplitude to 16-bit PCM (round to nearest, saturating).
pub fn quantize_sample(s: f32) -> i16 {
    let scaled = (s as f64 * PCM_SCALE as f64).round();
    scaled.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Encodes mono amplitudes as a canonical 44-byte-header PCM WAV.
pub fn encode_wav(samples: &[f32], sample_rate: u32) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&quantize_sample(s).to_le_bytes());
    }
    out
}

pub fn read_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let bytes = fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_wav(&bytes)
}

/// Reads only as much of the file as needed to locate the data chunk.
pub fn probe_wav_file(path: &Path) -> Result<WavInfo, AudioError> {
    let bytes = fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    probe_wav(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stereo_wav(frames: &[(i16, i16)], rate: u32) -> Vec<u8> {
        let data_len = frames.len() * 4;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * 4).to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data_len as u32).to_le_bytes());
        for &(l, r) in frames {
            out.extend_from_slice(&l.to_le_bytes());
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    fn mono_wav_raw(samples: &[i16], rate: u32) -> Vec<u8> {
        let mut out = encode_wav(&vec![0.0; samples.len()], rate);
        for (i, s) in samples.iter().enumerate() {
            out[44 + 2 * i..46 + 2 * i].copy_from_slice(&s.to_le_bytes());
        }
        out
    }

    #[test]
    fn mono_scaling() {
        let clip = decode_wav(&mono_wav_raw(&[0, 16384, -16384, 32767], 16000)).unwrap();
        assert_eq!(clip.samples()[..3], [0.0, 0.5, -0.5]);
        assert!((clip.samples()[3] - 0.99997).abs() < 1e-5);
        assert_eq!(clip.sample_rate(), 16000);
        assert_eq!(clip.channel_count_original(), 1);
    }

    #[test]
    fn most_negative_sample_maps_to_minus_one() {
        let clip = decode_wav(&mono_wav_raw(&[i16::MIN], 16000)).unwrap();
        assert_eq!(clip.samples(), [-1.0]);
    }

    #[test]
    fn symmetric_stereo_downmixes_to_silence() {
        let clip = decode_wav(&stereo_wav(&[(16384, -16384); 8], 16000)).unwrap();
        assert!(clip.samples().iter().all(|&s| s == 0.0));
        assert_eq!(clip.channel_count_original(), 2);
        assert_eq!(clip.len(), 8);
    }

    #[test]
    fn downmix_examples() {
        assert_eq!(downmix_to_mono(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), [1.0, 1.0]);
        assert_eq!(downmix_to_mono(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), [0.5, 0.5]);
        assert!(matches!(
            downmix_to_mono(&[1.0], &[1.0, 0.0]),
            Err(AudioError::LengthMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn rate_contract() {
        let clip = AudioClip::new(vec![0.0; 4], 16000).unwrap();
        assert_eq!(require_rate(clip.clone(), 16000).unwrap(), clip);
        assert!(matches!(
            require_rate(clip.clone(), 48000),
            Err(AudioError::SampleRateMismatch { found: 16000, expected: 48000 })
        ));
        let cd = AudioClip::new(vec![0.0; 4], 44100).unwrap();
        assert!(matches!(
            require_rate(cd, 16000),
            Err(AudioError::SampleRateMismatch { found: 44100, expected: 16000 })
        ));
    }

    #[test]
    fn rejects_bad_containers() {
        let good = encode_wav(&[0.1, 0.2], 16000);
        assert!(matches!(decode_wav(&good[..10]), Err(AudioError::MalformedContainer(_))));

        let mut no_riff = good.clone();
        no_riff[0] = b'X';
        assert!(matches!(decode_wav(&no_riff), Err(AudioError::MalformedContainer(_))));

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 1);
        assert!(matches!(decode_wav(&truncated), Err(AudioError::MalformedContainer(_))));

        let mut float = good.clone();
        float[20..22].copy_from_slice(&3u16.to_le_bytes());
        assert!(matches!(decode_wav(&float), Err(AudioError::UnsupportedEncoding(_))));

        let mut bits8 = good.clone();
        bits8[34..36].copy_from_slice(&8u16.to_le_bytes());
        assert!(matches!(decode_wav(&bits8), Err(AudioError::UnsupportedEncoding(_))));

        let empty = encode_wav(&[], 16000);
        assert!(matches!(decode_wav(&empty), Err(AudioError::EmptyAudio)));
    }

    #[test]
    fn duplicate_fmt_is_an_error() {
        let good = encode_wav(&[0.1], 16000);
        let mut dup = good[..36].to_vec();
        dup.extend_from_slice(&good[12..36]);
        dup.extend_from_slice(&good[36..]);
        assert!(matches!(decode_wav(&dup), Err(AudioError::MalformedContainer(m)) if m.contains("duplicate")));
    }

    #[test]
    fn skips_unknown_chunks_and_ignores_trailing_ones() {
        let good = encode_wav(&[0.25, -0.25], 16000);
        let mut with_list = good[..36].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[1, 2, 3, 0]); // odd size plus pad byte
        with_list.extend_from_slice(&good[36..]);
        with_list.extend_from_slice(b"junk\xff\xff\xff\xff");
        let clip = decode_wav(&with_list).unwrap();
        assert_eq!(clip.samples(), [0.25, -0.25]);
    }

    #[test]
    fn sine_round_trip_within_one_lsb() {
        let rate = 16000;
        let original: Vec<f32> = (0..rate)
            .map(|n| 0.8 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / rate as f64).sin() as f32)
            .collect();
        let clip = decode_wav(&encode_wav(&original, rate)).unwrap();
        let max_err = original
            .iter()
            .zip(clip.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 32768.0, "max error {max_err}");
        // quantized signals survive re-encoding exactly
        let again = decode_wav(&encode_wav(clip.samples(), rate)).unwrap();
        assert_eq!(again.samples(), clip.samples());
    }
}
