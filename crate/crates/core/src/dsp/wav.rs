//! Minimal RIFF/WAVE reader and writer.
//!
//! Only one on-disk shape is accepted: PCM16, little-endian, mono,
//! 16000 Hz. Everything else is rejected with a variant naming the first
//! offending property.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

/// The only sample rate the pipeline works with.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("i/o error reading wav: {0}")]
    Io(#[from] io::Error),
    #[error("not a RIFF file")]
    NotRiff,
    #[error("not a WAVE file")]
    NotWave,
    #[error("malformed or truncated chunk structure")]
    Truncated,
    #[error("missing `{0}` chunk")]
    MissingChunk(&'static str),
    #[error("unsupported sample rate {0} (expected 16000)")]
    UnsupportedSampleRate(u32),
    #[error("unsupported channel count {0} (expected mono)")]
    UnsupportedChannels(u16),
    #[error("unsupported bit depth {0} (expected 16)")]
    UnsupportedBitDepth(u16),
    #[error("unsupported audio format tag {0} (expected PCM)")]
    UnsupportedFormat(u16),
    #[error("wav file holds no samples")]
    Empty,
}

/// Mono 16 kHz audio with samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

fn u16_le(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Reads a PCM16 mono 16 kHz WAV file, scaling samples by 1/32768 into
/// [-1, 1).
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, WavError> {
    let bytes = fs::read(path)?;
    parse_wav(&bytes)
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform, WavError> {
    if bytes.len() < 12 {
        return Err(WavError::Truncated);
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(WavError::NotRiff);
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(WavError::NotWave);
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_le(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).ok_or(WavError::Truncated)?;
        if body_end > bytes.len() {
            return Err(WavError::Truncated);
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(WavError::Truncated);
                }
                fmt = Some((
                    u16_le(&body[0..2]),
                    u16_le(&body[2..4]),
                    u32_le(&body[4..8]),
                    u16_le(&body[14..16]),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or(WavError::MissingChunk("fmt "))?;
    if format != 1 {
        return Err(WavError::UnsupportedFormat(format));
    }
    if channels != 1 {
        return Err(WavError::UnsupportedChannels(channels));
    }
    if rate != SAMPLE_RATE {
        return Err(WavError::UnsupportedSampleRate(rate));
    }
    if bits != 16 {
        return Err(WavError::UnsupportedBitDepth(bits));
    }
    let data = data.ok_or(WavError::MissingChunk("data"))?;
    if data.is_empty() {
        return Err(WavError::Empty);
    }

    let samples: Vec<f32> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Ok(Waveform::new(samples))
}

/// Writes samples as PCM16 mono 16 kHz, clamping to [-1, 1] and rounding
/// half away from zero. Byte-deterministic for identical input.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32]) -> Result<(), WavError> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Pads short waveforms with trailing zeros and center-crops long ones so
/// the result has exactly `target_len` samples.
pub fn fix_length(w: &Waveform, target_len: usize) -> Waveform {
    assert!(target_len > 0, "target length must be positive");
    let n = w.len();
    let mut samples = Vec::with_capacity(target_len);
    if n >= target_len {
        let start = (n - target_len) / 2;
        samples.extend_from_slice(&w.samples()[start..start + target_len]);
    } else {
        samples.extend_from_slice(w.samples());
        samples.resize(target_len, 0.0);
    }
    Waveform::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes(rate: u32, channels: u16, bits: u16, format: u16, pcm: &[i16]) -> Vec<u8> {
        let data_len = (pcm.len() * 2) as u32;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * 2).to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&data_len.to_le_bytes());
        for &s in pcm {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    #[test]
    fn zeros_round_trip() {
        let bytes = wav_bytes(16000, 1, 16, 1, &vec![0i16; 16000]);
        let w = parse_wav(&bytes).unwrap();
        assert_eq!(w.len(), 16000);
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm16_scaling() {
        let bytes = wav_bytes(16000, 1, 16, 1, &[-32768, 16384]);
        let w = parse_wav(&bytes).unwrap();
        assert_eq!(w.samples()[0], -1.0);
        assert_eq!(w.samples()[1], 0.5);
    }

    #[test]
    fn eight_khz_rejected() {
        let bytes = wav_bytes(8000, 1, 16, 1, &[0, 0]);
        assert!(matches!(
            parse_wav(&bytes),
            Err(WavError::UnsupportedSampleRate(8000))
        ));
    }

    #[test]
    fn stereo_and_other_formats_rejected() {
        assert!(matches!(
            parse_wav(&wav_bytes(16000, 2, 16, 1, &[0, 0])),
            Err(WavError::UnsupportedChannels(2))
        ));
        assert!(matches!(
            parse_wav(&wav_bytes(16000, 1, 8, 1, &[0, 0])),
            Err(WavError::UnsupportedBitDepth(8))
        ));
        assert!(matches!(
            parse_wav(&wav_bytes(16000, 1, 16, 3, &[0, 0])),
            Err(WavError::UnsupportedFormat(3))
        ));
    }

    #[test]
    fn malformed_header_rejected() {
        assert!(matches!(parse_wav(b"RIFX0000WAVE"), Err(WavError::NotRiff)));
        assert!(matches!(parse_wav(b"RIFF0000WAVX"), Err(WavError::NotWave)));
        let mut bytes = wav_bytes(16000, 1, 16, 1, &[0, 0]);
        bytes.truncate(20);
        assert!(parse_wav(&bytes).is_err());
    }

    #[test]
    fn fix_length_identity_pad_and_crop() {
        let w = Waveform::new((0..16000).map(|i| i as f32 / 16000.0).collect());
        assert_eq!(fix_length(&w, 16000), w);

        let short = Waveform::new((0..8000).map(|i| i as f32).collect());
        let padded = fix_length(&short, 16000);
        assert_eq!(&padded.samples()[..8000], short.samples());
        assert!(padded.samples()[8000..].iter().all(|&s| s == 0.0));

        let long = Waveform::new((0..20000).map(|i| i as f32).collect());
        let cropped = fix_length(&long, 16000);
        assert_eq!(cropped.samples()[0], 2000.0);
        assert_eq!(cropped.samples()[15999], 17999.0);
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f32> = (0..100).map(|i| ((i * 331) % 200) as f32 / 200.0 - 0.5).collect();
        write_wav(&path, &samples).unwrap();
        let w = load_wav(&path).unwrap();
        assert_eq!(w.len(), samples.len());
        for (a, b) in w.samples().iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }
}
