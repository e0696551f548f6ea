//! Differentiable log-mel spectrogram.
//!
//! The pipeline is framing -> periodic Hann window -> DFT magnitude ->
//! triangular mel filterbank -> natural log with an additive floor. The
//! DFT is realized as two fixed matrix products (cosine and sine bases)
//! so the whole front end is built from existing graph ops and gradients
//! reach the raw samples for free. Magnitude (not power) spectra feed
//! unnormalized triangular filters; checkpoints depend on these choices.

use std::sync::Arc;

use crate::tensor::{Graph, NodeId, Tensor};

use super::wav::Waveform;
use super::DspError;

/// Front-end settings. The defaults — 25 ms frames, 10 ms hop, 512-point
/// DFT, 40 mel bins over 20 Hz..8 kHz — are conventional for spoken
/// command recognition and fix the acoustic model's input width.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub frame_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f32,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            frame_length: 400,
            hop_length: 160,
            fft_size: 512,
            mel_bins: 40,
            fmin: 20.0,
            fmax: 8000.0,
            log_floor: 1e-6,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let nyquist = super::wav::SAMPLE_RATE as f64 / 2.0;
        if self.frame_length == 0 || self.hop_length == 0 {
            return Err(DspError::BadMelConfig("frame/hop must be positive".into()));
        }
        if self.frame_length > self.fft_size {
            return Err(DspError::BadMelConfig(format!(
                "frame_length {} exceeds fft_size {}",
                self.frame_length, self.fft_size
            )));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(DspError::BadMelConfig(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got {}..{}",
                self.fmin, self.fmax
            )));
        }
        if self.mel_bins == 0 {
            return Err(DspError::BadMelConfig("mel_bins must be >= 1".into()));
        }
        if self.log_floor <= 0.0 {
            return Err(DspError::BadMelConfig("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Frames produced for a waveform of `len` samples.
    pub fn frame_count(&self, len: usize) -> Result<usize, DspError> {
        if len < self.frame_length {
            return Err(DspError::WaveformTooShort {
                len,
                frame_length: self.frame_length,
            });
        }
        Ok(1 + (len - self.frame_length) / self.hop_length)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency (Hz) of each triangular filter.
pub fn mel_filter_centers(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    (1..=cfg.mel_bins)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect()
}

/// Precomputed constants for the mel graph: window, DFT bases, filterbank.
/// Cheap to share across graphs (contents live behind `Arc`s).
#[derive(Debug, Clone)]
pub struct MelFrontEnd {
    cfg: MelConfig,
    window: Arc<Tensor>,
    basis_re: Arc<Tensor>,
    basis_im: Arc<Tensor>,
    filterbank: Arc<Tensor>,
}

impl MelFrontEnd {
    pub fn new(cfg: MelConfig) -> Result<Self, DspError> {
        cfg.validate()?;
        let n = cfg.frame_length;
        let fft = cfg.fft_size;
        let bins = fft / 2 + 1;

        // Periodic Hann window.
        let window: Vec<f32> = (0..n)
            .map(|i| {
                (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32
            })
            .collect();

        // DFT over fft_size points; frames are implicitly zero-padded, so
        // only the first `frame_length` basis rows are needed.
        let mut re = vec![0.0f32; n * bins];
        let mut im = vec![0.0f32; n * bins];
        for i in 0..n {
            for k in 0..bins {
                let angle = 2.0 * std::f64::consts::PI * i as f64 * k as f64 / fft as f64;
                re[i * bins + k] = angle.cos() as f32;
                im[i * bins + k] = -angle.sin() as f32;
            }
        }

        // Triangular filters on mel-spaced edges, applied to magnitude
        // spectra without area normalization.
        let lo = hz_to_mel(cfg.fmin);
        let hi = hz_to_mel(cfg.fmax);
        let edges: Vec<f64> = (0..cfg.mel_bins + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
            .collect();
        let mut fb = vec![0.0f32; bins * cfg.mel_bins];
        let sr = super::wav::SAMPLE_RATE as f64;
        for k in 0..bins {
            let f = k as f64 * sr / fft as f64;
            for m in 0..cfg.mel_bins {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let w = if f <= l || f >= r {
                    0.0
                } else if f <= c {
                    (f - l) / (c - l)
                } else {
                    (r - f) / (r - c)
                };
                fb[k * cfg.mel_bins + m] = w as f32;
            }
        }

        Ok(Self {
            cfg,
            window: Arc::new(Tensor::new(vec![n], window).expect("window shape")),
            basis_re: Arc::new(Tensor::new(vec![n, bins], re).expect("basis shape")),
            basis_im: Arc::new(Tensor::new(vec![n, bins], im).expect("basis shape")),
            filterbank: Arc::new(Tensor::new(vec![bins, cfg.mel_bins], fb).expect("fb shape")),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Appends the log-mel pipeline to `g`. `wave` must be a `[1, len]`
    /// node; the result is `[frames, mel_bins]` and gradients flow back to
    /// the samples.
    pub fn build(&self, g: &mut Graph, wave: NodeId) -> Result<NodeId, DspError> {
        let shape = g.shape_of(wave).to_vec();
        let len = *shape.last().expect("non-empty shape");
        let frames = self.cfg.frame_count(len)?;

        let mut rows = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = t * self.cfg.hop_length;
            rows.push(g.slice(wave, 1, start, start + self.cfg.frame_length)?);
        }
        let stacked = g.concat(&rows, 0)?; // [frames, frame_length]

        let window = g.constant(self.window.clone());
        let windowed = g.mul(stacked, window)?;

        let basis_re = g.constant(self.basis_re.clone());
        let basis_im = g.constant(self.basis_im.clone());
        let re = g.matmul(windowed, basis_re)?;
        let im = g.matmul(windowed, basis_im)?;
        let re2 = g.square(re);
        let im2 = g.square(im);
        let power = g.add(re2, im2)?;
        let mag = g.sqrt(power); // [frames, fft/2+1]

        let fb = g.constant(self.filterbank.clone());
        let mel = g.matmul(mag, fb)?; // [frames, mel_bins]

        let floor = g.constant_owned(Tensor::filled(&[self.cfg.mel_bins], self.cfg.log_floor));
        let shifted = g.add(mel, floor)?;
        Ok(g.log(shifted))
    }

    /// Convenience: runs the pipeline on a plain waveform and returns the
    /// log-mel tensor. Identical arithmetic to the graph route.
    pub fn compute(&self, w: &Waveform) -> Result<Tensor, DspError> {
        let mut g = Graph::new();
        let wave = g.input("wave", &[1, w.len()]);
        let mel = self.build(&mut g, wave)?;
        let mut bindings = crate::tensor::Bindings::new();
        bindings.bind(
            "wave",
            Tensor::new(vec![1, w.len()], w.samples().to_vec())?,
        );
        let out = g.evaluate(mel, &bindings, &crate::tensor::ParamSet::new())?;
        Ok(out.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_frame_count() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.frame_count(16000).unwrap(), 98);
    }

    #[test]
    fn too_short_waveform_errors() {
        let cfg = MelConfig::default();
        assert!(matches!(
            cfg.frame_count(399),
            Err(DspError::WaveformTooShort { .. })
        ));
    }

    #[test]
    fn zero_waveform_hits_the_log_floor() {
        let fe = MelFrontEnd::new(MelConfig::default()).unwrap();
        let w = Waveform::new(vec![0.0; 16000]);
        let mel = fe.compute(&w).unwrap();
        assert_eq!(mel.shape(), &[98, 40]);
        let expect = (1e-6f32).ln();
        for &v in mel.data() {
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn pure_tone_peaks_at_the_nearest_filter() {
        let fe = MelFrontEnd::new(MelConfig::default()).unwrap();
        let freq = 1000.0;
        let samples: Vec<f32> = (0..16000)
            .map(|i| {
                (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin() as f32 * 0.5
            })
            .collect();
        let mel = fe.compute(&Waveform::new(samples)).unwrap();

        // Column sums across frames -> strongest mel bin.
        let bins = 40;
        let mut col = vec![0.0f64; bins];
        for row in mel.data().chunks(bins) {
            for (c, &v) in col.iter_mut().zip(row) {
                *c += v as f64;
            }
        }
        let peak = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;

        let centers = mel_filter_centers(fe.config());
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - freq).abs().partial_cmp(&(b.1 - freq).abs()).unwrap()
            })
            .unwrap()
            .0;
        assert_eq!(peak, nearest);
    }

    #[test]
    fn amplitude_scaling_is_monotone() {
        let fe = MelFrontEnd::new(MelConfig::default()).unwrap();
        let base: Vec<f32> = (0..4000)
            .map(|i| (i as f32 * 0.13).sin() * 0.1 + (i as f32 * 0.041).cos() * 0.05)
            .collect();
        let scaled: Vec<f32> = base.iter().map(|&s| s * 3.0).collect();
        let a = fe.compute(&Waveform::new(base)).unwrap();
        let b = fe.compute(&Waveform::new(scaled)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(y >= x, "scaling by 3 decreased a mel entry: {x} -> {y}");
        }
    }
}
