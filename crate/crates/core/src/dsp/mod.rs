//! Audio loading and the differentiable feature front end.

mod augment;
mod mel;
mod wav;

pub use augment::{sample_mask, spec_augment, SpecAugmentConfig};
pub use mel::{mel_filter_centers, MelConfig, MelFrontEnd};
pub use wav::{fix_length, load_wav, write_wav, WavError, Waveform, SAMPLE_RATE};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("waveform of {len} samples is shorter than one frame ({frame_length})")]
    WaveformTooShort { len: usize, frame_length: usize },
    #[error("invalid mel configuration: {0}")]
    BadMelConfig(String),
    #[error("spec_augment expects a rank-2 tensor, got {0:?}")]
    NotSpectrogram(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}
