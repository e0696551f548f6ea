//! SpecAugment-style masking: zero out random contiguous stripes along the
//! time (rows) and frequency (columns) axes of a spectrogram.

use rand::Rng;

use crate::tensor::Tensor;

use super::DspError;

/// Mask counts and maximum widths. Defaults: two time masks up to 20
/// frames, two frequency masks up to 7 mel bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            num_time_masks: 2,
            max_time_width: 20,
            num_freq_masks: 2,
            max_freq_width: 7,
        }
    }
}

/// Draws a fresh binary `{0,1}` mask of shape `[rows, cols]`. Every mask
/// width is uniform in `[0, max_width]` (clamped to the axis length) and
/// its start is uniform over the valid range. Deterministic given the rng.
pub fn sample_mask(
    rows: usize,
    cols: usize,
    cfg: &SpecAugmentConfig,
    rng: &mut impl Rng,
) -> Tensor {
    let mut mask = vec![1.0f32; rows * cols];
    for _ in 0..cfg.num_time_masks {
        let max_w = cfg.max_time_width.min(rows);
        let w = rng.gen_range(0..=max_w);
        let start = rng.gen_range(0..=rows - w);
        for r in start..start + w {
            mask[r * cols..(r + 1) * cols].fill(0.0);
        }
    }
    for _ in 0..cfg.num_freq_masks {
        let max_w = cfg.max_freq_width.min(cols);
        let w = rng.gen_range(0..=max_w);
        let start = rng.gen_range(0..=cols - w);
        for r in 0..rows {
            mask[r * cols + start..r * cols + start + w].fill(0.0);
        }
    }
    Tensor::new(vec![rows, cols], mask).expect("mask shape")
}

/// Applies freshly drawn masks to a rank-2 spectrogram. Masked entries
/// become exactly zero; everything else is bit-identical to the input.
pub fn spec_augment(
    mel: &Tensor,
    cfg: &SpecAugmentConfig,
    rng: &mut impl Rng,
) -> Result<Tensor, DspError> {
    if mel.rank() != 2 {
        return Err(DspError::NotSpectrogram(mel.shape().to_vec()));
    }
    let mask = sample_mask(mel.shape()[0], mel.shape()[1], cfg, rng);
    let data = mel
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m == 0.0 { 0.0 } else { v })
        .collect();
    Ok(Tensor::new(mel.shape().to_vec(), data)?)
}
