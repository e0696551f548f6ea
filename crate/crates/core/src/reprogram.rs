//! The trainable additive input transformation.
//!
//! Two forms are supported. The padded/masked form places the (shorter)
//! target signal at the start of a source-length buffer and adds the
//! perturbation only where the binary mask allows:
//!
//! ```text
//! x' = Pad(x) + M .* theta        (pad-mask)
//! ```
//!
//! The full-sequence form drops the length restriction and perturbs every
//! sample:
//!
//! ```text
//! x' = x + theta                  (full)
//! ```
//!
//! `theta` is the only trainable tensor of the layer. It lives in either
//! the waveform domain (`[1, samples]`) or the feature domain
//! (`[frames, mel_bins]`); padding fills trailing time (samples or whole
//! frames respectively). No clipping is applied to x', so downstream
//! consumers must tolerate values outside [-1, 1].

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Graph, NodeId, Parameter, Tensor, TensorError};

pub const THETA_NAME: &str = "theta";

#[derive(Debug, Error)]
pub enum ReprogramError {
    #[error("target length {d_t} is longer than source length {d_s}")]
    TargetLongerThanSource { d_t: usize, d_s: usize },
    #[error("layer mode does not support this operation")]
    WrongMode,
    #[error("mask entries must be 0 or 1")]
    BadMask,
    #[error("input has {actual} values, layer expects {expected}")]
    LengthMismatch { actual: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprogramMode {
    PadMask,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprogramDomain {
    Waveform,
    Feature,
}

/// Uniform init in `[-scale, scale]`; scale 0 gives exact zeros. The
/// waveform-domain default shape `[1, 16000]` carries 16k trainable values
/// for a one-second 16 kHz input.
pub fn init_theta(shape: &[usize], scale: f32, rng: &mut impl Rng) -> Parameter {
    let numel: usize = shape.iter().product();
    let data = if scale == 0.0 {
        vec![0.0; numel]
    } else {
        (0..numel).map(|_| rng.gen_range(-scale..=scale)).collect()
    };
    Parameter::new(
        THETA_NAME,
        Tensor::new(shape.to_vec(), data).expect("theta shape"),
        true,
    )
}

#[derive(Debug, Clone)]
pub struct ReprogramLayer {
    theta: Parameter,
    mask: Option<Tensor>,
    target_len: Option<usize>,
    mode: ReprogramMode,
    domain: ReprogramDomain,
}

impl ReprogramLayer {
    /// Full-sequence layer: x' = x + theta.
    pub fn full(theta: Parameter, domain: ReprogramDomain) -> Self {
        Self {
            theta,
            mask: None,
            target_len: None,
            mode: ReprogramMode::Full,
            domain,
        }
    }

    /// Pad-mask layer with the canonical mask: zero over the `target_len`
    /// leading (flat, row-major) positions the target occupies, one over
    /// the padded remainder.
    pub fn pad_mask(
        theta: Parameter,
        target_len: usize,
        domain: ReprogramDomain,
    ) -> Result<Self, ReprogramError> {
        let d_s = theta.value().numel();
        if target_len > d_s {
            return Err(ReprogramError::TargetLongerThanSource {
                d_t: target_len,
                d_s,
            });
        }
        let mask: Vec<f32> = (0..d_s)
            .map(|i| if i < target_len { 0.0 } else { 1.0 })
            .collect();
        let mask = Tensor::new(theta.value().shape().to_vec(), mask).expect("mask shape");
        Ok(Self {
            theta,
            mask: Some(mask),
            target_len: Some(target_len),
            mode: ReprogramMode::PadMask,
            domain,
        })
    }

    /// Pad-mask layer with an explicit binary mask.
    pub fn pad_mask_with(
        theta: Parameter,
        target_len: usize,
        mask: Tensor,
        domain: ReprogramDomain,
    ) -> Result<Self, ReprogramError> {
        let d_s = theta.value().numel();
        if target_len > d_s {
            return Err(ReprogramError::TargetLongerThanSource {
                d_t: target_len,
                d_s,
            });
        }
        if mask.shape() != theta.value().shape()
            || mask.data().iter().any(|&m| m != 0.0 && m != 1.0)
        {
            return Err(ReprogramError::BadMask);
        }
        Ok(Self {
            theta,
            mask: Some(mask),
            target_len: Some(target_len),
            mode: ReprogramMode::PadMask,
            domain,
        })
    }

    pub fn theta(&self) -> &Parameter {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut Parameter {
        &mut self.theta
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    pub fn mode(&self) -> ReprogramMode {
        self.mode
    }

    pub fn domain(&self) -> ReprogramDomain {
        self.domain
    }

    pub fn trainable_params(&self) -> usize {
        self.theta.value().numel()
    }

    /// Applies the layer to a plain tensor (no gradients).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, ReprogramError> {
        match self.mode {
            ReprogramMode::Full => reprogram_full(x, self),
            ReprogramMode::PadMask => reprogram_pad(x, self),
        }
    }

    /// Appends the layer to a graph on top of node `x`. The caller's
    /// `ParamSet` must contain a parameter named `theta` matching this
    /// layer when the graph is evaluated.
    pub fn build(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: &crate::tensor::ParamSet,
    ) -> Result<NodeId, ReprogramError> {
        let theta = g.parameter(params, THETA_NAME)?;
        match self.mode {
            ReprogramMode::Full => Ok(g.add(x, theta)?),
            ReprogramMode::PadMask => {
                let xshape = g.shape_of(x).to_vec();
                let tshape = self.theta.value().shape().to_vec();
                // Trailing time is padded: axis 1 for [1, len] waveforms,
                // axis 0 for [frames, bins] features.
                let axis = match self.domain {
                    ReprogramDomain::Waveform => 1,
                    ReprogramDomain::Feature => 0,
                };
                let padded = if xshape[axis] < tshape[axis] {
                    let mut zshape = tshape.clone();
                    zshape[axis] -= xshape[axis];
                    let zeros = g.constant_owned(Tensor::zeros(&zshape));
                    g.concat(&[x, zeros], axis)?
                } else {
                    x
                };
                let mask = g.constant_owned(self.mask.clone().expect("pad-mask layer has mask"));
                let delta = g.mul(theta, mask)?;
                Ok(g.add(padded, delta)?)
            }
        }
    }
}

/// Eq(uation)-2 form: elementwise x + theta; shapes must match exactly.
pub fn reprogram_full(x: &Tensor, layer: &ReprogramLayer) -> Result<Tensor, ReprogramError> {
    let theta = layer.theta.value();
    if x.shape() != theta.shape() {
        return Err(ReprogramError::Tensor(TensorError::ShapeMismatch {
            op: "reprogram_full",
            lhs: x.shape().to_vec(),
            rhs: theta.shape().to_vec(),
        }));
    }
    let data = x
        .data()
        .iter()
        .zip(theta.data())
        .map(|(&a, &b)| a + b)
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

/// Pad-mask form: `x' = Pad(x) + M .* theta` with the target placed at the
/// start and zeros after. The output takes theta's shape.
pub fn reprogram_pad(x: &Tensor, layer: &ReprogramLayer) -> Result<Tensor, ReprogramError> {
    if layer.mode != ReprogramMode::PadMask {
        return Err(ReprogramError::WrongMode);
    }
    let theta = layer.theta.value();
    let mask = layer.mask.as_ref().expect("pad-mask layer has mask");
    let d_t = x.numel();
    let d_s = theta.numel();
    if d_t > d_s {
        return Err(ReprogramError::TargetLongerThanSource { d_t, d_s });
    }
    if let Some(expected) = layer.target_len {
        if d_t != expected {
            return Err(ReprogramError::LengthMismatch {
                actual: d_t,
                expected,
            });
        }
    }
    let mut data = Vec::with_capacity(d_s);
    for i in 0..d_s {
        let padded = if i < d_t { x.data()[i] } else { 0.0 };
        data.push(padded + mask.data()[i] * theta.data()[i]);
    }
    Ok(Tensor::new(theta.shape().to_vec(), data)?)
}
