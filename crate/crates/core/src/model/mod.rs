//! The source-domain acoustic classifier.
//!
//! Architecture: two strided 1-D convolutions over time, two bidirectional
//! gated-recurrent layers, additive attention pooling with a learned query
//! vector, and a dense softmax head. The default configuration lands at
//! 199,183 parameters for the 35-class source task (the target is 0.2M;
//! the recurrent width is the knob that was tuned to get there).

mod checkpoint;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, save_checkpoint, validate_params, CheckpointError,
};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Graph, NodeId, ParamSet, Parameter, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Layer sizes for the acoustic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mel_bins: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub conv2_stride: usize,
    /// Hidden units per direction in each recurrent layer.
    pub gru_hidden: usize,
    pub attention_dim: usize,
    pub num_source_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mel_bins: 40,
            conv1_channels: 32,
            conv1_kernel: 5,
            conv1_stride: 2,
            conv2_channels: 48,
            conv2_kernel: 5,
            conv2_stride: 2,
            gru_hidden: 78,
            attention_dim: 64,
            num_source_classes: 35,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_source_classes < 2 {
            return Err(ModelError::BadConfig(
                "need at least two output classes".into(),
            ));
        }
        let sizes = [
            self.mel_bins,
            self.conv1_channels,
            self.conv1_kernel,
            self.conv1_stride,
            self.conv2_channels,
            self.conv2_kernel,
            self.conv2_stride,
            self.gru_hidden,
            self.attention_dim,
        ];
        if sizes.iter().any(|&s| s == 0) {
            return Err(ModelError::BadConfig("all sizes must be positive".into()));
        }
        Ok(())
    }

    /// Utterance embedding width (both recurrent directions concatenated).
    pub fn embedding_dim(&self) -> usize {
        2 * self.gru_hidden
    }

    /// With a different output head, e.g. after transfer to a target task.
    pub fn with_classes(&self, num_classes: usize) -> Self {
        Self {
            num_source_classes: num_classes,
            ..*self
        }
    }

    /// Name -> shape of every weight tensor.
    pub fn tensor_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let h = self.gru_hidden;
        let e = self.embedding_dim();
        let mut m = BTreeMap::new();
        m.insert(
            "conv1.w".into(),
            vec![self.conv1_kernel, self.mel_bins, self.conv1_channels],
        );
        m.insert("conv1.b".into(), vec![self.conv1_channels]);
        m.insert(
            "conv2.w".into(),
            vec![self.conv2_kernel, self.conv1_channels, self.conv2_channels],
        );
        m.insert("conv2.b".into(), vec![self.conv2_channels]);
        for (layer, input) in [("gru1", self.conv2_channels), ("gru2", e)] {
            for dir in ["fwd", "bwd"] {
                m.insert(format!("{layer}.{dir}.wx"), vec![input, 3 * h]);
                m.insert(format!("{layer}.{dir}.wh"), vec![h, 3 * h]);
                m.insert(format!("{layer}.{dir}.b"), vec![3 * h]);
            }
        }
        m.insert("attn.w".into(), vec![e, self.attention_dim]);
        m.insert("attn.b".into(), vec![self.attention_dim]);
        m.insert("attn.v".into(), vec![self.attention_dim]);
        m.insert("head.w".into(), vec![e, self.num_source_classes]);
        m.insert("head.b".into(), vec![self.num_source_classes]);
        m
    }

    /// Total parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        self.tensor_shapes()
            .values()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Time steps left after both convolution layers.
    pub fn frames_after_conv(&self, frames: usize) -> Result<usize, ModelError> {
        let after = |t: usize, k: usize, s: usize| {
            if t < k {
                Err(ModelError::BadConfig(format!(
                    "{t} frames is shorter than a kernel of {k}"
                )))
            } else {
                Ok((t - k) / s + 1)
            }
        };
        let t1 = after(frames, self.conv1_kernel, self.conv1_stride)?;
        after(t1, self.conv2_kernel, self.conv2_stride)
    }
}

/// Fresh weights: uniform fan-in scaling for weight tensors, zeros for
/// biases. Deterministic for a given seed.
pub fn init_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet, ModelError> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    for (name, shape) in cfg.tensor_shapes() {
        let tensor = init_tensor(&name, &shape, rng);
        params.insert(Parameter::new(name, tensor, true))?;
    }
    Ok(params)
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    if name.ends_with(".b") {
        return Tensor::zeros(shape);
    }
    let fan_in = match shape.len() {
        3 => shape[0] * shape[1],
        2 => shape[0],
        _ => shape[0],
    };
    let scale = 1.0 / (fan_in as f32).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Graph handles produced by [`forward_am`].
#[derive(Debug, Clone, Copy)]
pub struct AmOutput {
    /// `[num_classes]` pre-softmax scores.
    pub logits: NodeId,
    /// `[2 * gru_hidden]` attention-pooled utterance vector.
    pub embedding: NodeId,
    /// `[frames]` attention weights (softmax-normalized).
    pub attention: NodeId,
}

/// Appends the full classifier to `g` on top of a `[frames, mel_bins]`
/// node and returns the logits, the pooled embedding, and the attention
/// weights.
pub fn forward_am(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParamSet,
    mel: NodeId,
) -> Result<AmOutput, ModelError> {
    let w1 = g.parameter(params, "conv1.w")?;
    let b1 = g.parameter(params, "conv1.b")?;
    let c1 = g.conv1d(mel, w1, b1, cfg.conv1_stride)?;
    let a1 = g.tanh(c1);

    let w2 = g.parameter(params, "conv2.w")?;
    let b2 = g.parameter(params, "conv2.b")?;
    let c2 = g.conv1d(a1, w2, b2, cfg.conv2_stride)?;
    let a2 = g.tanh(c2);

    let s1 = gru_bidirectional(g, params, "gru1", a2, cfg.gru_hidden)?;
    let s2 = gru_bidirectional(g, params, "gru2", s1, cfg.gru_hidden)?;

    let aw = g.parameter(params, "attn.w")?;
    let ab = g.parameter(params, "attn.b")?;
    let av = g.parameter(params, "attn.v")?;
    let proj_lin = g.matmul(s2, aw)?;
    let proj_aff = g.add(proj_lin, ab)?;
    let proj = g.tanh(proj_aff);
    let scores = g.matmul(proj, av)?; // [frames]
    let attention = g.softmax(scores)?;
    let embedding = g.matmul(attention, s2)?; // [2h]

    let hw = g.parameter(params, "head.w")?;
    let hb = g.parameter(params, "head.b")?;
    let logits_lin = g.matmul(embedding, hw)?;
    let logits = g.add(logits_lin, hb)?;

    Ok(AmOutput {
        logits,
        embedding,
        attention,
    })
}

/// Runs one recurrent layer in both time directions and concatenates the
/// per-frame states to `[frames, 2 * hidden]`.
fn gru_bidirectional(
    g: &mut Graph,
    params: &ParamSet,
    layer: &str,
    input: NodeId,
    hidden: usize,
) -> Result<NodeId, ModelError> {
    let frames = g.shape_of(input)[0];
    let mut outputs = Vec::with_capacity(2);
    for dir in ["fwd", "bwd"] {
        let wx = g.parameter(params, &format!("{layer}.{dir}.wx"))?;
        let wh = g.parameter(params, &format!("{layer}.{dir}.wh"))?;
        let b = g.parameter(params, &format!("{layer}.{dir}.b"))?;
        let mut h = g.constant_owned(Tensor::zeros(&[1, hidden]));
        let ts: Vec<usize> = if dir == "fwd" {
            (0..frames).collect()
        } else {
            (0..frames).rev().collect()
        };
        let mut states = Vec::with_capacity(frames);
        for &t in &ts {
            let x = g.slice(input, 0, t, t + 1)?;
            h = g.gru_step(x, h, wx, wh, b)?;
            states.push(h);
        }
        if dir == "bwd" {
            states.reverse();
        }
        outputs.push(g.concat(&states, 0)?);
    }
    Ok(g.concat(&outputs, 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Bindings;
    use rand::SeedableRng;

    #[test]
    fn default_param_count_within_budget() {
        let cfg = ModelConfig::default();
        let count = cfg.param_count();
        println!("default model parameter count: {count}");
        assert!(
            (190_380..=210_420).contains(&count),
            "{count} outside 200,400 +/- 5%"
        );
    }

    #[test]
    fn init_is_deterministic_and_counts_match() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert_eq!(pa.name(), pb.name());
            for (x, y) in pa.value().data().iter().zip(pb.value().data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(a.param_count(), cfg.param_count());
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            mel_bins: 8,
            conv1_channels: 4,
            conv1_kernel: 3,
            conv1_stride: 2,
            conv2_channels: 6,
            conv2_kernel: 3,
            conv2_stride: 1,
            gru_hidden: 5,
            attention_dim: 4,
            num_source_classes: 3,
        }
    }

    fn random_mel(frames: usize, bins: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![frames, bins],
            (0..frames * bins).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_shapes_and_attention_normalization() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let mel = g.input("mel", &[16, cfg.mel_bins]);
        let out = forward_am(&mut g, &cfg, &params, mel).unwrap();
        let mut b = Bindings::new();
        b.bind("mel", random_mel(16, cfg.mel_bins, 2));
        g.evaluate(out.logits, &b, &params).unwrap();

        assert_eq!(
            g.value(out.logits).unwrap().shape(),
            &[cfg.num_source_classes]
        );
        assert_eq!(
            g.value(out.embedding).unwrap().shape(),
            &[cfg.embedding_dim()]
        );
        let attn = g.value(out.attention).unwrap();
        let sum: f32 = attn.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(attn.data().iter().all(|&w| w > 0.0));
    }

    #[test]
    fn different_inputs_give_different_logits() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let logits_for = |seed: u64| {
            let mut g = Graph::new();
            let mel = g.input("mel", &[16, cfg.mel_bins]);
            let out = forward_am(&mut g, &cfg, &params, mel).unwrap();
            let mut b = Bindings::new();
            b.bind("mel", random_mel(16, cfg.mel_bins, seed));
            g.evaluate(out.logits, &b, &params).unwrap().clone()
        };
        assert_ne!(logits_for(10).data(), logits_for(11).data());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let run = || {
            let mut g = Graph::new();
            let mel = g.input("mel", &[12, cfg.mel_bins]);
            let out = forward_am(&mut g, &cfg, &params, mel).unwrap();
            let mut b = Bindings::new();
            b.bind("mel", random_mel(12, cfg.mel_bins, 42));
            g.evaluate(out.logits, &b, &params).unwrap().clone()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn gradients_reach_the_mel_input() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut g = Graph::new();
        let mel = g.input("mel", &[16, cfg.mel_bins]);
        let out = forward_am(&mut g, &cfg, &params, mel).unwrap();
        let sm = g.softmax(out.logits).unwrap();
        let sq = g.square(sm);
        let loss = g.reduce_sum(sq);
        let mut b = Bindings::new();
        b.bind("mel", random_mel(16, cfg.mel_bins, 3));
        g.evaluate(loss, &b, &params).unwrap();
        g.backward(loss).unwrap();
        let mel_grad = g.grad(mel).expect("input gradient cached");
        assert!(mel_grad.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn frozen_backbone_yields_no_am_updates() {
        let cfg = tiny_cfg();
        let mut params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        params.set_all_trainable(false);
        params
            .insert(Parameter::new(
                "theta",
                Tensor::zeros(&[16, cfg.mel_bins]),
                true,
            ))
            .unwrap();

        let mut g = Graph::new();
        let mel_in = g.input("mel", &[16, cfg.mel_bins]);
        let theta = g.parameter(&params, "theta").unwrap();
        let perturbed = g.add(mel_in, theta).unwrap();
        let out = forward_am(&mut g, &cfg, &params, perturbed).unwrap();
        let loss = g.reduce_sum(out.logits);
        let mut b = Bindings::new();
        b.bind("mel", random_mel(16, cfg.mel_bins, 3));
        g.evaluate(loss, &b, &params).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.contains_key("theta"));
        assert!(grads["theta"].data().iter().any(|&v| v != 0.0));
    }
}
