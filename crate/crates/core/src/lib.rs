//! Adversarial reprogramming for low-resource spoken command recognition.
//!
//! The crate repurposes a frozen, pretrained acoustic classifier for a new
//! command vocabulary by training an additive input perturbation (the
//! reprogram layer) together with a similarity-based many-to-one label
//! mapping. Four adaptation regimes are supported: training from scratch,
//! fine-tuning, reprogramming against a frozen backbone, and reprogramming
//! combined with fine-tuning.
//!
//! Everything is CPU-only and deterministic: all randomness flows from
//! explicit seeds, and repeated runs with the same configuration produce
//! byte-identical artifacts. The `parallel` feature (on by default) fans
//! independent work — experiment runs, batch gradients, evaluation sweeps —
//! out over a rayon pool without changing any numeric result.

pub mod data;
pub mod dsp;
pub mod mapping;
pub mod model;
pub mod parallel;
pub mod report;
pub mod reprogram;
pub mod tensor;
pub mod train;

pub use tensor::{Bindings, Graph, NodeId, ParamSet, Parameter, Tensor};
