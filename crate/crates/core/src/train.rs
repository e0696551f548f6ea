//! The four adaptation regimes and the multi-run evaluation protocol.
//!
//! * `baseline` — a fresh model trained from scratch on the target data
//!   with a direct target-class head.
//! * `tl` — the pretrained backbone with its source head replaced by a
//!   fresh target head; every weight fine-tunes.
//! * `ar` — the pretrained model bit-frozen; only the reprogram layer
//!   trains, against cross-entropy of label-mapped target probabilities.
//! * `ar_tl` — reprogram layer and backbone train simultaneously with the
//!   same mapped loss.
//!
//! Optimization is Adam throughout (1e-3 for model weights, 5e-2 for the
//! reprogram layer, which is a raw signal and tolerates larger steps).
//! When a validation split exists the best-validation snapshot is kept,
//! otherwise the final epoch wins. An experiment repeats a configuration
//! n times with seeds `seed+0 .. seed+n-1` and reports mean accuracy and
//! sample standard deviation.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{limit_split, mix_seed, DatasetManifest, DatasetError, Split};
use crate::dsp::{fix_length, sample_mask, MelConfig, MelFrontEnd, SpecAugmentConfig, Waveform};
use crate::mapping::{
    build_random_mapping, build_similarity_mapping, class_representations,
    cosine_similarity_matrix, aggregate_probs, ClassRepresentations, LabelMapping, MappingError,
};
use crate::model::{
    forward_am, init_params, validate_params, CheckpointError, ModelConfig, ModelError,
};
use crate::parallel::map_range;
use crate::reprogram::{
    init_theta, ReprogramDomain, ReprogramError, ReprogramLayer, ReprogramMode, THETA_NAME,
};
use crate::tensor::{
    adam_step, AdamConfig, AdamState, Bindings, GradMap, Graph, NodeId, ParamSet, Parameter,
    Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("regime `{0}` requires a pretrained checkpoint")]
    CheckpointRequired(&'static str),
    #[error("baseline training must not receive a pretrained checkpoint")]
    CheckpointForbidden,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("similarity mapping needs source-domain representations")]
    MissingSourceRepresentations,
    #[error("a label mapping is required exactly when a reprogram layer feeds the source head")]
    MappingMismatch,
    #[error("dataset has {actual} classes; the model head expects {expected}")]
    ClassCountMismatch { actual: usize, expected: usize },
    #[error("an experiment needs at least two runs, got {0}")]
    TooFewRuns(usize),
    #[error("relative improvement is undefined for baseline accuracy {0}")]
    ZeroBaseline(f64),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Reprogram(#[from] ReprogramError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Baseline,
    Tl,
    Ar,
    ArTl,
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::Tl => "tl",
            Regime::Ar => "ar",
            Regime::ArTl => "ar_tl",
        }
    }

    fn uses_reprogram(&self) -> bool {
        matches!(self, Regime::Ar | Regime::ArTl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    Similarity,
    Random,
    OneToOne,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lr_am: f32,
    pub lr_theta: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mapping: MappingKind,
    pub k: usize,
    pub domain: ReprogramDomain,
    pub mode: ReprogramMode,
    pub theta_init_scale: f32,
    /// Fixed model input length in samples.
    pub source_len: usize,
    /// Target-signal length for pad-mask reprogramming; defaults to the
    /// full source length.
    pub target_len: Option<usize>,
    pub augment: bool,
    pub per_class_limit: Option<usize>,
    /// Stop early once the running train-accuracy estimate reaches this.
    pub early_stop_train_acc: Option<f64>,
    pub mel: MelConfig,
    pub spec_augment: SpecAugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Baseline,
            lr_am: 1e-3,
            lr_theta: 5e-2,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            mapping: MappingKind::Similarity,
            k: 2,
            domain: ReprogramDomain::Waveform,
            mode: ReprogramMode::Full,
            theta_init_scale: 1e-3,
            source_len: 16_000,
            target_len: None,
            augment: false,
            per_class_limit: None,
            early_stop_train_acc: None,
            mel: MelConfig::default(),
            spec_augment: SpecAugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Length test/train waveforms are fixed to before entering the layer.
    pub fn input_wave_len(&self) -> usize {
        if self.regime.uses_reprogram() && self.mode == ReprogramMode::PadMask {
            self.target_len.unwrap_or(self.source_len)
        } else {
            self.source_len
        }
    }

    fn effective_k(&self) -> usize {
        match self.mapping {
            MappingKind::OneToOne => 1,
            _ => self.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_index: usize,
    pub seed: u64,
    /// Test accuracy in [0, 1].
    pub accuracy: f64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub trainable_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub system: String,
    pub limit: Option<usize>,
    pub n_runs: usize,
    pub avg_acc_pct: f64,
    pub std_pct: f64,
    pub rel_imp_pct: Option<f64>,
    pub baseline: Option<String>,
    pub trainable_params: usize,
    pub runs: Vec<RunReport>,
}

/// Everything a finished run hands back.
pub struct TrainedSystem {
    pub model_cfg: ModelConfig,
    pub params: ParamSet,
    pub theta: Option<ReprogramLayer>,
    pub mapping: Option<LabelMapping>,
    pub report: RunReport,
}

/// Outcome of source-domain pretraining.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub final_train_accuracy: f64,
    pub val_accuracy_curve: Vec<f64>,
    pub best_val_accuracy: Option<f64>,
}

// ---- single-example pipeline ----

enum ExampleInput {
    /// `[1, len]` waveform; the graph applies reprogramming and the mel
    /// front end (gradients reach the samples).
    Wave(Tensor),
    /// `[frames, mel_bins]` precomputed features for paths that never
    /// differentiate through the front end.
    Mel(Tensor),
}

struct TrainExample {
    input: ExampleInput,
    class: usize,
}

/// Static pieces every per-example graph shares.
struct LossBuilder<'a> {
    model_cfg: &'a ModelConfig,
    fe: &'a MelFrontEnd,
    theta: Option<&'a ReprogramLayer>,
    /// `[num_sources, num_targets]` aggregation constant for mapped loss.
    agg: Option<Arc<Tensor>>,
    num_loss_classes: usize,
}

struct BuiltLoss {
    graph: Graph,
    loss: NodeId,
    logits: NodeId,
}

impl<'a> LossBuilder<'a> {
    fn build(
        &self,
        example: &TrainExample,
        params: &ParamSet,
        aug_mask: Option<&Tensor>,
    ) -> Result<(BuiltLoss, Bindings), TrainError> {
        let mut g = Graph::new();
        let mut bindings = Bindings::new();

        let mel_node = match &example.input {
            ExampleInput::Wave(wave) => {
                let wave_node = g.input("wave", wave.shape());
                bindings.bind("wave", wave.clone());
                let perturbed = match self.theta {
                    Some(layer) => layer.build(&mut g, wave_node, params)?,
                    None => wave_node,
                };
                self.fe.build(&mut g, perturbed)?
            }
            ExampleInput::Mel(mel) => {
                let mel_node = g.input("mel", mel.shape());
                bindings.bind("mel", mel.clone());
                match self.theta {
                    Some(layer) if layer.domain() == ReprogramDomain::Feature => {
                        layer.build(&mut g, mel_node, params)?
                    }
                    _ => mel_node,
                }
            }
        };

        let mel_node = match aug_mask {
            Some(mask) => {
                let m = g.constant_owned(mask.clone());
                g.mul(mel_node, m)?
            }
            None => mel_node,
        };

        let out = forward_am(&mut g, self.model_cfg, params, mel_node)?;

        let loss = match &self.agg {
            None => {
                let mut onehot = vec![0.0f32; self.num_loss_classes];
                onehot[example.class] = 1.0;
                let target = g.constant_owned(Tensor::vector(onehot));
                g.cross_entropy(out.logits, target)?
            }
            Some(agg) => {
                // Cross-entropy of the renormalized aggregated target
                // scores: log(sum s) - log(s_true). The epsilon keeps the
                // logs finite if a score underflows.
                let probs = g.softmax(out.logits)?;
                let agg_node = g.constant(agg.clone());
                let scores = g.matmul(probs, agg_node)?;
                let num_targets = agg.shape()[1];
                let eps = g.constant_owned(Tensor::filled(&[num_targets], 1e-12));
                let scores = g.add(scores, eps)?;
                let mut onehot = vec![0.0f32; num_targets];
                onehot[example.class] = 1.0;
                let pick = g.constant_owned(
                    Tensor::new(vec![num_targets, 1], onehot).expect("onehot shape"),
                );
                let s_true = g.matmul(scores, pick)?;
                let log_true = g.log(s_true);
                let total = g.reduce_sum(scores);
                let log_total = g.log(total);
                let neg_one = g.constant_owned(Tensor::scalar(-1.0));
                let neg_log_true = g.mul(log_true, neg_one)?;
                g.add(log_total, neg_log_true)?
            }
        };

        Ok((
            BuiltLoss {
                graph: g,
                loss,
                logits: out.logits,
            },
            bindings,
        ))
    }
}

fn softmax_vec(logits: &[f32]) -> Tensor {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::vector(exps.into_iter().map(|e| (e / sum) as f32).collect())
}

/// Plain (no-gradient) logits of one utterance under an optionally
/// reprogrammed model.
fn utterance_logits(
    model_cfg: &ModelConfig,
    params: &ParamSet,
    fe: &MelFrontEnd,
    wave: &Waveform,
    theta: Option<&ReprogramLayer>,
) -> Result<Vec<f32>, TrainError> {
    let mel = match theta {
        Some(layer) if layer.domain() == ReprogramDomain::Waveform => {
            let x = Tensor::new(vec![1, wave.len()], wave.samples().to_vec())?;
            let perturbed = layer.apply(&x)?;
            fe.compute(&Waveform::new(perturbed.into_data()))?
        }
        Some(layer) => {
            let mel = fe.compute(wave)?;
            layer.apply(&mel)?
        }
        None => fe.compute(wave)?,
    };
    let mut g = Graph::new();
    let mel_node = g.input("mel", mel.shape());
    let out = forward_am(&mut g, model_cfg, params, mel_node)?;
    let mut bindings = Bindings::new();
    bindings.bind("mel", mel);
    g.evaluate(out.logits, &bindings, params)?;
    Ok(g.value(out.logits).expect("evaluated").data().to_vec())
}

/// Accuracy of a system over a set of utterances. A label mapping must be
/// present exactly when a reprogram layer feeds the source-class head.
pub fn evaluate_system(
    model_cfg: &ModelConfig,
    params: &ParamSet,
    fe: &MelFrontEnd,
    theta: Option<&ReprogramLayer>,
    mapping: Option<&LabelMapping>,
    examples: &[(Waveform, usize)],
    wave_len: usize,
) -> Result<f64, TrainError> {
    if theta.is_some() != mapping.is_some() {
        return Err(TrainError::MappingMismatch);
    }
    if examples.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let outcomes: Vec<Result<bool, TrainError>> = map_range(examples.len(), |i| {
        let (wave, class) = &examples[i];
        let fixed = fix_length(wave, wave_len);
        let logits = utterance_logits(model_cfg, params, fe, &fixed, theta)?;
        let predicted = match mapping {
            Some(m) => aggregate_probs(&softmax_vec(&logits), m)?.argmax(),
            None => Tensor::vector(logits).argmax(),
        };
        Ok(predicted == *class)
    });
    let mut correct = 0usize;
    for o in outcomes {
        if o? {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

// ---- the shared fit loop ----

struct FitOutcome {
    loss_curve: Vec<f64>,
    epochs_run: usize,
    val_accuracy_curve: Vec<f64>,
    best_val_accuracy: Option<f64>,
}

struct FitSpec<'a> {
    cfg: &'a TrainConfig,
    model_cfg: &'a ModelConfig,
    fe: &'a MelFrontEnd,
    examples: &'a [TrainExample],
    val: &'a [(Waveform, usize)],
    theta: Option<&'a ReprogramLayer>,
    mapping: Option<&'a LabelMapping>,
    optimizer_groups: Vec<(AdamState, GroupFilter)>,
    wave_len: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum GroupFilter {
    ThetaOnly,
    ModelOnly,
}

impl GroupFilter {
    fn accepts(&self, name: &str) -> bool {
        match self {
            GroupFilter::ThetaOnly => name == THETA_NAME,
            GroupFilter::ModelOnly => name != THETA_NAME,
        }
    }
}

fn fit(spec: FitSpec<'_>, params: &mut ParamSet) -> Result<FitOutcome, TrainError> {
    let cfg = spec.cfg;
    let n = spec.examples.len();
    if n == 0 {
        return Err(TrainError::EmptySplit("train"));
    }
    let builder = LossBuilder {
        model_cfg: spec.model_cfg,
        fe: spec.fe,
        theta: spec.theta,
        agg: spec.mapping.map(|m| Arc::new(m.aggregation_matrix())),
        num_loss_classes: spec
            .mapping
            .map(|m| m.num_targets())
            .unwrap_or(spec.model_cfg.num_source_classes),
    };

    let mut rng_shuffle = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 2]));
    let mut rng_augment = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 3]));
    let mut optimizers = spec.optimizer_groups;

    // Augmentation masks multiply the post-reprogram spectrogram, whose
    // shape is fixed across examples (inputs are length-normalized and
    // pad-mask reprogramming grows them to the source length).
    let mask_shape: Option<(usize, usize)> = if cfg.augment {
        let bins = spec.fe.config().mel_bins;
        let shape = match spec.theta {
            Some(l) if l.domain() == ReprogramDomain::Waveform => {
                let padded_len = l.theta().value().shape()[1];
                (spec.fe.config().frame_count(padded_len)?, bins)
            }
            Some(l) => (l.theta().value().shape()[0], bins),
            None => match &spec.examples[0].input {
                ExampleInput::Mel(m) => (m.shape()[0], m.shape()[1]),
                ExampleInput::Wave(w) => (spec.fe.config().frame_count(w.shape()[1])?, bins),
            },
        };
        Some(shape)
    } else {
        None
    };

    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut val_curve = Vec::new();
    let mut best: Option<(f64, ParamSet)> = None;
    let mut epochs_run = 0;

    for _epoch in 0..cfg.epochs {
        epochs_run += 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_shuffle);

        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            // Masks are drawn sequentially so augmentation never depends
            // on worker scheduling.
            let masks: Vec<Option<Tensor>> = batch
                .iter()
                .map(|_| {
                    mask_shape.map(|(rows, cols)| {
                        sample_mask(rows, cols, &cfg.spec_augment, &mut rng_augment)
                    })
                })
                .collect();

            let shared: &ParamSet = params;
            let results: Vec<Result<(GradMap, f64, bool), TrainError>> =
                map_range(batch.len(), |bi| {
                    let example = &spec.examples[batch[bi]];
                    let (mut built, bindings) = builder.build(example, shared, masks[bi].as_ref())?;
                    built.graph.evaluate(built.loss, &bindings, shared)?;
                    let loss_value = built.graph.value(built.loss).expect("evaluated").item();
                    if !loss_value.is_finite() {
                        return Err(TrainError::Tensor(TensorError::NonFinite { op: "loss" }));
                    }
                    let predicted = match spec.mapping {
                        Some(m) => {
                            let logits = built.graph.value(built.logits).expect("evaluated");
                            aggregate_probs(&softmax_vec(logits.data()), m)?.argmax()
                        }
                        None => built.graph.value(built.logits).expect("evaluated").argmax(),
                    };
                    let grads = built.graph.backward(built.loss)?;
                    Ok((grads, loss_value as f64, predicted == example.class))
                });

            // Sequential, index-ordered reduction keeps results identical
            // across thread schedules and feature flags.
            let mut sums: GradMap = GradMap::new();
            let mut batch_loss = 0.0f64;
            for r in results {
                let (grads, loss_value, correct) = r?;
                batch_loss += loss_value;
                if correct {
                    epoch_correct += 1;
                }
                for (name, g) in grads {
                    match sums.get_mut(&name) {
                        None => {
                            sums.insert(name, g);
                        }
                        Some(acc) => {
                            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for g in sums.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            epoch_loss += batch_loss;

            for (state, filter) in optimizers.iter_mut() {
                let group: GradMap = sums
                    .iter()
                    .filter(|(name, _)| filter.accepts(name))
                    .map(|(name, g)| (name.clone(), g.clone()))
                    .collect();
                if !group.is_empty() {
                    adam_step(params, &group, state)?;
                }
            }
        }
        loss_curve.push(epoch_loss / n as f64);

        if !spec.val.is_empty() {
            let theta_now = spec.theta.map(|l| synced_layer(l, params));
            let acc = evaluate_system(
                spec.model_cfg,
                params,
                spec.fe,
                theta_now.as_ref(),
                spec.mapping,
                spec.val,
                spec.wave_len,
            )?;
            val_curve.push(acc);
            if best.as_ref().map(|(b, _)| acc > *b).unwrap_or(true) {
                best = Some((acc, params.clone()));
            }
        }

        if let Some(threshold) = cfg.early_stop_train_acc {
            if epoch_correct as f64 / n as f64 >= threshold {
                break;
            }
        }
    }

    let best_val_accuracy = best.as_ref().map(|(acc, _)| *acc);
    if let Some((_, snapshot)) = best {
        *params = snapshot;
    }
    Ok(FitOutcome {
        loss_curve,
        epochs_run,
        val_accuracy_curve: val_curve,
        best_val_accuracy,
    })
}

/// Copies the current `theta` value out of the parameter set into a fresh
/// layer so plain-tensor evaluation sees the trained perturbation.
fn synced_layer(layer: &ReprogramLayer, params: &ParamSet) -> ReprogramLayer {
    let mut out = layer.clone();
    if let Some(p) = params.get(THETA_NAME) {
        *out.theta_mut().value_mut() = p.value().clone();
    }
    out
}

// ---- data preparation ----

fn fixed_split(
    manifest: &DatasetManifest,
    split: Split,
    wave_len: usize,
) -> Result<Vec<(Waveform, usize)>, TrainError> {
    Ok(manifest
        .load_split(split)?
        .into_iter()
        .map(|(w, c)| (fix_length(&w, wave_len), c))
        .collect())
}

fn prepare_examples(
    waves: &[(Waveform, usize)],
    fe: &MelFrontEnd,
    needs_wave_graph: bool,
) -> Result<Vec<TrainExample>, TrainError> {
    if needs_wave_graph {
        return waves
            .iter()
            .map(|(w, c)| {
                Ok(TrainExample {
                    input: ExampleInput::Wave(Tensor::new(
                        vec![1, w.len()],
                        w.samples().to_vec(),
                    )?),
                    class: *c,
                })
            })
            .collect();
    }
    let mels: Vec<Result<Tensor, TrainError>> =
        map_range(waves.len(), |i| Ok(fe.compute(&waves[i].0)?));
    mels.into_iter()
        .zip(waves)
        .map(|(mel, (_, c))| {
            Ok(TrainExample {
                input: ExampleInput::Mel(mel?),
                class: *c,
            })
        })
        .collect()
}

// ---- public operations ----

/// Trains the source-domain classifier from scratch and reports training
/// and validation accuracy. The checkpoint the caller saves from the
/// returned parameters feeds every adaptation regime.
pub fn pretrain_source(
    cfg: &TrainConfig,
    source: &DatasetManifest,
) -> Result<(ParamSet, PretrainReport), TrainError> {
    if source.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if source.num_classes() != cfg.model.num_source_classes {
        return Err(TrainError::ClassCountMismatch {
            actual: source.num_classes(),
            expected: cfg.model.num_source_classes,
        });
    }
    let fe = MelFrontEnd::new(cfg.mel)?;
    let mut params = init_params(&cfg.model, &mut ChaCha8Rng::seed_from_u64(mix_seed(&[
        cfg.seed, 1,
    ])))?;

    let train_waves = fixed_split(source, Split::Train, cfg.source_len)?;
    let val = fixed_split(source, Split::Validation, cfg.source_len)?;
    let examples = prepare_examples(&train_waves, &fe, false)?;

    let spec = FitSpec {
        cfg,
        model_cfg: &cfg.model,
        fe: &fe,
        examples: &examples,
        val: &val,
        theta: None,
        mapping: None,
        optimizer_groups: vec![(
            AdamState::new(AdamConfig::with_lr(cfg.lr_am)),
            GroupFilter::ModelOnly,
        )],
        wave_len: cfg.source_len,
    };
    let outcome = fit(spec, &mut params)?;

    let final_train_accuracy = evaluate_system(
        &cfg.model,
        &params,
        &fe,
        None,
        None,
        &train_waves,
        cfg.source_len,
    )?;
    Ok((
        params,
        PretrainReport {
            epochs_run: outcome.epochs_run,
            final_train_accuracy,
            val_accuracy_curve: outcome.val_accuracy_curve,
            best_val_accuracy: outcome.best_val_accuracy,
        },
    ))
}

/// Builds the label mapping a reprogramming run will train against.
/// Target-class representations always come from the unperturbed (zero
/// reprogram) pretrained model, computed once before training.
pub fn build_mapping(
    cfg: &TrainConfig,
    pretrained: &ParamSet,
    fe: &MelFrontEnd,
    target_train: &[(Waveform, usize)],
    num_targets: usize,
    source_reps: Option<&ClassRepresentations>,
) -> Result<LabelMapping, TrainError> {
    let k = cfg.effective_k();
    match cfg.mapping {
        MappingKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 4]));
            Ok(build_random_mapping(
                cfg.model.num_source_classes,
                num_targets,
                k,
                &mut rng,
            )?)
        }
        MappingKind::Similarity | MappingKind::OneToOne => {
            let source_reps =
                source_reps.ok_or(TrainError::MissingSourceRepresentations)?;
            let target_reps = class_representations(
                &cfg.model,
                pretrained,
                fe,
                target_train,
                num_targets,
                None,
            )?;
            let sim = cosine_similarity_matrix(&target_reps, source_reps)?;
            Ok(build_similarity_mapping(&sim, k)?)
        }
    }
}

/// Mean class embeddings of the source task under the pretrained model;
/// computed once per experiment and shared across runs.
pub fn source_representations(
    cfg: &TrainConfig,
    pretrained: &ParamSet,
    source: &DatasetManifest,
) -> Result<ClassRepresentations, TrainError> {
    let fe = MelFrontEnd::new(cfg.mel)?;
    let waves = fixed_split(source, Split::Train, cfg.source_len)?;
    if waves.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    Ok(class_representations(
        &cfg.model,
        pretrained,
        &fe,
        &waves,
        source.num_classes(),
        None,
    )?)
}

/// Runs one adaptation regime end to end on the target task and evaluates
/// on its test split.
pub fn train_regime(
    cfg: &TrainConfig,
    pretrained: Option<&ParamSet>,
    target: &DatasetManifest,
    source_reps: Option<&ClassRepresentations>,
) -> Result<TrainedSystem, TrainError> {
    match (cfg.regime, pretrained) {
        (Regime::Baseline, Some(_)) => return Err(TrainError::CheckpointForbidden),
        (Regime::Tl, None) => return Err(TrainError::CheckpointRequired("tl")),
        (Regime::Ar, None) => return Err(TrainError::CheckpointRequired("ar")),
        (Regime::ArTl, None) => return Err(TrainError::CheckpointRequired("ar_tl")),
        _ => {}
    }
    if let Some(p) = pretrained {
        validate_params(&cfg.model, p)?;
    }

    let num_targets = target.num_classes();
    let fe = MelFrontEnd::new(cfg.mel)?;
    let wave_len = cfg.input_wave_len();

    let manifest = match cfg.per_class_limit {
        Some(limit) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0]));
            limit_split(target, limit, &mut rng)
        }
        None => target.clone(),
    };
    let train_waves = fixed_split(&manifest, Split::Train, wave_len)?;
    if train_waves.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let val_waves = fixed_split(&manifest, Split::Validation, wave_len)?;
    let test_waves = manifest.load_split(Split::Test)?;
    if test_waves.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }

    let mut rng_init = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 1]));

    // Assemble parameters, regime model configuration, theta, and mapping.
    let (model_cfg, mut params, theta, mapping) = match cfg.regime {
        Regime::Baseline => {
            let model_cfg = cfg.model.with_classes(num_targets);
            let params = init_params(&model_cfg, &mut rng_init)?;
            (model_cfg, params, None, None)
        }
        Regime::Tl => {
            let model_cfg = cfg.model.with_classes(num_targets);
            let mut params = pretrained.expect("checked above").clone();
            replace_head(&mut params, &model_cfg, &mut rng_init)?;
            (model_cfg, params, None, None)
        }
        Regime::Ar | Regime::ArTl => {
            let pretrained = pretrained.expect("checked above");
            let mapping = build_mapping(
                cfg,
                pretrained,
                &fe,
                &train_waves,
                num_targets,
                source_reps,
            )?;
            let mut params = pretrained.clone();
            params.set_all_trainable(cfg.regime == Regime::ArTl);
            let theta_shape = theta_shape(cfg, &fe)?;
            let theta_param = init_theta(&theta_shape, cfg.theta_init_scale, &mut rng_init);
            let layer = match cfg.mode {
                ReprogramMode::Full => ReprogramLayer::full(theta_param, cfg.domain),
                ReprogramMode::PadMask => {
                    let d_t = match cfg.domain {
                        ReprogramDomain::Waveform => wave_len,
                        ReprogramDomain::Feature => {
                            cfg.mel.frame_count(wave_len)? * cfg.mel.mel_bins
                        }
                    };
                    ReprogramLayer::pad_mask(theta_param, d_t, cfg.domain)?
                }
            };
            params.insert(layer.theta().clone())?;
            (cfg.model, params, Some(layer), Some(mapping))
        }
    };

    let mut optimizer_groups = Vec::new();
    if theta.is_some() {
        optimizer_groups.push((
            AdamState::new(AdamConfig::with_lr(cfg.lr_theta)),
            GroupFilter::ThetaOnly,
        ));
    }
    if cfg.regime != Regime::Ar {
        optimizer_groups.push((
            AdamState::new(AdamConfig::with_lr(cfg.lr_am)),
            GroupFilter::ModelOnly,
        ));
    }

    let needs_wave_graph = theta
        .as_ref()
        .map(|l| l.domain() == ReprogramDomain::Waveform)
        .unwrap_or(false);
    let examples = prepare_examples(&train_waves, &fe, needs_wave_graph)?;

    let trainable_params = params.trainable_param_count();
    let outcome = fit(
        FitSpec {
            cfg,
            model_cfg: &model_cfg,
            fe: &fe,
            examples: &examples,
            val: &val_waves,
            theta: theta.as_ref(),
            mapping: mapping.as_ref(),
            optimizer_groups,
            wave_len,
        },
        &mut params,
    )?;

    let theta = theta.map(|l| synced_layer(&l, &params));
    let accuracy = evaluate_system(
        &model_cfg,
        &params,
        &fe,
        theta.as_ref(),
        mapping.as_ref(),
        &test_waves,
        wave_len,
    )?;

    Ok(TrainedSystem {
        model_cfg,
        params,
        theta,
        mapping,
        report: RunReport {
            run_index: 0,
            seed: cfg.seed,
            accuracy,
            loss_curve: outcome.loss_curve,
            trainable_params,
        },
    })
}

fn theta_shape(cfg: &TrainConfig, fe: &MelFrontEnd) -> Result<Vec<usize>, TrainError> {
    Ok(match cfg.domain {
        ReprogramDomain::Waveform => vec![1, cfg.source_len],
        ReprogramDomain::Feature => vec![
            fe.config().frame_count(cfg.source_len)?,
            cfg.mel.mel_bins,
        ],
    })
}

/// Swaps the source-class head for a freshly initialized target head.
fn replace_head(
    params: &mut ParamSet,
    model_cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(), TrainError> {
    params.remove("head.w");
    params.remove("head.b");
    let e = model_cfg.embedding_dim();
    let c = model_cfg.num_source_classes;
    let scale = 1.0 / (e as f32).sqrt();
    let data: Vec<f32> = (0..e * c)
        .map(|_| rand::Rng::gen_range(rng, -scale..=scale))
        .collect();
    params.insert(Parameter::new(
        "head.w",
        Tensor::new(vec![e, c], data)?,
        true,
    ))?;
    params.insert(Parameter::new("head.b", Tensor::zeros(&[c]), true))?;
    params.set_all_trainable(true);
    Ok(())
}

/// Percent improvement of `acc` over `baseline_acc` (both in percent).
pub fn rel_improvement(acc_pct: f64, baseline_pct: f64) -> Result<f64, TrainError> {
    if baseline_pct <= 0.0 {
        return Err(TrainError::ZeroBaseline(baseline_pct));
    }
    Ok(100.0 * (acc_pct - baseline_pct) / baseline_pct)
}

/// Sample standard deviation (n-1 denominator).
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    var.sqrt()
}

/// Shared, read-only inputs for a multi-run experiment.
pub struct ExperimentSetup<'a> {
    pub system: String,
    pub target: &'a DatasetManifest,
    pub pretrained: Option<&'a ParamSet>,
    pub source_reps: Option<&'a ClassRepresentations>,
    /// Baseline report for the relative-improvement column.
    pub baseline: Option<&'a ExperimentReport>,
}

/// Repeats the configured system `n_runs` times with seeds
/// `cfg.seed + 0 .. cfg.seed + n_runs - 1` and assembles the aggregate
/// report. Runs are independent and execute in parallel; reports merge by
/// run index, so the output does not depend on scheduling.
pub fn run_experiment(
    cfg: &TrainConfig,
    setup: &ExperimentSetup<'_>,
    n_runs: usize,
) -> Result<ExperimentReport, TrainError> {
    if n_runs < 2 {
        return Err(TrainError::TooFewRuns(n_runs));
    }
    let results: Vec<Result<RunReport, TrainError>> = map_range(n_runs, |i| {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed + i as u64;
        let trained = train_regime(&run_cfg, setup.pretrained, setup.target, setup.source_reps)?;
        let mut report = trained.report;
        report.run_index = i;
        Ok(report)
    });
    let runs: Vec<RunReport> = results.into_iter().collect::<Result<_, _>>()?;

    let accs_pct: Vec<f64> = runs.iter().map(|r| r.accuracy * 100.0).collect();
    let avg = accs_pct.iter().sum::<f64>() / accs_pct.len() as f64;
    let std = sample_std(&accs_pct);
    let (rel, baseline_name) = match setup.baseline {
        Some(b) => (
            Some(rel_improvement(avg, b.avg_acc_pct)?),
            Some(b.system.clone()),
        ),
        None => (None, None),
    };
    Ok(ExperimentReport {
        system: setup.system.clone(),
        limit: cfg.per_class_limit,
        n_runs,
        avg_acc_pct: avg,
        std_pct: std,
        rel_imp_pct: rel,
        baseline: baseline_name,
        trainable_params: runs[0].trainable_params,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_improvement_values() {
        let r = rel_improvement(82.3, 64.0).unwrap();
        assert!((r - 28.59375).abs() < 1e-9);
        assert_eq!(format!("{r:.2}"), "28.59");

        let r = rel_improvement(88.6, 70.3).unwrap();
        assert!((r - 26.0313).abs() < 1e-3);
        assert_eq!((r * 10.0).round() / 10.0, 26.0);

        assert_eq!(rel_improvement(55.5, 55.5).unwrap(), 0.0);
        assert!(rel_improvement(10.0, 0.0).is_err());
    }

    #[test]
    fn sample_std_matches_hand_oracle() {
        // Accuracies 2% and 4%: mean 3, std sqrt(2) = 1.41421.
        let values = [2.0, 4.0];
        let mean = values.iter().sum::<f64>() / 2.0;
        assert_eq!(mean, 3.0);
        assert!((sample_std(&values) - 1.41421).abs() < 1e-5);
        assert_eq!(sample_std(&[7.0, 7.0, 7.0]), 0.0);
    }

    #[test]
    fn mapped_loss_graph_matches_plain_aggregation() {
        // The in-graph aggregated cross-entropy must agree with the plain
        // softmax -> aggregate_probs route.
        let mapping = LabelMapping::new(vec![vec![0, 2], vec![1, 3]], 4, 2).unwrap();
        let logits = vec![0.3f32, -0.7, 1.2, 0.1];
        let target_class = 1usize;

        let plain = {
            let probs = softmax_vec(&logits);
            let agg = aggregate_probs(&probs, &mapping).unwrap();
            -(agg.data()[target_class] as f64).ln()
        };

        let mut g = Graph::new();
        let z = g.constant_owned(Tensor::vector(logits));
        let probs = g.softmax(z).unwrap();
        let a = g.constant_owned(mapping.aggregation_matrix());
        let scores = g.matmul(probs, a).unwrap();
        let eps = g.constant_owned(Tensor::filled(&[2], 1e-12));
        let scores = g.add(scores, eps).unwrap();
        let pick = g
            .constant_owned(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
        let s_true = g.matmul(scores, pick).unwrap();
        let log_true = g.log(s_true);
        let total = g.reduce_sum(scores);
        let log_total = g.log(total);
        let neg = g.constant_owned(Tensor::scalar(-1.0));
        let neg_log_true = g.mul(log_true, neg).unwrap();
        let loss = g.add(log_total, neg_log_true).unwrap();
        let v = g
            .evaluate(loss, &Bindings::new(), &ParamSet::new())
            .unwrap()
            .item() as f64;
        assert!((v - plain).abs() < 1e-5, "graph {v} vs plain {plain}");
    }
}
