//! Many-to-one label mapping between source and target vocabularies.
//!
//! Each target class is assigned a disjoint set of k source classes. The
//! similarity-based construction compares per-class mean embeddings from
//! the pretrained classifier (cosine similarity), then greedily assigns
//! the strongest remaining pair whose source is still free. At inference
//! time the target score is the mean of its assigned source probabilities,
//! renormalized to a distribution; the mean keeps scores comparable across
//! different k.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{MelFrontEnd, Waveform};
use crate::model::{forward_am, ModelConfig};
use crate::parallel::map_range;
use crate::reprogram::{ReprogramDomain, ReprogramLayer};
use crate::tensor::{Bindings, Graph, ParamSet, Tensor};

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("class {0} has no examples")]
    EmptyClass(usize),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("need {needed} source classes for {targets} targets at k={k}, only {available} available")]
    InsufficientSources {
        needed: usize,
        available: usize,
        targets: usize,
        k: usize,
    },
    #[error("mapping references source class {index} but only {num_sources} exist")]
    SourceOutOfRange { index: usize, num_sources: usize },
    #[error("k must be at least 1")]
    BadK,
    #[error("source probabilities are not a distribution (sum {0})")]
    NotADistribution(f64),
    #[error("mapping invariant violated: {0}")]
    Invalid(String),
    #[error(transparent)]
    Forward(#[from] crate::model::ModelError),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Reprogram(#[from] crate::reprogram::ReprogramError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Per-class mean embedding vectors.
#[derive(Debug, Clone)]
pub struct ClassRepresentations {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

impl ClassRepresentations {
    pub fn new(vectors: Vec<Vec<f32>>) -> Result<Self, MappingError> {
        let dim = vectors.first().map(|v| v.len()).unwrap_or(0);
        for v in &vectors {
            if v.len() != dim {
                return Err(MappingError::DimensionMismatch(dim, v.len()));
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn vector(&self, class: usize) -> &[f32] {
        &self.vectors[class]
    }
}

/// Mean embedding per class from (class id, embedding) pairs, accumulated
/// in f64. Every class in `0..num_classes` must appear at least once.
pub fn mean_representations(
    items: &[(usize, Vec<f32>)],
    num_classes: usize,
) -> Result<ClassRepresentations, MappingError> {
    let dim = items.first().map(|(_, e)| e.len()).unwrap_or(0);
    let mut sums = vec![vec![0.0f64; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (class, emb) in items {
        if emb.len() != dim {
            return Err(MappingError::DimensionMismatch(dim, emb.len()));
        }
        counts[*class] += 1;
        for (s, &v) in sums[*class].iter_mut().zip(emb) {
            *s += v as f64;
        }
    }
    let mut vectors = Vec::with_capacity(num_classes);
    for (class, (sum, count)) in sums.into_iter().zip(counts).enumerate() {
        if count == 0 {
            return Err(MappingError::EmptyClass(class));
        }
        vectors.push(sum.into_iter().map(|s| (s / count as f64) as f32).collect());
    }
    ClassRepresentations::new(vectors)
}

/// Feeds every example through the pretrained classifier and averages the
/// attention-pooled embeddings per class. Target-domain examples pass
/// through the reprogram layer first when one is supplied.
pub fn class_representations(
    cfg: &ModelConfig,
    params: &ParamSet,
    fe: &MelFrontEnd,
    examples: &[(Waveform, usize)],
    num_classes: usize,
    reprogram: Option<&ReprogramLayer>,
) -> Result<ClassRepresentations, MappingError> {
    let embeddings: Vec<Result<(usize, Vec<f32>), MappingError>> =
        map_range(examples.len(), |i| {
            let (wave, class) = &examples[i];
            let emb = utterance_embedding(cfg, params, fe, wave, reprogram)?;
            Ok((*class, emb))
        });
    let items: Vec<(usize, Vec<f32>)> = embeddings.into_iter().collect::<Result<_, _>>()?;
    mean_representations(&items, num_classes)
}

/// Embedding of a single utterance under the (optionally reprogrammed)
/// classifier. No gradients are needed here, so the perturbation is
/// applied as a plain tensor op before the forward pass.
pub(crate) fn utterance_embedding(
    cfg: &ModelConfig,
    params: &ParamSet,
    fe: &MelFrontEnd,
    wave: &Waveform,
    reprogram: Option<&ReprogramLayer>,
) -> Result<Vec<f32>, MappingError> {
    let mel = match reprogram {
        Some(layer) if layer.domain() == ReprogramDomain::Waveform => {
            let x = Tensor::new(vec![1, wave.len()], wave.samples().to_vec())?;
            let perturbed = layer.apply(&x)?;
            let perturbed_wave = Waveform::new(perturbed.into_data());
            fe.compute(&perturbed_wave)?
        }
        Some(layer) => {
            let mel = fe.compute(wave)?;
            layer.apply(&mel)?
        }
        None => fe.compute(wave)?,
    };
    let mut g = Graph::new();
    let mel_node = g.input("mel", mel.shape());
    let out = forward_am(&mut g, cfg, params, mel_node)?;
    let mut bindings = Bindings::new();
    bindings.bind("mel", mel);
    g.evaluate(out.embedding, &bindings, params)?;
    Ok(g.value(out.embedding).expect("evaluated").data().to_vec())
}

/// Cosine similarities; rows are target classes, columns source classes.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    num_targets: usize,
    num_sources: usize,
    data: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn num_targets(&self) -> usize {
        self.num_targets
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn at(&self, target: usize, source: usize) -> f32 {
        self.data[target * self.num_sources + source]
    }

    pub fn from_rows(rows: Vec<Vec<f32>>) -> Result<Self, MappingError> {
        let num_targets = rows.len();
        let num_sources = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(num_targets * num_sources);
        for r in rows {
            if r.len() != num_sources {
                return Err(MappingError::DimensionMismatch(num_sources, r.len()));
            }
            data.extend(r);
        }
        Ok(Self {
            num_targets,
            num_sources,
            data,
        })
    }

    /// CSV with one header row of source names and one row per target.
    pub fn to_csv(&self, target_names: &[String], source_names: &[String]) -> String {
        let mut out = String::from("target");
        for s in source_names {
            out.push(',');
            out.push_str(s);
        }
        out.push('\n');
        for (t, name) in target_names.iter().enumerate() {
            out.push_str(name);
            for s in 0..self.num_sources {
                out.push_str(&format!(",{:.6}", self.at(t, s)));
            }
            out.push('\n');
        }
        out
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        // Degenerate inputs: treat an all-zero embedding as orthogonal.
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())) as f32
}

pub fn cosine_similarity_matrix(
    targets: &ClassRepresentations,
    sources: &ClassRepresentations,
) -> Result<SimilarityMatrix, MappingError> {
    if targets.dim() != sources.dim() {
        return Err(MappingError::DimensionMismatch(targets.dim(), sources.dim()));
    }
    let rows = (0..targets.num_classes())
        .map(|t| {
            (0..sources.num_classes())
                .map(|s| cosine(targets.vector(t), sources.vector(s)))
                .collect()
        })
        .collect();
    SimilarityMatrix::from_rows(rows)
}

/// Disjoint assignment of k source classes per target class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapping {
    k: usize,
    num_sources: usize,
    /// `assignments[t]` lists the source classes of target `t`, in the
    /// order they were assigned.
    assignments: Vec<Vec<usize>>,
}

impl LabelMapping {
    pub fn new(
        assignments: Vec<Vec<usize>>,
        num_sources: usize,
        k: usize,
    ) -> Result<Self, MappingError> {
        let mapping = Self {
            k,
            num_sources,
            assignments,
        };
        mapping.validate()?;
        Ok(mapping)
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        if self.k == 0 {
            return Err(MappingError::BadK);
        }
        let mut seen = vec![false; self.num_sources];
        for sources in &self.assignments {
            if sources.len() != self.k {
                return Err(MappingError::Invalid(format!(
                    "target has {} sources, expected {}",
                    sources.len(),
                    self.k
                )));
            }
            for &s in sources {
                if s >= self.num_sources {
                    return Err(MappingError::SourceOutOfRange {
                        index: s,
                        num_sources: self.num_sources,
                    });
                }
                if seen[s] {
                    return Err(MappingError::Invalid(format!(
                        "source class {s} assigned to two targets"
                    )));
                }
                seen[s] = true;
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_targets(&self) -> usize {
        self.assignments.len()
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn sources_of(&self, target: usize) -> &[usize] {
        &self.assignments[target]
    }

    /// `[num_sources, num_targets]` matrix A with `A[s][t] = 1/k` when
    /// source s maps to target t; `probs x A` yields unnormalized target
    /// scores inside a graph.
    pub fn aggregation_matrix(&self) -> Tensor {
        let mut data = vec![0.0f32; self.num_sources * self.num_targets()];
        let nt = self.num_targets();
        for (t, sources) in self.assignments.iter().enumerate() {
            for &s in sources {
                data[s * nt + t] = 1.0 / self.k as f32;
            }
        }
        Tensor::new(vec![self.num_sources, nt], data).expect("aggregation shape")
    }
}

fn check_capacity(num_sources: usize, num_targets: usize, k: usize) -> Result<(), MappingError> {
    if k == 0 {
        return Err(MappingError::BadK);
    }
    if k * num_targets > num_sources {
        return Err(MappingError::InsufficientSources {
            needed: k * num_targets,
            available: num_sources,
            targets: num_targets,
            k,
        });
    }
    Ok(())
}

/// Greedy global assignment: repeatedly take the highest remaining
/// (target, source) similarity whose source is unassigned and whose target
/// still needs sources. Ties break toward the lower source index, then the
/// lower target index.
pub fn build_similarity_mapping(
    sim: &SimilarityMatrix,
    k: usize,
) -> Result<LabelMapping, MappingError> {
    check_capacity(sim.num_sources(), sim.num_targets(), k)?;
    let mut pairs: Vec<(f32, usize, usize)> = Vec::with_capacity(sim.num_targets() * sim.num_sources());
    for t in 0..sim.num_targets() {
        for s in 0..sim.num_sources() {
            pairs.push((sim.at(t, s), s, t));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("similarities are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut taken = vec![false; sim.num_sources()];
    let mut assignments = vec![Vec::with_capacity(k); sim.num_targets()];
    for (_, s, t) in pairs {
        if !taken[s] && assignments[t].len() < k {
            taken[s] = true;
            assignments[t].push(s);
        }
    }
    LabelMapping::new(assignments, sim.num_sources(), k)
}

/// Uniformly random disjoint k-subsets, drawn by shuffling the source ids
/// and chunking. Deterministic given the rng.
pub fn build_random_mapping(
    num_sources: usize,
    num_targets: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<LabelMapping, MappingError> {
    check_capacity(num_sources, num_targets, k)?;
    let mut ids: Vec<usize> = (0..num_sources).collect();
    ids.shuffle(rng);
    let assignments = ids[..k * num_targets]
        .chunks(k)
        .map(|c| c.to_vec())
        .collect();
    LabelMapping::new(assignments, num_sources, k)
}

/// Folds source-class probabilities into target-class probabilities: the
/// target score is the mean of its assigned source probabilities, then the
/// scores are renormalized. If every mapped source carries zero mass the
/// result degenerates to the uniform distribution.
pub fn aggregate_probs(
    source_probs: &Tensor,
    mapping: &LabelMapping,
) -> Result<Tensor, MappingError> {
    let probs = source_probs.data();
    let sum: f64 = probs.iter().map(|&p| p as f64).sum();
    if probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-5 {
        return Err(MappingError::NotADistribution(sum));
    }
    let nt = mapping.num_targets();
    let mut scores = vec![0.0f64; nt];
    for (t, score) in scores.iter_mut().enumerate() {
        for &s in mapping.sources_of(t) {
            let p = *probs
                .get(s)
                .ok_or(MappingError::SourceOutOfRange {
                    index: s,
                    num_sources: probs.len(),
                })?;
            *score += p as f64;
        }
        *score /= mapping.k() as f64;
    }
    let total: f64 = scores.iter().sum();
    let out: Vec<f32> = if total == 0.0 {
        vec![1.0 / nt as f32; nt]
    } else {
        scores.iter().map(|&s| (s / total) as f32).collect()
    };
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_of_one_and_of_two() {
        let items = vec![
            (0usize, vec![1.0, 2.0]),
            (1, vec![2.0, 0.0]),
            (1, vec![4.0, 2.0]),
        ];
        let reps = mean_representations(&items, 2).unwrap();
        assert_eq!(reps.vector(0), &[1.0, 2.0]);
        assert_eq!(reps.vector(1), &[3.0, 1.0]);
    }

    #[test]
    fn duplicated_example_does_not_move_the_mean() {
        let single = mean_representations(&[(0, vec![0.5, -0.25])], 1).unwrap();
        let doubled =
            mean_representations(&[(0, vec![0.5, -0.25]), (0, vec![0.5, -0.25])], 1).unwrap();
        assert_eq!(single.vector(0), doubled.vector(0));
    }

    #[test]
    fn empty_class_is_named() {
        let err = mean_representations(&[(0, vec![1.0])], 2).unwrap_err();
        assert!(matches!(err, MappingError::EmptyClass(1)));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[2.0, 2.0], &[2.0, 2.0]) - 1.0).abs() < 1e-6);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]) - 0.70711).abs() < 1e-5);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn greedy_top_k_single_target() {
        let sim = SimilarityMatrix::from_rows(vec![vec![0.9, 0.1, 0.5]]).unwrap();
        let mapping = build_similarity_mapping(&sim, 2).unwrap();
        let mut sources = mapping.sources_of(0).to_vec();
        sources.sort_unstable();
        assert_eq!(sources, vec![0, 2]);
    }

    #[test]
    fn greedy_steals_the_best_source_first() {
        let sim = SimilarityMatrix::from_rows(vec![vec![0.9, 0.8], vec![0.85, 0.1]]).unwrap();
        let mapping = build_similarity_mapping(&sim, 1).unwrap();
        assert_eq!(mapping.sources_of(0), &[0]);
        assert_eq!(mapping.sources_of(1), &[1]);
    }

    #[test]
    fn insufficient_sources_rejected() {
        let sim = SimilarityMatrix::from_rows(vec![vec![0.1, 0.2]; 2]).unwrap();
        assert!(matches!(
            build_similarity_mapping(&sim, 2),
            Err(MappingError::InsufficientSources { .. })
        ));
    }

    #[test]
    fn random_mapping_is_seeded_and_disjoint() {
        let a = build_random_mapping(10, 3, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = build_random_mapping(10, 3, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        for seed in 0..1000u64 {
            let m = build_random_mapping(7, 2, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            m.validate().unwrap();
        }
    }

    #[test]
    fn k1_full_coverage_is_a_permutation() {
        let m = build_random_mapping(6, 6, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut all: Vec<usize> = (0..6).flat_map(|t| m.sources_of(t).to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn aggregation_hand_example() {
        // probs [0.6,0.2,0.1,0.1], t0 -> {0,1}, t1 -> {2,3}:
        // means [0.4, 0.1] -> normalized [0.8, 0.2]
        let mapping = LabelMapping::new(vec![vec![0, 1], vec![2, 3]], 4, 2).unwrap();
        let out = aggregate_probs(&Tensor::vector(vec![0.6, 0.2, 0.1, 0.1]), &mapping).unwrap();
        assert!((out.data()[0] - 0.8).abs() < 1e-6);
        assert!((out.data()[1] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn uniform_probs_stay_uniform() {
        let mapping = LabelMapping::new(vec![vec![0, 1], vec![2, 3]], 4, 2).unwrap();
        let out = aggregate_probs(&Tensor::vector(vec![0.25; 4]), &mapping).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-6);
        assert!((out.data()[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn all_mass_on_one_mapped_source() {
        let mapping = LabelMapping::new(vec![vec![0, 1], vec![2, 3]], 4, 2).unwrap();
        let out = aggregate_probs(&Tensor::vector(vec![0.0, 1.0, 0.0, 0.0]), &mapping).unwrap();
        assert_eq!(out.data()[0], 1.0);
        assert_eq!(out.data()[1], 0.0);
    }

    #[test]
    fn out_of_range_source_rejected() {
        let mapping = LabelMapping::new(vec![vec![0, 1], vec![2, 3]], 4, 2).unwrap();
        let err = aggregate_probs(&Tensor::vector(vec![0.5, 0.5]), &mapping);
        assert!(matches!(err, Err(MappingError::SourceOutOfRange { .. })));
    }

    #[test]
    fn planted_pairing_recovered_from_noisy_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dim = 12;
        let sources: Vec<Vec<f32>> = (0..6)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let planted = [4usize, 1, 5];
        let targets: Vec<Vec<f32>> = planted
            .iter()
            .map(|&s| {
                sources[s]
                    .iter()
                    .map(|&v| v + rng.gen_range(-0.05f32..0.05))
                    .collect()
            })
            .collect();
        let sim = cosine_similarity_matrix(
            &ClassRepresentations::new(targets).unwrap(),
            &ClassRepresentations::new(sources).unwrap(),
        )
        .unwrap();
        let mapping = build_similarity_mapping(&sim, 1).unwrap();
        for (t, &s) in planted.iter().enumerate() {
            assert_eq!(mapping.sources_of(t), &[s]);
        }
    }
}
