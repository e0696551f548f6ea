//! Dataset ingestion and deterministic synthetic audio.
//!
//! On-disk layout: `root/<class_name>/*.wav` with an optional
//! `root/splits.json` (`{"validation": [...], "test": [...]}`, paths
//! relative to the root) naming held-out files. Class ids come from the
//! lexicographic order of the class directories; files sort within each
//! class, so a rescan always reproduces the same manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{load_wav, write_wav, WavError, Waveform};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error under {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("dataset root {0} holds no class directories")]
    EmptyRoot(PathBuf),
    #[error("class directory `{0}` holds no wav files")]
    EmptyClass(String),
    #[error("malformed splits.json: {0}")]
    BadSplits(String),
    #[error("invalid synthesis spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Wav(#[from] WavError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub path: PathBuf,
    pub class: usize,
}

/// Ordered class names plus per-split file lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub train: Vec<Entry>,
    pub validation: Vec<Entry>,
    pub test: Vec<Entry>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> &[Entry] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Loads every waveform of a split.
    pub fn load_split(&self, split: Split) -> Result<Vec<(Waveform, usize)>, DatasetError> {
        self.split(split)
            .iter()
            .map(|e| Ok((load_wav(&e.path)?, e.class)))
            .collect()
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SplitsFile {
    validation: Vec<String>,
    test: Vec<String>,
}

/// Walks `root/<class>/*.wav` into a manifest. Split membership comes from
/// `root/splits.json` when present; otherwise every file lands in train.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetManifest, DatasetError> {
    let root = root.as_ref();
    let mut class_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if path.is_dir() {
            class_dirs.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    if class_dirs.is_empty() {
        return Err(DatasetError::EmptyRoot(root.to_path_buf()));
    }
    class_dirs.sort();

    let splits_path = root.join("splits.json");
    let (val_set, test_set): (BTreeSet<PathBuf>, BTreeSet<PathBuf>) = if splits_path.exists() {
        let raw = fs::read_to_string(&splits_path).map_err(io_err(&splits_path))?;
        let file: SplitsFile =
            serde_json::from_str(&raw).map_err(|e| DatasetError::BadSplits(e.to_string()))?;
        (
            file.validation.iter().map(|p| root.join(p)).collect(),
            file.test.iter().map(|p| root.join(p)).collect(),
        )
    } else {
        (BTreeSet::new(), BTreeSet::new())
    };

    let mut manifest = DatasetManifest {
        classes: class_dirs.iter().map(|(n, _)| n.clone()).collect(),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (class_id, (name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
            .collect();
        if files.is_empty() {
            return Err(DatasetError::EmptyClass(name.clone()));
        }
        files.sort();
        for path in files {
            let entry = Entry {
                path: path.clone(),
                class: class_id,
            };
            if test_set.contains(&path) {
                manifest.test.push(entry);
            } else if val_set.contains(&path) {
                manifest.validation.push(entry);
            } else {
                manifest.train.push(entry);
            }
        }
    }
    Ok(manifest)
}

/// Deterministic fallback split for datasets without a manifest file:
/// within each class every fifth file (sorted order) goes to test, then
/// every fifth of the remaining train files to validation.
pub fn apply_default_split(manifest: &DatasetManifest) -> DatasetManifest {
    let mut out = DatasetManifest {
        classes: manifest.classes.clone(),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for class in 0..manifest.num_classes() {
        let files: Vec<&Entry> = manifest.train.iter().filter(|e| e.class == class).collect();
        let mut kept = Vec::new();
        for (i, e) in files.iter().enumerate() {
            if i % 5 == 4 {
                out.test.push((*e).clone());
            } else {
                kept.push(*e);
            }
        }
        for (j, e) in kept.into_iter().enumerate() {
            if j % 5 == 4 {
                out.validation.push(e.clone());
            } else {
                out.train.push(e.clone());
            }
        }
    }
    out.validation.extend(manifest.validation.iter().cloned());
    out.test.extend(manifest.test.iter().cloned());
    out
}

/// Caps the train split at `limit` files per class, drawn uniformly
/// without replacement. Validation and test are untouched.
pub fn limit_split(
    manifest: &DatasetManifest,
    limit: usize,
    rng: &mut impl Rng,
) -> DatasetManifest {
    let mut train = Vec::new();
    for class in 0..manifest.num_classes() {
        let files: Vec<&Entry> = manifest.train.iter().filter(|e| e.class == class).collect();
        if files.len() <= limit {
            train.extend(files.into_iter().cloned());
            continue;
        }
        let chosen = rand::seq::index::sample(rng, files.len(), limit);
        let mut picked: Vec<usize> = chosen.into_iter().collect();
        picked.sort_unstable();
        train.extend(picked.into_iter().map(|i| files[i].clone()));
    }
    DatasetManifest {
        classes: manifest.classes.clone(),
        train,
        validation: manifest.validation.clone(),
        test: manifest.test.clone(),
    }
}

// ---- synthetic audio ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    Flat,
    Ramp,
    Decay,
    Bump,
}

impl Envelope {
    fn gain(&self, t_norm: f64) -> f64 {
        match self {
            Envelope::Flat => 1.0,
            Envelope::Ramp => t_norm,
            Envelope::Decay => (-3.0 * t_norm).exp(),
            Envelope::Bump => (std::f64::consts::PI * t_norm).sin(),
        }
    }
}

/// Per-class prototype: an amplitude-enveloped linear chirp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneClass {
    pub name: String,
    pub base_freq: f64,
    pub chirp_rate: f64,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// A fixed background tone mixed into every utterance of a task. Constant
/// across utterances, it models a deterministic domain shift (recording
/// hum, channel coloration) that an additive input transformation can
/// cancel outright.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferenceTone {
    pub freq: f64,
    pub amplitude: f64,
}

/// Recipe for a deterministic synthetic task. All per-utterance variation
/// (frequency jitter, additive noise) scales with `noise_level`, so a zero
/// level makes every utterance of a class identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<ToneClass>,
    pub noise_level: f64,
    pub utterance_len: usize,
    pub counts: SplitCounts,
    pub seed: u64,
    /// Constant background tones added to every utterance.
    #[serde(default)]
    pub interference: Vec<InterferenceTone>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.classes.is_empty() {
            return Err(DatasetError::BadSpec("no classes".into()));
        }
        for c in &self.classes {
            let peak = c.base_freq.max(c.base_freq + c.chirp_rate);
            if !(0.0 < c.base_freq && peak < 8000.0) {
                return Err(DatasetError::BadSpec(format!(
                    "class `{}` sweeps outside (0, 8000) Hz",
                    c.name
                )));
            }
        }
        for tone in &self.interference {
            if !(0.0 < tone.freq && tone.freq < 8000.0) || tone.amplitude < 0.0 {
                return Err(DatasetError::BadSpec(format!(
                    "interference tone at {} Hz is invalid",
                    tone.freq
                )));
            }
        }
        if self.noise_level < 0.0 {
            return Err(DatasetError::BadSpec("negative noise level".into()));
        }
        if self.utterance_len == 0 || self.counts.train == 0 {
            return Err(DatasetError::BadSpec(
                "utterance length and train count must be positive".into(),
            ));
        }
        Ok(())
    }

    /// A six-class source task: well-separated chirps with varied envelopes.
    pub fn default_source(seed: u64) -> Self {
        let protos = [
            (350.0, 0.0, Envelope::Bump),
            (550.0, 200.0, Envelope::Flat),
            (850.0, -150.0, Envelope::Decay),
            (1300.0, 100.0, Envelope::Ramp),
            (2000.0, -250.0, Envelope::Bump),
            (3100.0, 150.0, Envelope::Decay),
        ];
        SynthSpec {
            classes: protos
                .iter()
                .enumerate()
                .map(|(i, &(f, c, e))| ToneClass {
                    name: format!("cmd{i:02}"),
                    base_freq: f,
                    chirp_rate: c,
                    envelope: e,
                })
                .collect(),
            noise_level: 0.05,
            utterance_len: 16000,
            counts: SplitCounts {
                train: 200,
                validation: 20,
                test: 20,
            },
            seed,
            interference: Vec::new(),
        }
    }

    /// Target task planted on top of a source task: target class `i` is
    /// source class `planted[i]` with its base frequency scaled by
    /// `freq_factor`. The deliberate correspondence lets similarity mapping
    /// recovery be verified exactly.
    pub fn derived_target(
        source: &SynthSpec,
        planted: &[usize],
        freq_factor: f64,
        noise_level: f64,
        counts: SplitCounts,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        let mut classes = Vec::with_capacity(planted.len());
        for (i, &s) in planted.iter().enumerate() {
            let proto = source
                .classes
                .get(s)
                .ok_or_else(|| DatasetError::BadSpec(format!("planted index {s} out of range")))?;
            classes.push(ToneClass {
                name: format!("w{i:02}"),
                base_freq: proto.base_freq * freq_factor,
                chirp_rate: proto.chirp_rate,
                envelope: proto.envelope,
            });
        }
        let spec = SynthSpec {
            classes,
            noise_level,
            utterance_len: source.utterance_len,
            counts,
            seed,
            interference: source.interference.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// splitmix64; used to derive independent stream seeds from structured
/// coordinates.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn synth_utterance(spec: &SynthSpec, class: &ToneClass, rng: &mut impl Rng) -> Vec<f32> {
    let len = spec.utterance_len;
    let sr = crate::dsp::SAMPLE_RATE as f64;
    let jitter: f64 = rng.gen_range(-1.0..1.0);
    let f0 = class.base_freq * (1.0 + 0.5 * spec.noise_level * jitter);
    let amp = 0.45;
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let t_norm = n as f64 / len as f64;
            let phase = 2.0 * std::f64::consts::PI * (f0 * t + 0.5 * class.chirp_rate * t * t);
            let tone = amp * class.envelope.gain(t_norm) * phase.sin();
            let hum: f64 = spec
                .interference
                .iter()
                .map(|i| i.amplitude * (2.0 * std::f64::consts::PI * i.freq * t).sin())
                .sum();
            let noise = spec.noise_level * 0.5 * rng.gen_range(-1.0f64..1.0);
            (tone + hum + noise) as f32
        })
        .collect()
}

/// Writes the synthetic dataset under `out_dir` (one directory per class
/// plus `splits.json`) and returns the manifest from re-scanning it.
/// Byte-deterministic for a given spec.
pub fn generate_synthetic(
    spec: &SynthSpec,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest, DatasetError> {
    use rand::SeedableRng;
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut splits = SplitsFile::default();
    let split_plan = [
        (0u64, Split::Train, spec.counts.train),
        (1, Split::Validation, spec.counts.validation),
        (2, Split::Test, spec.counts.test),
    ];
    for (class_idx, class) in spec.classes.iter().enumerate() {
        let class_dir = out_dir.join(&class.name);
        fs::create_dir_all(&class_dir).map_err(io_err(&class_dir))?;
        for &(split_tag, split, count) in &split_plan {
            for utt in 0..count {
                let file = format!("{}_{:03}.wav", split_name(split), utt);
                let rel = format!("{}/{}", class.name, file);
                let seed = mix_seed(&[spec.seed, class_idx as u64, split_tag, utt as u64]);
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let samples = synth_utterance(spec, class, &mut rng);
                write_wav(class_dir.join(&file), &samples)?;
                match split {
                    Split::Validation => splits.validation.push(rel),
                    Split::Test => splits.test.push(rel),
                    Split::Train => {}
                }
            }
        }
    }
    let splits_json = serde_json::to_string_pretty(&splits)
        .map_err(|e| DatasetError::BadSplits(e.to_string()))?;
    let splits_path = out_dir.join("splits.json");
    fs::write(&splits_path, splits_json).map_err(io_err(&splits_path))?;
    scan_dataset(out_dir)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Validation => "val",
        Split::Test => "test",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_flat_dataset(root: &Path, classes: &[(&str, usize)]) {
        for (name, n) in classes {
            let dir = root.join(name);
            fs::create_dir_all(&dir).unwrap();
            for i in 0..*n {
                write_wav(dir.join(format!("u{i:02}.wav")), &vec![0.0; 800]).unwrap();
            }
        }
    }

    #[test]
    fn scan_sorts_classes_and_defaults_to_train() {
        let dir = tempfile::tempdir().unwrap();
        write_flat_dataset(dir.path(), &[("yes", 3), ("no", 3)]);
        let m = scan_dataset(dir.path()).unwrap();
        assert_eq!(m.classes, vec!["no", "yes"]);
        assert_eq!(m.train.len(), 6);
        assert!(m.validation.is_empty() && m.test.is_empty());
        let rescan = scan_dataset(dir.path()).unwrap();
        assert_eq!(m, rescan);
    }

    #[test]
    fn empty_root_and_empty_class_are_named() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            scan_dataset(dir.path()),
            Err(DatasetError::EmptyRoot(_))
        ));
        fs::create_dir_all(dir.path().join("hollow")).unwrap();
        match scan_dataset(dir.path()) {
            Err(DatasetError::EmptyClass(name)) => assert_eq!(name, "hollow"),
            other => panic!("expected EmptyClass, got {other:?}"),
        }
    }

    #[test]
    fn splits_file_respected() {
        let dir = tempfile::tempdir().unwrap();
        write_flat_dataset(dir.path(), &[("a", 4)]);
        fs::write(
            dir.path().join("splits.json"),
            r#"{"validation": ["a/u01.wav"], "test": ["a/u03.wav"]}"#,
        )
        .unwrap();
        let m = scan_dataset(dir.path()).unwrap();
        assert_eq!(m.train.len(), 2);
        assert_eq!(m.validation.len(), 1);
        assert_eq!(m.test.len(), 1);
    }

    #[test]
    fn default_split_strides() {
        let dir = tempfile::tempdir().unwrap();
        write_flat_dataset(dir.path(), &[("a", 10)]);
        let m = apply_default_split(&scan_dataset(dir.path()).unwrap());
        assert_eq!(m.test.len(), 2);
        assert_eq!(m.validation.len(), 1);
        assert_eq!(m.train.len(), 7);
        // No path in two splits.
        let mut all: Vec<_> = m
            .train
            .iter()
            .chain(&m.validation)
            .chain(&m.test)
            .map(|e| e.path.clone())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn limit_split_caps_train_only() {
        let dir = tempfile::tempdir().unwrap();
        write_flat_dataset(dir.path(), &[("a", 20), ("b", 2)]);
        let m = scan_dataset(dir.path()).unwrap();
        let limited = limit_split(&m, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let count = |c: usize| limited.train.iter().filter(|e| e.class == c).count();
        assert_eq!(count(0), 3);
        assert_eq!(count(1), 2); // fewer available than the limit
        let again = limit_split(&m, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(limited, again);
    }

    #[test]
    fn synthetic_generation_is_byte_deterministic() {
        let spec = SynthSpec {
            classes: vec![ToneClass {
                name: "x".into(),
                base_freq: 700.0,
                chirp_rate: 50.0,
                envelope: Envelope::Bump,
            }],
            noise_level: 0.1,
            utterance_len: 1600,
            counts: SplitCounts {
                train: 3,
                validation: 1,
                test: 1,
            },
            seed: 5,
            interference: vec![],
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_synthetic(&spec, d1.path()).unwrap();
        generate_synthetic(&spec, d2.path()).unwrap();
        for entry in m1.train.iter().chain(&m1.validation).chain(&m1.test) {
            let rel = entry.path.strip_prefix(d1.path()).unwrap();
            let b1 = fs::read(&entry.path).unwrap();
            let b2 = fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn zero_noise_makes_identical_utterances() {
        let spec = SynthSpec {
            classes: vec![ToneClass {
                name: "x".into(),
                base_freq: 500.0,
                chirp_rate: 0.0,
                envelope: Envelope::Flat,
            }],
            noise_level: 0.0,
            utterance_len: 800,
            counts: SplitCounts {
                train: 2,
                validation: 0,
                test: 0,
            },
            seed: 1,
            interference: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&spec, dir.path()).unwrap();
        let a = fs::read(&m.train[0].path).unwrap();
        let b = fs::read(&m.train[1].path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distant_tones_separate_under_a_centroid_oracle() {
        use crate::dsp::{MelConfig, MelFrontEnd};
        let spec = SynthSpec {
            classes: vec![
                ToneClass {
                    name: "lo".into(),
                    base_freq: 500.0,
                    chirp_rate: 0.0,
                    envelope: Envelope::Flat,
                },
                ToneClass {
                    name: "hi".into(),
                    base_freq: 2000.0,
                    chirp_rate: 0.0,
                    envelope: Envelope::Flat,
                },
            ],
            noise_level: 0.01,
            utterance_len: 4000,
            counts: SplitCounts {
                train: 6,
                validation: 0,
                test: 6,
            },
            seed: 9,
            interference: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&spec, dir.path()).unwrap();
        let fe = MelFrontEnd::new(MelConfig::default()).unwrap();

        let featurize = |entries: &[Entry]| -> Vec<(Vec<f32>, usize)> {
            entries
                .iter()
                .map(|e| {
                    let mel = fe.compute(&load_wav(&e.path).unwrap()).unwrap();
                    (mel.data().to_vec(), e.class)
                })
                .collect()
        };
        let train = featurize(&m.train);
        let dim = train[0].0.len();
        let mut centroids = vec![vec![0.0f64; dim]; 2];
        let mut counts = [0usize; 2];
        for (feat, class) in &train {
            counts[*class] += 1;
            for (c, &v) in centroids[*class].iter_mut().zip(feat) {
                *c += v as f64;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        for (feat, class) in featurize(&m.test) {
            let dist = |c: &[f64]| -> f64 {
                feat.iter()
                    .zip(c)
                    .map(|(&f, &c)| (f as f64 - c).powi(2))
                    .sum()
            };
            let pred = if dist(&centroids[0]) < dist(&centroids[1]) { 0 } else { 1 };
            assert_eq!(pred, class);
        }
    }
}
