//! Core domain types shared by every other module: per-video examples,
//! feature vectors, the label vocabulary, and top-k prediction lists.
//!
//! All types are immutable value objects once constructed and safe to
//! share across workers.

use std::collections::BTreeSet;

use thiserror::Error;

/// Number of classes in the default vocabulary.
pub const DEFAULT_NUM_CLASSES: u32 = 4800;
/// Default visual embedding width.
pub const DEFAULT_RGB_DIM: usize = 1024;
/// Default audio embedding width.
pub const DEFAULT_AUDIO_DIM: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("label {index} out of range for vocabulary of {num_classes} classes")]
    LabelOutOfRange { index: i64, num_classes: u32 },
    #[error("bad feature dimension: expected {expected}, got {got}")]
    BadDimension { expected: usize, got: usize },
    #[error("empty video id")]
    EmptyVideoId,
    #[error("video id {0:?} contains a comma or whitespace")]
    InvalidVideoId(String),
    #[error("non-finite feature value at index {0}")]
    NonFiniteFeature(usize),
    #[error("duplicate label {0} in prediction list")]
    DuplicateLabel(u32),
}

/// Label vocabulary: class indices are `0..num_classes`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub num_classes: u32,
}

impl Vocabulary {
    pub fn new(num_classes: u32) -> Self {
        assert!(num_classes >= 1, "vocabulary must have at least one class");
        Self { num_classes }
    }

    pub fn contains(&self, label: u32) -> bool {
        label < self.num_classes
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            num_classes: DEFAULT_NUM_CLASSES,
        }
    }
}

/// Vocabulary plus the feature widths a dataset was produced with.
/// Validation needs both: labels check against the vocabulary, feature
/// vectors against the widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSchema {
    pub vocab: Vocabulary,
    pub rgb_dim: usize,
    pub audio_dim: usize,
}

impl DatasetSchema {
    pub fn new(num_classes: u32, rgb_dim: usize, audio_dim: usize) -> Self {
        Self {
            vocab: Vocabulary::new(num_classes),
            rgb_dim,
            audio_dim,
        }
    }

    /// Width of the concatenated (visual ‖ audio) feature vector.
    pub fn feature_dim(&self) -> usize {
        self.rgb_dim + self.audio_dim
    }
}

impl Default for DatasetSchema {
    fn default() -> Self {
        Self {
            vocab: Vocabulary::default(),
            rgb_dim: DEFAULT_RGB_DIM,
            audio_dim: DEFAULT_AUDIO_DIM,
        }
    }
}

/// Mean-pooled per-video embeddings. Stored as `f32`, the precision the
/// on-disk formats carry; training upcasts at batch-assembly time.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub rgb: Vec<f32>,
    pub audio: Vec<f32>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.rgb.len() + self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenated (visual ‖ audio) values.
    pub fn concat(&self) -> impl Iterator<Item = f32> + '_ {
        self.rgb.iter().chain(self.audio.iter()).copied()
    }
}

/// One video: id, ground-truth label set, features.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub video_id: String,
    pub labels: BTreeSet<u32>,
    pub features: FeatureVector,
}

fn check_video_id(id: &str) -> Result<(), ValidationError> {
    if id.is_empty() {
        return Err(ValidationError::EmptyVideoId);
    }
    if id.contains(',') || id.chars().any(char::is_whitespace) {
        return Err(ValidationError::InvalidVideoId(id.to_string()));
    }
    Ok(())
}

/// Check every invariant of an [`Example`] against a schema. Pure and
/// deterministic.
pub fn validate_example(ex: &Example, schema: &DatasetSchema) -> Result<(), ValidationError> {
    check_video_id(&ex.video_id)?;
    for &label in &ex.labels {
        if !schema.vocab.contains(label) {
            return Err(ValidationError::LabelOutOfRange {
                index: label as i64,
                num_classes: schema.vocab.num_classes,
            });
        }
    }
    if ex.features.rgb.len() != schema.rgb_dim || ex.features.audio.len() != schema.audio_dim {
        return Err(ValidationError::BadDimension {
            expected: schema.feature_dim(),
            got: ex.features.len(),
        });
    }
    if let Some(pos) = ex.features.concat().position(|v| !v.is_finite()) {
        return Err(ValidationError::NonFiniteFeature(pos));
    }
    Ok(())
}

/// Per-video top-k predictions: `(label, confidence)` pairs in canonical
/// order (confidence descending, ties by ascending label).
///
/// Construction clamps confidences to `[0, 1]` (a NaN clamps to 0),
/// enforces label uniqueness and sorts into canonical order, so a list
/// in hand is always valid.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionList {
    video_id: String,
    pairs: Vec<(u32, f64)>,
}

impl PredictionList {
    pub fn new(
        video_id: impl Into<String>,
        mut pairs: Vec<(u32, f64)>,
    ) -> Result<Self, ValidationError> {
        let video_id = video_id.into();
        check_video_id(&video_id)?;
        for p in pairs.iter_mut() {
            p.1 = if p.1.is_nan() {
                0.0
            } else {
                p.1.clamp(0.0, 1.0)
            };
        }
        pairs.sort_unstable_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("clamped confidences compare")
                .then(a.0.cmp(&b.0))
        });
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(ValidationError::DuplicateLabel(w[0].0));
            }
        }
        Ok(Self { video_id, pairs })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn pairs(&self) -> &[(u32, f64)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Drop everything past the k strongest pairs.
    pub fn truncated(mut self, k: usize) -> Self {
        self.pairs.truncate(k);
        self
    }
}
