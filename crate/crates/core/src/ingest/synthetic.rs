//! Seeded synthetic datasets with a hidden linear teacher.
//!
//! Features are standard normal draws; label `c` is positive iff
//! `w_c · x + b_c > 0` for teacher weights `w_c` (sparse, seeded) and bias
//! `b_c`. Videos with no positive label are resampled, and feature noise is
//! added only after labeling, so a linear model can provably fit the data.
//!
//! Determinism contract: the teacher is a pure function of
//! `(seed, num_classes, dims, teacher_sparsity)` and every video draws from
//! its own stream keyed by `(seed, index)`. Generation is therefore a pure
//! function of the config, and a longer dataset extends a shorter one with
//! the same config prefix-for-prefix.

use crate::datamodel::{DatasetSchema, Example, FeatureVector};
use crate::rng::{derive, fnv1a, SplitMix64};

use super::IngestError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_videos: u64,
    pub num_classes: u32,
    pub rgb_dim: usize,
    pub audio_dim: usize,
    pub seed: u64,
    /// Fraction of teacher weights that are nonzero, in (0, 1].
    pub teacher_sparsity: f64,
    /// Standard deviation of feature noise added after labeling; 0 disables.
    pub noise_std: f64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let fail = |detail: &str| Err(IngestError::InvalidConfig(detail.to_string()));
        if self.num_classes == 0 {
            return fail("num_classes must be positive");
        }
        if self.rgb_dim + self.audio_dim == 0 {
            return fail("feature dimension must be positive");
        }
        if !(self.teacher_sparsity > 0.0 && self.teacher_sparsity <= 1.0) {
            return fail("teacher_sparsity must lie in (0, 1]");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema::new(self.num_classes, self.rgb_dim, self.audio_dim)
    }

    pub fn iter(&self) -> SyntheticIter {
        SyntheticIter {
            cfg: *self,
            teacher: LinearTeacher::for_config(self),
            next: 0,
        }
    }
}

/// The hidden labeling function: one weight row and bias per class.
pub struct LinearTeacher {
    weights: Vec<f64>,
    biases: Vec<f64>,
    dim: usize,
}

impl LinearTeacher {
    pub fn for_config(cfg: &SyntheticConfig) -> Self {
        let dim = cfg.rgb_dim + cfg.audio_dim;
        let classes = cfg.num_classes as usize;
        let mut weights = Vec::with_capacity(classes * dim);
        let mut biases = Vec::with_capacity(classes);
        let teacher_tag = fnv1a(b"teacher");
        for c in 0..classes {
            let mut rng = SplitMix64::new(derive(cfg.seed, teacher_tag.wrapping_add(c as u64)));
            let row_start = weights.len();
            // Draw the gate and the value unconditionally so the stream
            // consumed per dimension is independent of the sparsity mask.
            for _ in 0..dim {
                let gate = rng.next_f64();
                let value = rng.next_normal();
                weights.push(if gate < cfg.teacher_sparsity {
                    value
                } else {
                    0.0
                });
            }
            let row = &mut weights[row_start..];
            if row.iter().all(|&w| w == 0.0) {
                // An all-zero row would pin the class to one side of the
                // threshold for every video; force a single live weight.
                row[0] = rng.next_normal();
            }
            let norm = row.iter().map(|w| w * w).sum::<f64>().sqrt();
            // Bias scaled to the row norm keeps per-class positive rates
            // away from 0 and 1.
            biases.push(0.5 * norm * rng.next_normal());
        }
        LinearTeacher {
            weights,
            biases,
            dim,
        }
    }

    pub fn score(&self, class: usize, x: &[f64]) -> f64 {
        let row = &self.weights[class * self.dim..(class + 1) * self.dim];
        row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[class]
    }

    pub fn num_classes(&self) -> usize {
        self.biases.len()
    }
}

pub struct SyntheticIter {
    cfg: SyntheticConfig,
    teacher: LinearTeacher,
    next: u64,
}

impl SyntheticIter {
    fn generate(&self, index: u64) -> Example {
        let cfg = &self.cfg;
        let dim = cfg.rgb_dim + cfg.audio_dim;
        let mut rng = SplitMix64::new(derive(cfg.seed, fnv1a(b"video").wrapping_add(index)));
        let mut x = vec![0.0f64; dim];
        let mut labels = std::collections::BTreeSet::new();
        loop {
            for v in x.iter_mut() {
                *v = rng.next_normal();
            }
            labels.clear();
            for c in 0..self.teacher.num_classes() {
                if self.teacher.score(c, &x) > 0.0 {
                    labels.insert(c as u32);
                }
            }
            if !labels.is_empty() {
                break;
            }
        }
        if cfg.noise_std > 0.0 {
            for v in x.iter_mut() {
                *v += cfg.noise_std * rng.next_normal();
            }
        }
        let rgb = x[..cfg.rgb_dim].iter().map(|&v| v as f32).collect();
        let audio = x[cfg.rgb_dim..].iter().map(|&v| v as f32).collect();
        Example {
            video_id: format!("syn{index:08}"),
            labels,
            features: FeatureVector { rgb, audio },
        }
    }
}

impl Iterator for SyntheticIter {
    type Item = Example;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.cfg.num_videos {
            return None;
        }
        let ex = self.generate(self.next);
        self.next += 1;
        Some(ex)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::validate_example;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            num_videos: 50,
            num_classes: 8,
            rgb_dim: 12,
            audio_dim: 4,
            seed: 7,
            teacher_sparsity: 0.5,
            noise_std: 0.1,
        }
    }

    #[test]
    fn identical_config_identical_dataset() {
        let a: Vec<Example> = small_cfg().iter().collect();
        let b: Vec<Example> = small_cfg().iter().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_videos_is_empty() {
        let cfg = SyntheticConfig {
            num_videos: 0,
            ..small_cfg()
        };
        assert_eq!(cfg.iter().count(), 0);
    }

    #[test]
    fn longer_run_extends_shorter_run() {
        let short: Vec<Example> = small_cfg().iter().collect();
        let long: Vec<Example> = SyntheticConfig {
            num_videos: 80,
            ..small_cfg()
        }
        .iter()
        .collect();
        assert_eq!(&long[..50], &short[..]);
    }

    #[test]
    fn every_video_is_valid_and_labeled() {
        let cfg = small_cfg();
        let schema = cfg.schema();
        for ex in cfg.iter() {
            validate_example(&ex, &schema).unwrap();
            assert!(!ex.labels.is_empty());
        }
    }

    #[test]
    fn per_class_positive_rates_stay_in_band() {
        let cfg = SyntheticConfig {
            num_videos: 1000,
            num_classes: 25,
            rgb_dim: 64,
            audio_dim: 16,
            seed: 1,
            teacher_sparsity: 0.3,
            noise_std: 0.1,
        };
        let mut counts = vec![0u32; 25];
        for ex in cfg.iter() {
            for &label in &ex.labels {
                counts[label as usize] += 1;
            }
        }
        for (class, &count) in counts.iter().enumerate() {
            let rate = f64::from(count) / 1000.0;
            assert!(
                rate > 0.05 && rate < 0.95,
                "class {class} positive rate {rate} outside (0.05, 0.95)"
            );
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SyntheticConfig {
            num_classes: 0,
            ..small_cfg()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            rgb_dim: 0,
            audio_dim: 0,
            ..small_cfg()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            teacher_sparsity: 0.0,
            ..small_cfg()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            teacher_sparsity: 1.5,
            ..small_cfg()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            noise_std: -0.1,
            ..small_cfg()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            noise_std: f64::NAN,
            ..small_cfg()
        }
        .validate()
        .is_err());
        assert!(small_cfg().validate().is_ok());
        assert!(SyntheticConfig {
            num_videos: 0,
            ..small_cfg()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn ids_are_zero_padded_and_ordered() {
        let ids: Vec<String> = small_cfg().iter().map(|ex| ex.video_id).collect();
        assert_eq!(ids[0], "syn00000000");
        assert_eq!(ids[49], "syn00000049");
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }
}
