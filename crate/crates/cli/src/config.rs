//! Optional TOML experiment file. Precedence everywhere is
//! command-line flag > config file > built-in default, so a config file
//! pins an experiment and flags give quick one-off overrides.

use std::error::Error;
use std::fs;
use std::path::Path;

use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub float32: Option<bool>,
    pub quiet: Option<bool>,
    #[serde(default)]
    pub gen_data: GenDataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub infer: InferSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataSection {
    pub videos: Option<u64>,
    pub skip: Option<u64>,
    pub classes: Option<u32>,
    pub rgb_dim: Option<usize>,
    pub audio_dim: Option<usize>,
    pub sparsity: Option<f64>,
    pub noise: Option<f64>,
    pub format: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub model: Option<String>,
    pub mixtures: Option<usize>,
    pub lr: Option<f64>,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub keep_prob: Option<f64>,
    pub batch: Option<usize>,
    pub steps: Option<u64>,
    pub eval_every: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    pub k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub rows: Option<usize>,
    pub k: Option<usize>,
    pub files: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, Box<dyn Error>> {
        // Keep the io::Error type so an unreadable file exits with the
        // I/O code, while a file that reads but fails to parse does not.
        let text = fs::read_to_string(path).map_err(|e| {
            std::io::Error::new(e.kind(), format!("config {}: {e}", path.display()))
        })?;
        let cfg: FileConfig =
            toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
        Ok(cfg)
    }
}

/// Resolve one setting: flag beats file beats default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn pick_opt<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_default() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick::<u32>(None, None, 3), 3);
    }

    #[test]
    fn full_file_parses() {
        let cfg: FileConfig = toml::from_str(
            r#"
            seed = 7
            threads = 2
            float32 = true

            [gen_data]
            videos = 500
            classes = 10

            [train]
            model = "moe"
            mixtures = 7
            lr = 5e-4

            [eval]
            k = 10

            [bench]
            rows = 1000
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.train.model.as_deref(), Some("moe"));
        assert_eq!(cfg.train.lr, Some(5e-4));
        assert_eq!(cfg.bench.rows, Some(1000));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("learning_rate = 0.1").is_err());
        assert!(toml::from_str::<FileConfig>("[train]\nlearningrate = 0.1").is_err());
    }
}
