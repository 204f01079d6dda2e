//! JSON config file support.
//!
//! Every command resolves a setting as: command-line flag, then the
//! `--config` file, then the built-in default.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

use crate::UsageError;

pub const OUT_DIR_ENV: &str = "SIFTLAB_OUT_DIR";

/// Keys accepted in a `--config` file. Unknown keys are rejected.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub head_dim: Option<usize>,
    pub bytes_per_element: Option<usize>,

    // synthetic generation
    pub kind: Option<String>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub noise: Option<f64>,
    pub concentration: Option<f64>,
    pub tau: Option<f64>,
    pub query_scale: Option<f64>,

    // engines and sweeps
    pub engines: Option<Vec<String>>,
    pub taus: Option<Vec<f64>>,
    pub warmups: Option<Vec<usize>>,
    pub k_fractions: Option<Vec<f64>>,
    pub budgets: Option<Vec<f64>>,
    pub recent: Option<f64>,
    pub policy: Option<String>,
    pub renormalize: Option<bool>,
    pub sift_threshold: Option<f64>,
    pub skip_first: Option<usize>,
    pub from_step: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    /// Output directory: flag, config, `SIFTLAB_OUT_DIR`, then `.`.
    pub fn out_dir(&self, flag: Option<&PathBuf>) -> PathBuf {
        flag.cloned()
            .or_else(|| self.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Flag, then config value, then default.
pub fn pick<T: Clone>(flag: Option<T>, file: &Option<T>, default: T) -> T {
    flag.or_else(|| file.clone()).unwrap_or(default)
}

/// Flag, then config value; `None` when neither is set.
pub fn pick_opt<T: Clone>(flag: Option<T>, file: &Option<T>) -> Option<T> {
    flag.or_else(|| file.clone())
}

/// List flag (empty means unset), then config value.
pub fn pick_list<T: Clone>(flag: &[T], file: &Option<Vec<T>>) -> Option<Vec<T>> {
    if !flag.is_empty() {
        Some(flag.to_vec())
    } else {
        file.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let file = FileConfig {
            seed: Some(5),
            taus: Some(vec![0.5]),
            ..FileConfig::default()
        };
        assert_eq!(pick(Some(9), &file.seed, 0), 9);
        assert_eq!(pick(None, &file.seed, 0), 5);
        assert_eq!(pick(None, &None, 3), 3);
        assert_eq!(pick_list(&[0.25], &file.taus), Some(vec![0.25]));
        assert_eq!(pick_list(&[], &file.taus), Some(vec![0.5]));
        assert_eq!(pick_list::<f64>(&[], &None), None);
    }

    #[test]
    fn rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"sed": 1}"#).unwrap();
        let err = FileConfig::load(Some(&p)).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        fs::write(&p, r#"{"seed": 1, "taus": [0.5, 0.875]}"#).unwrap();
        let c = FileConfig::load(Some(&p)).unwrap();
        assert_eq!(c.taus, Some(vec![0.5, 0.875]));
    }

    #[test]
    fn out_dir_order() {
        let file = FileConfig {
            out_dir: Some("from-config".into()),
            ..FileConfig::default()
        };
        let flag = PathBuf::from("from-flag");
        assert_eq!(file.out_dir(Some(&flag)), flag);
        assert_eq!(file.out_dir(None), PathBuf::from("from-config"));
    }
}
