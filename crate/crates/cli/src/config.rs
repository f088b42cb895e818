//! Flat `key = value` settings. A config file supplies a base layer and
//! command-line flags override it key by key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Every key a config file may set.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "proposals",
    "embeddings",
    "annotations",
    "calibration",
    "tracks",
    "assignment",
    "counts",
    "tracker.iou_gate",
    "tracker.embedding_gate",
    "tracker.max_gap",
    "tracker.min_length",
    "tracker.confidence_threshold",
    "stats.duration_hours",
    "discover.method",
    "discover.k",
    "discover.min_cluster_size",
    "discover.min_samples",
    "discover.metric",
    "discover.include_known",
    "eval.known_categories",
    "eval.fractions",
    "eval.normalizer",
    "trainset.mode",
    "trainset.merge_riders",
    "trainset.max_distance",
    "trainset.stride",
    "trainset.scales",
    "trainset.ratios",
    "trainset.iou_min",
    "trainset.iou_max",
    "trainset.free_fraction_min",
    "trainset.max_negatives",
    "trainset.ground_eps",
    "trainset.max_height",
    "trainset.dump_mask",
];

/// Keys holding file paths; manifests record only their basenames.
pub const PATH_KEYS: &[&str] = &["proposals", "embeddings", "annotations", "calibration", "tracks", "assignment", "counts"];

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!("{origin}:{}: expected 'key = value', found '{line}'", i + 1)));
            };
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::Usage(format!("{origin}:{}: unknown key '{key}'", i + 1)));
            }
            cfg.values.insert(key.to_owned(), value.trim().to_owned());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Overrides `key` when the flag was given.
    pub fn set<T: ToString>(&mut self, key: &str, value: Option<T>) {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        if let Some(v) = value {
            self.values.insert(key.to_owned(), v.to_string());
        }
    }

    pub fn set_flag(&mut self, key: &str, on: bool) {
        if on {
            self.set(key, Some("true"));
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|s| s.parse::<T>().map_err(|e| CliError::Usage(format!("invalid value '{s}' for {key}: {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        self.get_or(key, false)
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let Some(s) = self.raw(key) else { return Ok(None) };
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|e| CliError::Usage(format!("invalid item '{p}' in {key}: {e}"))))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    /// A path the command cannot run without; `flag` names the option in
    /// the error message.
    pub fn require_path(&self, key: &str, flag: &str) -> Result<PathBuf, CliError> {
        self.path(key).ok_or_else(|| CliError::Usage(format!("missing input: pass {flag} or set '{key}' in the config")))
    }

    /// Settings as recorded in manifests: paths reduced to basenames so that
    /// reruns from another directory produce the same manifest.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.values
            .iter()
            .map(|(k, v)| {
                let v = if PATH_KEYS.contains(&k.as_str()) { basename(Path::new(v)) } else { v.clone() };
                (k.clone(), v)
            })
            .collect()
    }
}

pub fn basename(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}
