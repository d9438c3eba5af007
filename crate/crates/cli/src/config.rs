//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys outside [`KNOWN_KEYS`]
//! are rejected. Command-line flags are merged in as overrides before resolution.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use log::info;

/// Every key a run configuration may set, in snapshot order.
pub const KNOWN_KEYS: &[&str] = &[
    "data",
    "cifar",
    "blobs",
    "blobs_k",
    "blobs_dim",
    "blobs_n_per_cluster",
    "blobs_center_scale",
    "blobs_sigma",
    "blobs_seed",
    "out",
    "clusters",
    "over_clusters",
    "hidden",
    "epochs",
    "batch_size",
    "tau",
    "repeat",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "sample_weight",
    "class_weight",
    "over_cluster_weight",
    "anchoring",
    "views",
    "standardize",
    "noise_sigma",
    "scale_lo",
    "scale_hi",
    "crop_padding",
    "flip_prob",
    "jitter_strength",
    "grayscale_prob",
    "affinity_batch",
];

#[derive(Debug, Default, Clone)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut kv = KeyValues::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(format!("line {}: unknown key `{key}`", n + 1));
            }
            if kv.entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(format!("line {}: duplicate key `{key}`", n + 1));
            }
        }
        Ok(kv)
    }

    /// Sets `key`, replacing any earlier value.
    pub fn set(&mut self, key: &str, value: impl Display) {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.remove(key);
    }
}

/// Typed view over [`KeyValues`] that records every resolved value for the snapshot.
pub struct Resolver {
    kv: KeyValues,
    resolved: BTreeMap<&'static str, String>,
}

impl Resolver {
    pub fn new(kv: KeyValues) -> Self {
        Resolver {
            kv,
            resolved: BTreeMap::new(),
        }
    }

    fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T, String>
    where
        T::Err: Display,
    {
        raw.parse()
            .map_err(|e| format!("key `{key}`: cannot parse `{raw}`: {e}"))
    }

    /// Value of `key`, or `default` with a logged notice.
    pub fn get<T: FromStr + Display>(&mut self, key: &'static str, default: T) -> Result<T, String>
    where
        T::Err: Display,
    {
        let value = match self.kv.entries.get(key) {
            Some(raw) => Self::parse(key, raw)?,
            None => {
                info!("{key} not set, using default {default}");
                default
            }
        };
        self.resolved.insert(key, value.to_string());
        Ok(value)
    }

    /// Value of `key` if present; absent keys are left out of the snapshot.
    pub fn optional<T: FromStr + Display>(&mut self, key: &'static str) -> Result<Option<T>, String>
    where
        T::Err: Display,
    {
        match self.kv.entries.get(key) {
            Some(raw) => {
                let value: T = Self::parse(key, raw)?;
                self.resolved.insert(key, value.to_string());
                Ok(Some(value))
            }
            None => Ok(None),
        }
    }

    /// Comma-separated list of counts; an empty value means an empty list.
    pub fn get_list(&mut self, key: &'static str, default: &[usize]) -> Result<Vec<usize>, String> {
        let list = match self.kv.entries.get(key) {
            Some(raw) => parse_list(raw).map_err(|e| format!("key `{key}`: {e}"))?,
            None => {
                info!("{key} not set, using default {}", join(default));
                default.to_vec()
            }
        };
        self.resolved.insert(key, join(&list));
        Ok(list)
    }

    /// Drops `key` from the snapshot.
    pub fn forget(&mut self, key: &str) {
        self.resolved.remove(key);
    }

    /// Resolved values as a config file that reproduces them.
    pub fn snapshot(&self) -> String {
        KNOWN_KEYS
            .iter()
            .filter_map(|k| self.resolved.get(k).map(|v| format!("{k} = {v}\n")))
            .collect()
    }
}

pub fn parse_list(raw: &str) -> Result<Vec<usize>, String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| format!("bad count `{s}`: {e}")))
        .collect()
}

fn join(list: &[usize]) -> String {
    list.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}
