//! Flat key-value run configuration.
//!
//! The file format is one `key = value` pair per line, `#` comments, no
//! sections. Unknown keys are rejected so typos surface as config errors.
//! The digest covers the compute-relevant keys after overrides are applied;
//! the output directory and thread count never change results, so they stay
//! outside the digest.

use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

const KNOWN_KEYS: [&str; 20] = [
    "problem",
    "horizon",
    "n_t",
    "n_x",
    "control_const",
    "dtau",
    "max_steps",
    "stop_grad_norm",
    "stall_window",
    "stall_min_decrease",
    "armijo",
    "v_monotone_tol",
    "hjb_every",
    "incumbent_only_diag",
    "cfl_safety",
    "max_substeps_per_level",
    "mass_tolerance",
    "n_paths",
    "n_steps",
    "seed",
];
const NON_DIGEST_KEYS: [&str; 3] = ["out_dir", "threads", "criteria"];

/// Parsed configuration: raw pairs plus the derived digest.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pairs: BTreeMap<String, String>,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub criteria: Vec<usize>,
    pub digest: String,
}

impl RunConfig {
    pub fn load(
        path: &std::path::Path,
        out_override: Option<PathBuf>,
        seed_override: Option<u64>,
        threads_override: Option<usize>,
    ) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut pairs = BTreeMap::new();
        let mut out_dir = None;
        let mut threads = None;
        let mut criteria_raw = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            match key.as_str() {
                "out_dir" => out_dir = Some(PathBuf::from(&value)),
                "threads" => {
                    threads = Some(value.parse().map_err(|_| {
                        ConfigError(format!("key threads: `{value}` is not an integer"))
                    })?)
                }
                "criteria" => criteria_raw = Some(value),
                k if KNOWN_KEYS.contains(&k) => {
                    pairs.insert(key, value);
                }
                other => {
                    return Err(ConfigError(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        if let Some(seed) = seed_override {
            pairs.insert("seed".into(), seed.to_string());
        }
        // out-dir precedence: flag > environment override > config > default
        let out_dir = out_override
            .or_else(|| std::env::var_os("PGFLOW_OUT").map(PathBuf::from))
            .or(out_dir)
            .unwrap_or_else(|| PathBuf::from("pgflow-out"));
        let threads = threads_override.or(threads);
        let criteria = match criteria_raw.as_deref() {
            None | Some("all") => (1..=8).collect(),
            Some(list) => {
                let mut ids = Vec::new();
                for part in list.split(',') {
                    let id: usize = part.trim().parse().map_err(|_| {
                        ConfigError(format!("key criteria: `{part}` is not a criterion id"))
                    })?;
                    if !(1..=8).contains(&id) {
                        return Err(ConfigError(format!(
                            "key criteria: {id} outside the 1..=8 range"
                        )));
                    }
                    ids.push(id);
                }
                ids
            }
        };
        let digest =
            pgflow::digest::digest_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        for k in NON_DIGEST_KEYS {
            debug_assert!(!pairs.contains_key(k));
        }
        Ok(Self { pairs, out_dir, threads, criteria, digest })
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.pairs
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ConfigError(format!("missing required key `{key}`")))
    }

    pub fn get_parse<T: std::str::FromStr>(
        &self,
        key: &str,
        default: T,
    ) -> Result<T, ConfigError> {
        match self.pairs.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| ConfigError(format!("key {key}: cannot parse `{v}`"))),
        }
    }

    pub fn get_opt_parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.pairs.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError(format!("key {key}: cannot parse `{v}`"))),
        }
    }
}
