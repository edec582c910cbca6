//! Run configuration: defaults, then a flat `key = value` file, then overrides.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::TrainConfig;
use crate::graph::Schema;
use crate::walk::WalkParams;
use crate::worker::DEFAULT_BUDGET_BYTES;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { origin: String, key: String },
    #[error("{origin}: bad value `{value}` for `{key}`: {message}")]
    BadValue {
        origin: String,
        key: String,
        value: String,
        message: String,
    },
    #[error("{origin}: expected `key = value`, got `{line}`")]
    Syntax { origin: String, line: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub graph: PathBuf,
    pub schema: Schema,
    pub undirected: bool,
    pub walk: WalkParams,
    pub train: TrainConfig,
    pub dim: usize,
    pub workers: usize,
    /// Minimum servers per vertex type; the planner adds more if capacity demands.
    pub servers_per_type: usize,
    pub server_capacity: u64,
    pub budget_bytes: u64,
    pub epochs: u32,
    pub eval_cadence: u64,
    pub train_ratio: f64,
    pub threshold: f64,
    pub out: PathBuf,
    pub seed: u64,
    /// Seed of the held-out split; defaults to `seed` so sweeps can share one split.
    pub split_seed: Option<u64>,
    pub shuffle: bool,
    pub max_attempts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            graph: PathBuf::new(),
            schema: Schema::Untyped,
            undirected: true,
            walk: WalkParams::default(),
            train: TrainConfig::default(),
            dim: 16,
            workers: 1,
            servers_per_type: 1,
            server_capacity: 1 << 30,
            budget_bytes: DEFAULT_BUDGET_BYTES,
            epochs: 1,
            eval_cadence: 100,
            train_ratio: 0.9,
            threshold: 0.5,
            out: PathBuf::from("out"),
            seed: 0,
            split_seed: None,
            shuffle: false,
            max_attempts: 100,
        }
    }
}

fn parse<T: FromStr>(origin: &str, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        origin: origin.to_string(),
        key: key.to_string(),
        value: value.to_string(),
        message: e.to_string(),
    })
}

fn parse_bool(origin: &str, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            origin: origin.to_string(),
            key: key.to_string(),
            value: value.to_string(),
            message: "expected true or false".into(),
        }),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "graph",
        "schema",
        "undirected",
        "walks_per_vertex",
        "walk_length",
        "context_window",
        "learning_rate",
        "batch_size",
        "n_steps",
        "metric",
        "negatives",
        "dim",
        "workers",
        "servers_per_type",
        "server_capacity",
        "budget_bytes",
        "epochs",
        "eval_cadence",
        "train_ratio",
        "threshold",
        "out",
        "seed",
        "split_seed",
        "shuffle",
        "max_attempts",
    ];

    /// Apply one setting. `origin` names the source in error messages.
    pub fn set(&mut self, origin: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key.trim() {
            "graph" => self.graph = PathBuf::from(value),
            "schema" => self.schema = parse(origin, key, value)?,
            "undirected" => self.undirected = parse_bool(origin, key, value)?,
            "walks_per_vertex" => self.walk.walks_per_vertex = parse(origin, key, value)?,
            "walk_length" => self.walk.walk_length = parse(origin, key, value)?,
            "context_window" => self.walk.context_window = parse(origin, key, value)?,
            "learning_rate" | "lr" => self.train.learning_rate = parse(origin, key, value)?,
            "batch_size" => self.train.batch_size = parse(origin, key, value)?,
            "n_steps" => self.train.n_steps = parse(origin, key, value)?,
            "metric" => self.train.metric = parse(origin, key, value)?,
            "negatives" => self.train.negatives = parse(origin, key, value)?,
            "dim" => self.dim = parse(origin, key, value)?,
            "workers" => self.workers = parse(origin, key, value)?,
            "servers_per_type" => self.servers_per_type = parse(origin, key, value)?,
            "server_capacity" => self.server_capacity = parse(origin, key, value)?,
            "budget_bytes" => self.budget_bytes = parse(origin, key, value)?,
            "epochs" => self.epochs = parse(origin, key, value)?,
            "eval_cadence" => self.eval_cadence = parse(origin, key, value)?,
            "train_ratio" => self.train_ratio = parse(origin, key, value)?,
            "threshold" => self.threshold = parse(origin, key, value)?,
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = parse(origin, key, value)?,
            "split_seed" => self.split_seed = Some(parse(origin, key, value)?),
            "shuffle" => self.shuffle = parse_bool(origin, key, value)?,
            "max_attempts" => self.max_attempts = parse(origin, key, value)?,
            other => {
                return Err(ConfigError::UnknownKey {
                    origin: origin.to_string(),
                    key: other.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Apply every `key = value` line of `text`. `#` starts a comment.
    pub fn apply_text(&mut self, origin: &str, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: at.clone(),
                line: line.to_string(),
            })?;
            self.set(&at, k, v)?;
        }
        Ok(())
    }

    /// Apply a config file. Relative `graph` and `out` paths resolve against the file's directory.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let before = (self.graph.clone(), self.out.clone());
        self.apply_text(&path.display().to_string(), &text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if self.graph != before.0 && self.graph.is_relative() {
            self.graph = base.join(&self.graph);
        }
        if self.out != before.1 && self.out.is_relative() {
            self.out = base.join(&self.out);
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.servers_per_type == 0 {
            return bad("servers_per_type must be at least 1".into());
        }
        if self.eval_cadence == 0 {
            return bad("eval_cadence must be at least 1".into());
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad(format!("train_ratio must lie in (0, 1), got {}", self.train_ratio));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        self.train.validate().map_err(ConfigError::Invalid)?;
        self.walk.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !self.graph.as_os_str().is_empty() && !self.graph.exists() {
            return bad(format!("graph file {} does not exist", self.graph.display()));
        }
        Ok(())
    }

    /// One-line `key=value` echo used in CSV headers.
    pub fn summary(&self) -> String {
        format!(
            "workers={} dim={} lr={} batch_size={} n_steps={} negatives={} metric={} walks_per_vertex={} walk_length={} context_window={} epochs={} seed={} split_seed={} step=one completed batch summed over workers",
            self.workers,
            self.dim,
            self.train.learning_rate,
            self.train.batch_size,
            self.train.n_steps,
            self.train.negatives,
            self.train.metric,
            self.walk.walks_per_vertex,
            self.walk.walk_length,
            self.walk.context_window,
            self.epochs,
            self.seed,
            self.split_seed(),
        )
    }
}
