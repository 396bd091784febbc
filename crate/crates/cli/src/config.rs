//! `key = value` run configuration. Flags on the command line win over
//! anything set here.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendKind {
    Sim,
    Native,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(BackendKind::Sim),
            "native" => Ok(BackendKind::Native),
            other => Err(format!("expected `sim` or `native`, got `{other}`")),
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: usize,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.path.display())?;
        if self.line > 0 {
            write!(f, ":{}", self.line)?;
        }
        if let Some(field) = &self.field {
            write!(f, ": field `{field}`")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FileConfig {
    pub backend: Option<BackendKind>,
    pub sim_model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub repetitions: Option<u32>,
    pub threshold: Option<i64>,
    pub jobs: Option<usize>,
    pub samples: Option<usize>,
    pub iterations: Option<u32>,
    pub attack: Option<String>,
    pub cpu: Option<usize>,
}

fn parsed<T: FromStr>(value: &str) -> Result<Option<T>, String>
where
    T::Err: fmt::Display,
{
    value.parse().map(Some).map_err(|e: T::Err| e.to_string())
}

impl FileConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = FileConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |field: Option<&str>, message: String| ConfigError {
                path: path.to_path_buf(),
                line,
                field: field.map(str::to_string),
                message,
            };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| err(None, "expected `key = value`".into()))?;
            let key = key.trim();
            let value = value.trim();
            let value = value
                .strip_prefix('"')
                .and_then(|v| v.strip_suffix('"'))
                .unwrap_or(value);
            let field = Some(key);
            let r = match key {
                "backend" => parsed(value).map(|v| cfg.backend = v),
                "sim_model" => parsed(value).map(|v| cfg.sim_model = v),
                "corpus" => parsed(value).map(|v| cfg.corpus = v),
                "catalog" => parsed(value).map(|v| cfg.catalog = v),
                "seed" => parsed(value).map(|v| cfg.seed = v),
                "output_dir" => parsed(value).map(|v| cfg.output_dir = v),
                "repetitions" => parsed(value).map(|v| cfg.repetitions = v),
                "threshold" => parsed(value).map(|v| cfg.threshold = v),
                "jobs" => parsed(value).map(|v| cfg.jobs = v),
                "samples" => parsed(value).map(|v| cfg.samples = v),
                "iterations" => parsed(value).map(|v| cfg.iterations = v),
                "attack" => parsed(value).map(|v| cfg.attack = v),
                "cpu" => parsed(value).map(|v| cfg.cpu = v),
                _ => return Err(err(field, "unknown key".into())),
            };
            r.map_err(|m| err(field, m))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: 0,
            field: None,
            message: e.to_string(),
        })?;
        Self::parse(&text, path)
    }
}
