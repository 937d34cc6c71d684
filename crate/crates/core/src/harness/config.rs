//! Run configuration and the flat `key = value` config file format.
//!
//! Blank lines and lines starting with `#` are ignored. Keys match the
//! command-line flags with `-` or `_` as separator.

use std::path::{Path, PathBuf};

use crate::error::{param_err, Error, Result};
use crate::harness::source::SourceKind;
use crate::pipeline::{Mode, PipelineConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub window: usize,
    pub warmup: usize,
    pub steps: usize,
    pub strength: f64,
    pub mode: Mode,
    pub style: usize,
    pub seed: u64,
    pub cond: bool,
    pub cache: bool,
    pub source: SourceKind,
    pub frames: usize,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub xt_row: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            window: p.window,
            warmup: p.warmup,
            steps: p.steps,
            strength: p.strength,
            mode: Mode::Live2Diff,
            style: p.style,
            seed: p.seed,
            cond: p.cond,
            cache: p.cache,
            source: SourceKind::DriftingSine,
            frames: 64,
            input: None,
            output: None,
            weights: None,
            xt_row: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            window: self.window,
            warmup: self.warmup,
            steps: self.steps,
            strength: self.strength,
            style: self.style,
            cond: self.cond,
            cache: self.cache,
            seed: self.seed,
        }
    }

    /// Apply one `key`/`value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "window" => self.window = parse(&key, value)?,
            "warmup" => self.warmup = parse(&key, value)?,
            "steps" => self.steps = parse(&key, value)?,
            "strength" => self.strength = parse(&key, value)?,
            "mode" => self.mode = value.parse()?,
            "style" => self.style = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "cond" => self.cond = parse_bool(&key, value)?,
            "no_cond" => self.cond = !parse_bool(&key, value)?,
            "kv_cache" | "cache" => self.cache = parse_bool(&key, value)?,
            "no_kv_cache" => self.cache = !parse_bool(&key, value)?,
            "source" => self.source = value.parse()?,
            "frames" => self.frames = parse(&key, value)?,
            "input" => self.input = Some(PathBuf::from(value)),
            "output" => self.output = Some(PathBuf::from(value)),
            "weights" => self.weights = Some(PathBuf::from(value)),
            "xt_row" => self.xt_row = parse(&key, value)?,
            other => return param_err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    /// Apply every setting of a config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Parameter(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parameter(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => param_err(format!("invalid boolean '{value}' for {key}")),
    }
}
