//! Flat `key = value` run configuration.
//!
//! Values come from three layers, later ones winning: built-in defaults, an
//! optional config file, command-line flags. Keys are dotted (`net.block`,
//! `train.steps`); a file may hold keys for several subcommands, but a key
//! no subcommand knows is an error.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use harmlab::btrank::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use harmlab::generator::UNetConfig;
use harmlab::synthdata::{GenConfig, ShapeKind};
use harmlab::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

#[derive(Debug)]
pub enum ConfigError {
    /// Bad flag value: a usage error.
    Usage(String),
    /// Unreadable or malformed config file, or a bad value in it.
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Usage(m) | ConfigError::Invalid(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Every recognised key.
pub const KEYS: &[&str] = &[
    "data.out",
    "data.seed",
    "data.count",
    "data.first_index",
    "data.size",
    "data.min_objects",
    "data.max_objects",
    "data.shapes",
    "data.gain",
    "data.bias",
    "data.gamma",
    "data.fg_ratio",
    "net.size",
    "net.stages",
    "net.base_channels",
    "net.block",
    "net.residual",
    "train.data",
    "train.val_data",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.lr_decay",
    "train.milestones",
    "train.seed",
    "train.out",
    "train.loss_log",
    "eval.data",
    "eval.ckpt",
    "eval.report",
    "eval.summary",
    "harmonize.ckpt",
    "harmonize.comp",
    "harmonize.mask",
    "harmonize.sem",
    "harmonize.out",
    "gradcheck.tol",
    "gradcheck.instances",
    "bt.pairs",
    "bt.tol",
    "bt.max_iter",
];

fn pair((a, b): (f64, f64)) -> String {
    format!("{a},{b}")
}

/// Library defaults as text; an empty string means "unset".
fn default_of(key: &str) -> Option<String> {
    let g = GenConfig::default();
    let n = UNetConfig::default();
    let t = TrainConfig::default();
    let v = match key {
        "data.seed" => g.seed.to_string(),
        "data.count" => "16".into(),
        "data.first_index" => "0".into(),
        "data.size" => g.size.to_string(),
        "data.min_objects" => g.min_objects.to_string(),
        "data.max_objects" => g.max_objects.to_string(),
        "data.shapes" => g
            .shapes
            .iter()
            .map(|s| shape_name(*s))
            .collect::<Vec<_>>()
            .join(","),
        "data.gain" => pair(g.gain),
        "data.bias" => pair(g.bias),
        "data.gamma" => pair(g.gamma),
        "data.fg_ratio" => pair(g.fg_ratio),
        "net.stages" => n.stages.to_string(),
        "net.base_channels" => n.base_channels.to_string(),
        "net.block" => n.block.to_string(),
        "net.residual" => n.residual.to_string(),
        "train.steps" => t.steps.to_string(),
        "train.batch_size" => t.batch_size.to_string(),
        "train.lr" => t.lr.to_string(),
        "train.lr_decay" => t.lr_decay.to_string(),
        "train.milestones" => t
            .milestones
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(","),
        "train.seed" => t.seed.to_string(),
        "gradcheck.tol" => "1e-4".into(),
        "gradcheck.instances" => "100".into(),
        "bt.tol" => DEFAULT_TOL.to_string(),
        "bt.max_iter" => DEFAULT_MAX_ITER.to_string(),
        k if KEYS.contains(&k) => String::new(),
        _ => return None,
    };
    Some(v)
}

pub fn shape_name(s: ShapeKind) -> &'static str {
    match s {
        ShapeKind::Rectangle => "rectangle",
        ShapeKind::Ellipse => "ellipse",
    }
}

pub fn parse_shape(s: &str) -> Result<ShapeKind, String> {
    match s {
        "rectangle" => Ok(ShapeKind::Rectangle),
        "ellipse" => Ok(ShapeKind::Ellipse),
        _ => Err(format!("unknown shape {s:?}")),
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, (String, Source)>,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_file_text(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| ConfigError::Invalid(format!("{origin}:{}: {m}", n + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, found {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if default_of(k).is_none() {
                return Err(bad(format!("unknown key {k:?}")));
            }
            cfg.values
                .insert(k.to_string(), (v.to_string(), Source::File));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?;
                Self::parse_file_text(&text, &p.display().to_string())
            }
        }
    }

    /// Applies a flag if it was given.
    pub fn flag<T: ToString>(&mut self, key: &str, value: Option<T>) {
        debug_assert!(default_of(key).is_some(), "unregistered key {key}");
        if let Some(v) = value {
            self.values
                .insert(key.to_string(), (v.to_string(), Source::Flag));
        }
    }

    fn entry(&self, key: &str) -> (String, Source) {
        self.values.get(key).cloned().unwrap_or_else(|| {
            let d = default_of(key).unwrap_or_else(|| panic!("unregistered key {key}"));
            (d, Source::Default)
        })
    }

    fn error(key: &str, source: Source, msg: String) -> ConfigError {
        let m = format!("{key}: {msg}");
        match source {
            Source::Flag => ConfigError::Usage(m),
            _ => ConfigError::Invalid(m),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let (v, src) = self.entry(key);
        if v.is_empty() {
            // a missing required value is a usage problem wherever it came from
            return Err(ConfigError::Usage(format!("{key}: required but not set")));
        }
        v.parse()
            .map_err(|e| Self::error(key, src, format!("cannot parse {v:?}: {e}")))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        if self.entry(key).0.is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        self.get(key)
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let (v, src) = self.entry(key);
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Self::error(key, src, format!("cannot parse {s:?}: {e}")))
            })
            .collect()
    }

    pub fn range(&self, key: &str) -> Result<(f64, f64), ConfigError> {
        match self.list::<f64>(key)?[..] {
            [lo, hi] => Ok((lo, hi)),
            _ => Err(Self::error(
                key,
                self.entry(key).1,
                "expected `low,high`".into(),
            )),
        }
    }

    /// `key = value` lines for every key under the given prefixes, defaults
    /// included.
    pub fn resolved(&self, prefixes: &[&str]) -> Vec<String> {
        KEYS.iter()
            .filter(|k| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|k| format!("{k} = {}", self.entry(k).0))
            .collect()
    }
}
