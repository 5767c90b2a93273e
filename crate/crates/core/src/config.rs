//! `key = value` run configuration with `small`/`large` presets.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::char_encoding::CWConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Small,
    Large,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(Self::Small),
            "large" => Ok(Self::Large),
            other => Err(format!("unknown preset `{other}` (small|large)")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Small => "small",
            Self::Large => "large",
        })
    }
}

impl Preset {
    pub fn train_config(self) -> TrainConfig {
        match self {
            Self::Small => TrainConfig::small(),
            Self::Large => TrainConfig::large(),
        }
    }
}

/// Where a setting came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override(String),
    Default,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Line(n) => write!(f, "line {n}"),
            Self::Override(text) => write!(f, "override `{text}`"),
            Self::Default => f.write_str("defaults"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{origin}: expected `key = value`")]
    Syntax { origin: Origin },
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { origin: Origin, key: String },
    #[error("{origin}: cannot parse `{value}` for `{key}`: {msg}")]
    BadValue {
        origin: Origin,
        key: String,
        value: String,
        msg: String,
    },
    #[error("{origin}: {msg}")]
    Constraint { origin: Origin, msg: String },
}

/// A fully resolved run: training recipe, character setup and data locations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub cw: CWConfig,
    pub vocab_size: usize,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_preset(Preset::Small)
    }
}

pub const KEYS: &[&str] = &[
    "preset",
    "hidden",
    "layers",
    "batch_size",
    "unroll",
    "keep_prob",
    "init_range",
    "flat_epochs",
    "lr_decay",
    "total_epochs",
    "clip",
    "seed",
    "vocab_size",
    "n_chars",
    "char_emb",
    "char_order",
    "shared_weights",
    "use_oov_surfaces",
    "random_control",
    "random_max_len",
    "train",
    "valid",
    "test",
    "out",
];

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            preset,
            train: preset.train_config(),
            cw: CWConfig::word_level(),
            vocab_size: 10_000,
            train_path: None,
            valid_path: None,
            test_path: None,
            out: None,
        }
    }

    /// Apply one setting. `preset` rebases every recipe field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        let cw = &mut self.cw;
        match key {
            "preset" => {
                let p: Preset = value.parse()?;
                self.preset = p;
                self.train = TrainConfig {
                    seed: self.train.seed,
                    ..p.train_config()
                };
            }
            "hidden" => t.hidden = parse_num(value)?,
            "layers" => t.layers = parse_num(value)?,
            "batch_size" => t.batch_size = parse_num(value)?,
            "unroll" => t.unroll = parse_num(value)?,
            "keep_prob" => t.keep_prob = parse_num(value)?,
            "init_range" => t.init_range = parse_num(value)?,
            "flat_epochs" => t.flat_epochs = parse_num(value)?,
            "lr_decay" => t.lr_decay = parse_num(value)?,
            "total_epochs" => t.total_epochs = parse_num(value)?,
            "clip" => t.clip = parse_num(value)?,
            "seed" => t.seed = parse_num(value)?,
            "vocab_size" => self.vocab_size = parse_num(value)?,
            "n_chars" => cw.n_chars = parse_num(value)?,
            "char_emb" => cw.char_emb = parse_num(value)?,
            "char_order" => cw.order = value.parse()?,
            "shared_weights" => cw.shared_weights = parse_bool(value)?,
            "use_oov_surfaces" => cw.use_oov_surfaces = parse_bool(value)?,
            "random_control" => cw.random_control = parse_bool(value)?,
            "random_max_len" => cw.random_max_len = parse_num(value)?,
            "train" => self.train_path = Some(value.into()),
            "valid" => self.valid_path = Some(value.into()),
            "test" => self.test_path = Some(value.into()),
            "out" => self.out = Some(value.into()),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Range and architecture constraints. Errors name the offending key.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let t = &self.train;
        let positive = [
            ("hidden", t.hidden),
            ("layers", t.layers),
            ("batch_size", t.batch_size),
            ("unroll", t.unroll),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err((key, format!("{key} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(("vocab_size", "vocab_size must be at least 2".into()));
        }
        if !(t.keep_prob > 0.0 && t.keep_prob <= 1.0) {
            return Err(("keep_prob", format!("keep_prob {} must lie in (0, 1]", t.keep_prob)));
        }
        if !(t.lr_decay > 0.0 && t.lr_decay < 1.0) {
            return Err(("lr_decay", format!("lr_decay {} must lie in (0, 1)", t.lr_decay)));
        }
        if t.init_range.is_nan() || t.init_range <= 0.0 {
            return Err(("init_range", "init_range must be positive".into()));
        }
        if t.clip.is_nan() || t.clip <= 0.0 {
            return Err(("clip", "clip must be positive".into()));
        }
        self.cw
            .check(t.hidden)
            .map_err(|e| ("n_chars", e.to_string()))
    }

    /// Every setting as `key = value` lines; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let cw = &self.cw;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("preset", self.preset.to_string());
        kv("hidden", t.hidden.to_string());
        kv("layers", t.layers.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("unroll", t.unroll.to_string());
        kv("keep_prob", t.keep_prob.to_string());
        kv("init_range", t.init_range.to_string());
        kv("flat_epochs", t.flat_epochs.to_string());
        kv("lr_decay", t.lr_decay.to_string());
        kv("total_epochs", t.total_epochs.to_string());
        kv("clip", t.clip.to_string());
        kv("seed", t.seed.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("n_chars", cw.n_chars.to_string());
        kv("char_emb", cw.char_emb.to_string());
        kv("char_order", cw.order.to_string());
        kv("shared_weights", cw.shared_weights.to_string());
        kv("use_oov_surfaces", cw.use_oov_surfaces.to_string());
        kv("random_control", cw.random_control.to_string());
        kv("random_max_len", cw.random_max_len.to_string());
        let paths = [
            ("train", &self.train_path),
            ("valid", &self.valid_path),
            ("test", &self.test_path),
            ("out", &self.out),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        out
    }
}

/// Split `key = value` (or `key=value`); `#` starts a comment.
fn split_entry(raw: &str) -> Option<Option<(String, String)>> {
    let line = raw.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Some(None);
    }
    let (k, v) = line.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || v.is_empty() {
        return None;
    }
    Some(Some((k.to_string(), v.to_string())))
}

/// Parse a config file and apply `key=value` overrides after it.
///
/// The preset (last one given, overrides winning over the file) is expanded
/// first; every other setting then applies in order, file before overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut entries: Vec<(Origin, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let origin = Origin::Line(i + 1);
        match split_entry(raw) {
            None => return Err(ConfigError::Syntax { origin }),
            Some(None) => {}
            Some(Some((k, v))) => entries.push((origin, k, v)),
        }
    }
    for o in overrides {
        let origin = Origin::Override(o.clone());
        match split_entry(o) {
            Some(Some((k, v))) => entries.push((origin, k, v)),
            _ => return Err(ConfigError::Syntax { origin }),
        }
    }
    for (origin, key, _) in &entries {
        if !KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey {
                origin: origin.clone(),
                key: key.clone(),
            });
        }
    }

    let mut cfg = RunConfig::default();
    let mut last: HashMap<&str, Origin> = HashMap::new();
    let preset = entries.iter().rev().find(|e| e.1 == "preset");
    let ordered = preset.into_iter().chain(entries.iter().filter(|e| e.1 != "preset"));
    for (origin, key, value) in ordered {
        cfg.set(key, value).map_err(|msg| ConfigError::BadValue {
            origin: origin.clone(),
            key: key.clone(),
            value: value.clone(),
            msg,
        })?;
        let k = KEYS.iter().find(|k| **k == key).expect("checked above");
        last.insert(k, origin.clone());
    }

    cfg.validate().map_err(|(key, msg)| {
        // Blame the latest setting among the keys that feed the check.
        let related: &[&str] = match key {
            "n_chars" => &["n_chars", "char_emb", "char_order", "hidden", "preset"],
            other => std::slice::from_ref(KEYS.iter().find(|k| **k == other).expect("known key")),
        };
        let origin = entries
            .iter()
            .rev()
            .find(|e| related.contains(&e.1.as_str()))
            .map(|e| e.0.clone())
            .unwrap_or(Origin::Default);
        ConfigError::Constraint { origin, msg }
    })?;
    Ok(cfg)
}
