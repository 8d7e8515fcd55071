//! Flat `key = value` training configuration files.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! learning_rate = 0.001
//! split_mode = engine
//! ```
//!
//! Keys are the `TrainConfig` field names. Blank lines and `#` comments are
//! ignored; a key may appear once.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use rulkit_core::trainer::{SplitMode, TrainConfig};

pub const KEYS: [&str; 13] = [
    "learning_rate",
    "clipnorm",
    "batch_size",
    "max_epochs",
    "early_stop_patience",
    "lr_factor",
    "lr_patience",
    "min_learning_rate",
    "min_delta",
    "l2_lambda",
    "val_fraction",
    "seed",
    "split_mode",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("invalid value {value:?} for {key}: {e}"))
}

pub fn set(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "learning_rate" => config.learning_rate = parse(key, value)?,
        "clipnorm" => config.clipnorm = parse(key, value)?,
        "batch_size" => config.batch_size = parse(key, value)?,
        "max_epochs" => config.max_epochs = parse(key, value)?,
        "early_stop_patience" => config.early_stop_patience = parse(key, value)?,
        "lr_factor" => config.lr_factor = parse(key, value)?,
        "lr_patience" => config.lr_patience = parse(key, value)?,
        "min_learning_rate" => config.min_learning_rate = parse(key, value)?,
        "min_delta" => config.min_delta = parse(key, value)?,
        "l2_lambda" => config.l2_lambda = parse(key, value)?,
        "val_fraction" => config.val_fraction = parse(key, value)?,
        "seed" => config.seed = parse(key, value)?,
        "split_mode" => config.split_mode = parse::<SplitMode>(key, value)?,
        _ => bail!("unknown key {key:?}; expected one of {}", KEYS.join(", ")),
    }
    Ok(())
}

/// Applies every entry of `text` on top of `config`.
pub fn apply_str(config: &mut TrainConfig, text: &str, origin: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{origin}:{}: expected `key = value`", n + 1);
        };
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            bail!("{origin}:{}: duplicate key {key:?}", n + 1);
        }
        set(config, key, value).with_context(|| format!("{origin}:{}", n + 1))?;
    }
    Ok(())
}

pub fn apply_file(config: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    apply_str(config, &text, &path.display().to_string())
}
