//! `key = value` configuration files.

use std::collections::HashMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::operator::{NlRoiConfig, Scaling};
use crate::toy::{TaskShape, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub n: usize,
    pub d: usize,
    pub d_f: usize,
    pub d_mid: usize,
    pub d_g: usize,
    pub h: usize,
    pub w: usize,
    pub k_classes: usize,
    pub attend_to_self: bool,
    pub scaling: Scaling,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub scenes_per_step: usize,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let op = NlRoiConfig::default();
        let train = TrainConfig::default();
        ConfigFile {
            n: 8,
            d: op.d,
            d_f: op.d_f,
            d_mid: op.d_mid,
            d_g: op.d_g,
            h: op.h,
            w: op.w,
            k_classes: 4,
            attend_to_self: op.attend_to_self,
            scaling: op.scaling,
            seed: train.seed,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            steps: train.steps,
            scenes_per_step: train.scenes_per_step,
        }
    }
}

impl ConfigFile {
    pub fn nlroi(&self) -> NlRoiConfig {
        NlRoiConfig {
            d: self.d,
            d_f: self.d_f,
            d_mid: self.d_mid,
            d_g: self.d_g,
            h: self.h,
            w: self.w,
            attend_to_self: self.attend_to_self,
            scaling: self.scaling,
            ..NlRoiConfig::default()
        }
    }

    pub fn task(&self) -> TaskShape {
        TaskShape::new(self.n, self.k_classes, self.d, self.h, self.w)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            steps: self.steps,
            scenes_per_step: self.scenes_per_step,
            seed: self.seed,
        }
    }
}

const KEYS: [&str; 16] = [
    "n",
    "d",
    "d_f",
    "d_mid",
    "d_g",
    "h",
    "w",
    "k_classes",
    "attend_to_self",
    "scaling",
    "seed",
    "learning_rate",
    "momentum",
    "weight_decay",
    "steps",
    "scenes_per_step",
];

/// Parses a configuration file. Missing keys take their defaults; `d_f`,
/// `d_mid` and `d_g` default to `max(1, d / 4)`.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut cfg = ConfigFile::default();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line, message };
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let key = *KEYS
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| err(format!("unknown key `{key}`")))?;
        if let Some(prev) = seen.insert(key, line) {
            return Err(err(format!("`{key}` already set on line {prev}")));
        }
        if value.is_empty() {
            return Err(err(format!("`{key}` has no value")));
        }

        fn num<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
            value.parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid value `{value}` for `{key}`"),
            })
        }
        fn size(key: &str, value: &str, line: usize) -> Result<usize> {
            let v: usize = num(key, value, line)?;
            if v == 0 {
                return Err(Error::Parse {
                    line,
                    message: format!("`{key}` must be at least 1"),
                });
            }
            Ok(v)
        }
        fn real(key: &str, value: &str, line: usize) -> Result<f64> {
            let v: f64 = num(key, value, line)?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parse {
                    line,
                    message: format!("`{key}` must be finite and non-negative"),
                });
            }
            Ok(v)
        }

        match key {
            "n" => cfg.n = size(key, value, line)?,
            "d" => cfg.d = size(key, value, line)?,
            "d_f" => cfg.d_f = size(key, value, line)?,
            "d_mid" => cfg.d_mid = size(key, value, line)?,
            "d_g" => cfg.d_g = size(key, value, line)?,
            "h" => cfg.h = size(key, value, line)?,
            "w" => cfg.w = size(key, value, line)?,
            "k_classes" => cfg.k_classes = num(key, value, line)?,
            "attend_to_self" => {
                cfg.attend_to_self = match value {
                    "true" => true,
                    "false" => false,
                    _ => {
                        return Err(err(format!(
                            "`attend_to_self` must be `true` or `false`, got `{value}`"
                        )))
                    }
                }
            }
            "scaling" => {
                cfg.scaling = match value {
                    "per_channel" => Scaling::PerChannel,
                    "full_flatten" => Scaling::FullFlatten,
                    _ => {
                        return Err(err(format!(
                            "`scaling` must be `per_channel` or `full_flatten`, got `{value}`"
                        )))
                    }
                }
            }
            "seed" => cfg.seed = num(key, value, line)?,
            "learning_rate" => cfg.learning_rate = real(key, value, line)?,
            "momentum" => cfg.momentum = real(key, value, line)?,
            "weight_decay" => cfg.weight_decay = real(key, value, line)?,
            "steps" => cfg.steps = num(key, value, line)?,
            "scenes_per_step" => cfg.scenes_per_step = size(key, value, line)?,
            _ => unreachable!("key list and match arms agree"),
        }
    }

    let quarter = (cfg.d / 4).max(1);
    for (key, slot) in [
        ("d_f", &mut cfg.d_f),
        ("d_mid", &mut cfg.d_mid),
        ("d_g", &mut cfg.d_g),
    ] {
        if !seen.contains_key(key) {
            *slot = quarter;
        }
    }

    // Cross-key checks report the line of the dependent key, or of `d` when
    // only the defaults are involved.
    let line_of = |keys: &[&str]| {
        keys.iter()
            .filter_map(|k| seen.get(k))
            .copied()
            .max()
            .unwrap_or(0)
    };
    let fail = |keys: &[&str], message: String| {
        Err(Error::Parse {
            line: line_of(keys),
            message,
        })
    };
    if cfg.d_f > cfg.d {
        return fail(
            &["d_f", "d"],
            format!("d_f ({}) must not exceed d ({})", cfg.d_f, cfg.d),
        );
    }
    if cfg.d_mid > cfg.d {
        return fail(
            &["d_mid", "d"],
            format!("d_mid ({}) must not exceed d ({})", cfg.d_mid, cfg.d),
        );
    }
    if cfg.k_classes < 2 || cfg.k_classes > cfg.d {
        return fail(
            &["k_classes", "d"],
            format!(
                "k_classes ({}) must lie in 2..=d ({})",
                cfg.k_classes, cfg.d
            ),
        );
    }
    if !cfg.attend_to_self && cfg.n < 2 {
        return fail(
            &["n", "attend_to_self"],
            "n must be at least 2 when attend_to_self = false".into(),
        );
    }
    if cfg.momentum >= 1.0 {
        return fail(&["momentum"], "momentum must be below 1".into());
    }
    Ok(cfg)
}
