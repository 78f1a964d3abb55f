//! Flat `key = value` run configuration.
//!
//! Values come from built-in defaults, then an optional config file, then the
//! output-directory environment override, then `--key=value` flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use curvl::alignment::LossMode;
use curvl::curriculum::OverflowPolicy;
use curvl::data::SyntheticSpec;
use curvl::training::TrainConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "CURVL_OUTPUT_DIR";

/// Every accepted key with its built-in default.
const DEFAULTS: &[(&str, &str)] = &[
    // paths
    ("train", ""),
    ("eval", ""),
    ("lexicon", ""),
    ("checkpoint", ""),
    ("output_dir", "."),
    // training
    ("phases", "4"),
    ("epochs_per_phase", "4"),
    ("batch_size", "32"),
    ("learning_rate", "0.005"),
    ("lr_step_factor", "0.1"),
    ("lr_step_fraction", "0.75"),
    ("loss_mode", "cp"),
    ("data_fraction", "1"),
    ("seed", "0"),
    ("curriculum", "true"),
    ("overflow", "drop"),
    ("embed_dim", "16"),
    ("seeds", "0,1,2"),
    // synthetic generation
    ("num_concepts", "12"),
    ("feature_dim", "32"),
    ("noise_sigma", "0.1"),
    ("scenes_per_phase", "800,700,500"),
    ("filler_vocab_size", "20"),
    ("eval_scenes", "500"),
    ("data_seed", "2024"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }
}

fn canonical_key(key: &str) -> Option<&'static str> {
    let key = key.trim().replace('-', "_");
    DEFAULTS.iter().map(|&(k, _)| k).find(|k| *k == key)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = canonical_key(key).ok_or_else(|| anyhow!("unknown configuration key {key:?}"))?;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key = value", origin.display(), n + 1))?;
            self.set(k, v)
                .with_context(|| format!("{}:{}", origin.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        self.apply_text(&text, path)
    }

    /// Builds the configuration for one invocation.
    ///
    /// `args` are `--key=value` overrides; `--config=PATH` names a file that
    /// is applied before any override regardless of position.
    pub fn resolve(args: &[String], env_output_dir: Option<String>) -> Result<Self> {
        let mut file = None;
        let mut overrides = Vec::new();
        for arg in args {
            let body = arg
                .strip_prefix("--")
                .ok_or_else(|| anyhow!("expected --key=value, got {arg:?}"))?;
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| anyhow!("expected --key=value, got {arg:?}"))?;
            if k == "config" {
                file = Some(PathBuf::from(v));
            } else {
                overrides.push((k, v));
            }
        }
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_file(&path)?;
        }
        if let Some(dir) = env_output_dir.filter(|d| !d.is_empty()) {
            cfg.set("output_dir", &dir)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("no default for {key}"))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse::<T>()
            .map_err(|e| anyhow!("invalid value {raw:?} for {key}: {e}"))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<T>()
                    .map_err(|e| anyhow!("invalid entry {s:?} in {key}: {e}"))
            })
            .collect()
    }

    /// A path-valued key; errors when it was never set.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        match self.raw(key) {
            "" => bail!("missing required setting {key} (use --{key}=PATH or a config file)"),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("output_dir"))
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        self.list("seeds")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            phases: self.parse("phases")?,
            epochs_per_phase: self.parse("epochs_per_phase")?,
            batch_size: self.parse("batch_size")?,
            learning_rate: self.parse("learning_rate")?,
            lr_step_factor: self.parse("lr_step_factor")?,
            lr_step_fraction: self.parse("lr_step_fraction")?,
            loss_mode: self.parse::<LossMode>("loss_mode")?,
            data_fraction: self.parse("data_fraction")?,
            seed: self.parse("seed")?,
            curriculum: self.parse("curriculum")?,
            overflow: self.parse::<OverflowPolicy>("overflow")?,
            embed_dim: self.parse("embed_dim")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let spec = SyntheticSpec {
            num_concepts: self.parse("num_concepts")?,
            feature_dim: self.parse("feature_dim")?,
            noise_sigma: self.parse("noise_sigma")?,
            scenes_per_phase: self.list("scenes_per_phase")?,
            filler_vocab_size: self.parse("filler_vocab_size")?,
            eval_scenes: self.parse("eval_scenes")?,
            seed: self.parse("data_seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}
