use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use gcex::io::config::Config;

/// Run settings read from a config file plus `--set` overrides. Every value
/// read (or defaulted) is echoed into `resolved`.
pub struct Params {
    given: Config,
    pub resolved: Config,
}

fn fmt_list<T: Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Params {
    pub fn load(path: Option<&Path>, overrides: &[String], allowed: &[&str]) -> Result<Self> {
        let mut given = match path {
            Some(p) => {
                Config::load(p).with_context(|| format!("reading config {}", p.display()))?
            }
            None => Config::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got {o:?}"))?;
            given.set(k.trim(), v.trim());
        }
        given
            .check_keys(allowed)
            .map_err(|e| anyhow!("{e} (allowed: {})", allowed.join(", ")))?;
        Ok(Self {
            given,
            resolved: Config::new(),
        })
    }

    pub fn has(&self, key: &str) -> bool {
        self.given.get_raw(key).is_some()
    }

    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.given.get_or(key, default)?;
        self.resolved.set(key, &v);
        Ok(v)
    }

    pub fn opt<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v: Option<T> = self.given.get(key)?;
        if let Some(v) = &v {
            self.resolved.set(key, v);
        }
        Ok(v)
    }

    pub fn require<T>(&mut self, key: &str) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.opt(key)? {
            Some(v) => Ok(v),
            None => bail!("missing config key `{key}`"),
        }
    }

    pub fn list<T>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: FromStr + Display + Clone,
        T::Err: Display,
    {
        let v = self
            .given
            .get_list(key)?
            .unwrap_or_else(|| default.to_vec());
        self.resolved.set(key, fmt_list(&v));
        Ok(v)
    }

    pub fn require_list<T>(&mut self, key: &str) -> Result<Vec<T>>
    where
        T: FromStr + Display + Clone,
        T::Err: Display,
    {
        if !self.has(key) {
            bail!("missing config key `{key}`");
        }
        self.list(key, &[])
    }

    pub fn path(&mut self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require::<String>(key)?))
    }
}

/// Key groups shared by several subcommands.
pub mod keys {
    pub const DATA: &[&str] = &[
        "data",
        "images",
        "labels",
        "classes",
        "synth_kind",
        "synth_dim",
        "synth_rank",
        "synth_separation",
        "synth_n",
        "seed",
    ];
    pub const CLASSIFIER: &[&str] = &[
        "classifier",
        "classifier_checkpoint",
        "normal",
        "normal2",
        "steepness",
        "constant_probs",
    ];
    pub const EXPLAINER: &[&str] = &["backend", "gamma", "vae_hidden", "k", "l"];
    pub const TRAIN: &[&str] = &[
        "lambda",
        "n_alpha",
        "n_beta",
        "steps",
        "batch_size",
        "learning_rate",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "variant",
        "trace_every",
        "eval_n_alpha",
        "eval_n_beta",
    ];

    pub fn join(groups: &[&[&'static str]]) -> Vec<&'static str> {
        groups.iter().flat_map(|g| g.iter().copied()).collect()
    }
}
