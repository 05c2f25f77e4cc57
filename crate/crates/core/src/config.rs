//! `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key must be known;
//! a typo is an error rather than a silently ignored setting.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};

/// Split text into `(key, value)` pairs, rejecting malformed lines and
/// duplicate keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", n + 1)));
        }
        if out.iter().any(|(key, _)| key == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub classes: usize,
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub extra_kernel: usize,
    pub offset_kernel: usize,

    pub batch_size: usize,
    pub momentum: f64,
    pub baseline_lr: f64,
    pub baseline_iterations: usize,
    pub expansion_lr: f64,
    pub expansion_iterations: usize,
    pub shrinkage_lr: f64,
    pub shrinkage_iterations: usize,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,

    pub no_es: bool,
    pub no_clip: bool,
    pub no_ss: bool,
    pub no_area: bool,

    pub scales: Vec<f64>,
    pub eval_tau: f64,
    pub freeze_check_every: usize,
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 3,
            widths: vec![32, 64, 128],
            feature_dim: 128,
            extra_kernel: 3,
            offset_kernel: 3,
            batch_size: 16,
            momentum: 0.9,
            baseline_lr: 0.01,
            baseline_iterations: 2000,
            expansion_lr: 0.0003,
            expansion_iterations: 2000,
            shrinkage_lr: 0.003,
            shrinkage_iterations: 2000,
            alpha: 0.01,
            beta: 0.15,
            gamma: 1.0,
            mu: 1.0,
            no_es: false,
            no_clip: false,
            no_ss: false,
            no_area: false,
            scales: vec![1.0, 1.5, 2.0],
            eval_tau: 0.3,
            freeze_check_every: 100,
            train_count: 500,
            eval_count: 100,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "classes" => self.classes = parse_num(key, v)?,
            "widths" => self.widths = parse_list(key, v)?,
            "feature_dim" => self.feature_dim = parse_num(key, v)?,
            "extra_kernel" => self.extra_kernel = parse_num(key, v)?,
            "offset_kernel" => self.offset_kernel = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "baseline_lr" => self.baseline_lr = parse_num(key, v)?,
            "baseline_iterations" => self.baseline_iterations = parse_num(key, v)?,
            "expansion_lr" => self.expansion_lr = parse_num(key, v)?,
            "expansion_iterations" => self.expansion_iterations = parse_num(key, v)?,
            "shrinkage_lr" => self.shrinkage_lr = parse_num(key, v)?,
            "shrinkage_iterations" => self.shrinkage_iterations = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "mu" => self.mu = parse_num(key, v)?,
            "no_es" => self.no_es = parse_num(key, v)?,
            "no_clip" => self.no_clip = parse_num(key, v)?,
            "no_ss" => self.no_ss = parse_num(key, v)?,
            "no_area" => self.no_area = parse_num(key, v)?,
            "scales" => self.scales = parse_list(key, v)?,
            "eval_tau" => self.eval_tau = parse_num(key, v)?,
            "freeze_check_every" => self.freeze_check_every = parse_num(key, v)?,
            "train_count" => self.train_count = parse_num(key, v)?,
            "eval_count" => self.eval_count = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, lr) in [
            ("baseline_lr", self.baseline_lr),
            ("expansion_lr", self.expansion_lr),
            ("shrinkage_lr", self.shrinkage_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, it) in [
            ("baseline_iterations", self.baseline_iterations),
            ("expansion_iterations", self.expansion_iterations),
            ("shrinkage_iterations", self.shrinkage_iterations),
            ("freeze_check_every", self.freeze_check_every),
        ] {
            if it == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if !(self.gamma >= 0.0 && self.mu >= 0.0) || self.gamma + self.mu == 0.0 {
            return bad("gamma and mu must be non-negative and not both zero".into());
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0)) {
            return bad("scales must be a non-empty list of positive ratios".into());
        }
        if !(self.eval_tau > 0.0 && self.eval_tau < 1.0) {
            return bad(format!("eval_tau must lie in (0, 1), got {}", self.eval_tau));
        }
        if self.train_count == 0 {
            return bad("train_count must be >= 1".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            classes: self.classes,
            in_channels: 3,
            widths: self.widths.clone(),
            feature_dim: self.feature_dim,
            extra_kernel: self.extra_kernel,
            offset_kernel: self.offset_kernel,
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_es: self.no_es,
            no_clip: self.no_clip,
            no_ss: self.no_ss,
        }
    }

    /// Area weight actually applied.
    pub fn area_weight(&self) -> f64 {
        if self.no_area {
            0.0
        } else {
            self.mu
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            train_count: self.train_count,
            eval_count: self.eval_count,
            classes: self.classes,
            seed: self.seed,
            size: 64,
        }
    }

    /// Every key with its resolved value, in file syntax.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("seed", self.seed.to_string());
        line("classes", self.classes.to_string());
        line("widths", join(&self.widths));
        line("feature_dim", self.feature_dim.to_string());
        line("extra_kernel", self.extra_kernel.to_string());
        line("offset_kernel", self.offset_kernel.to_string());
        line("batch_size", self.batch_size.to_string());
        line("momentum", self.momentum.to_string());
        line("baseline_lr", self.baseline_lr.to_string());
        line("baseline_iterations", self.baseline_iterations.to_string());
        line("expansion_lr", self.expansion_lr.to_string());
        line("expansion_iterations", self.expansion_iterations.to_string());
        line("shrinkage_lr", self.shrinkage_lr.to_string());
        line("shrinkage_iterations", self.shrinkage_iterations.to_string());
        line("alpha", self.alpha.to_string());
        line("beta", self.beta.to_string());
        line("gamma", self.gamma.to_string());
        line("mu", self.mu.to_string());
        line("no_es", self.no_es.to_string());
        line("no_clip", self.no_clip.to_string());
        line("no_ss", self.no_ss.to_string());
        line("no_area", self.no_area.to_string());
        line("scales", join(&self.scales));
        line("eval_tau", self.eval_tau.to_string());
        line("freeze_check_every", self.freeze_check_every.to_string());
        line("train_count", self.train_count.to_string());
        line("eval_count", self.eval_count.to_string());
        s
    }
}
