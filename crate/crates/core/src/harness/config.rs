//! `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key of a
//! config struct can be set from a file and then overridden one at a time,
//! and [`TrainConfig::to_text`] writes a file that parses back to the same
//! struct.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::synthgen::GeneratorConfig;

/// Parses `key = value` lines in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn load_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// Something configurable by string keys.
pub trait Configurable {
    /// Every accepted key, in file order.
    fn keys() -> &'static [&'static str];
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn get(&self, key: &str) -> String;

    fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::keys() {
            let _ = writeln!(out, "{k} = {}", self.get(k));
        }
        out
    }
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown config key `{key}`"))
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub peak_lr: f64,
    pub warmup: u64,
    /// Global gradient norm limit.
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 0.05,
            peak_lr: 5e-4,
            warmup: 4000,
            clip: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    /// Sentences per update; only 1 is supported.
    pub batch: usize,
    pub seed: u64,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            epochs: 50,
            batch: 1,
            seed: 0,
            train_manifest: PathBuf::from("data/train.tsv"),
            test_manifest: PathBuf::from("data/test.tsv"),
            out_dir: PathBuf::from("run"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if o.warmup < 1 {
            return bad("warmup must be at least 1");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch != 1 {
            return bad("only batch = 1 is supported");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(o.eps > 0.0 && o.peak_lr > 0.0 && o.clip > 0.0) {
            return bad("eps, lr and clip must be positive");
        }
        let m = &self.model;
        if m.layers < 1 || m.ratio < 1 || m.bases < 1 || m.heads < 1 || m.dim % m.heads != 0 {
            return bad("layers, ratio, bases and heads must be positive and heads must divide dim");
        }
        Ok(())
    }

    /// Parses a config file image, then applies `overrides` in order.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply(&parse_pairs(text)?)?;
        cfg.apply(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Configurable for TrainConfig {
    fn keys() -> &'static [&'static str] {
        &[
            "mode", "dim", "heads", "layers", "ff_mult", "ratio", "bases", "temperature", "vocab", "align_heads",
            "beta1", "beta2", "eps", "lr", "warmup", "clip", "epochs", "batch", "seed", "train", "test", "out",
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.optim;
        match key {
            "mode" => m.ablation = v.parse::<Ablation>()?,
            "dim" => m.dim = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "layers" => m.layers = parse(key, v)?,
            "ff_mult" => m.ff_mult = parse(key, v)?,
            "ratio" => m.ratio = parse(key, v)?,
            "bases" => m.bases = parse(key, v)?,
            "temperature" => m.temperature = parse(key, v)?,
            "vocab" => m.vocab = parse(key, v)?,
            "align_heads" => m.align_heads = parse(key, v)?,
            "beta1" => o.beta1 = parse(key, v)?,
            "beta2" => o.beta2 = parse(key, v)?,
            "eps" => o.eps = parse(key, v)?,
            "lr" => o.peak_lr = parse(key, v)?,
            "warmup" => o.warmup = parse(key, v)?,
            "clip" => o.clip = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "train" => self.train_manifest = PathBuf::from(v),
            "test" => self.test_manifest = PathBuf::from(v),
            "out" => self.out_dir = PathBuf::from(v),
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let (m, o) = (&self.model, &self.optim);
        match key {
            "mode" => m.ablation.to_string(),
            "dim" => m.dim.to_string(),
            "heads" => m.heads.to_string(),
            "layers" => m.layers.to_string(),
            "ff_mult" => m.ff_mult.to_string(),
            "ratio" => m.ratio.to_string(),
            "bases" => m.bases.to_string(),
            "temperature" => format!("{:?}", m.temperature),
            "vocab" => m.vocab.to_string(),
            "align_heads" => m.align_heads.to_string(),
            "beta1" => format!("{:?}", o.beta1),
            "beta2" => format!("{:?}", o.beta2),
            "eps" => format!("{:?}", o.eps),
            "lr" => format!("{:?}", o.peak_lr),
            "warmup" => o.warmup.to_string(),
            "clip" => format!("{:?}", o.clip),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "seed" => self.seed.to_string(),
            "train" => self.train_manifest.display().to_string(),
            "test" => self.test_manifest.display().to_string(),
            "out" => self.out_dir.display().to_string(),
            _ => String::new(),
        }
    }
}

/// Settings of the `generate` command.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub generator: GeneratorConfig,
    pub count: usize,
    pub out_dir: PathBuf,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            generator: GeneratorConfig::default(),
            count: 1000,
            out_dir: PathBuf::from("data"),
        }
    }
}

impl GenerateConfig {
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = GenerateConfig::default();
        cfg.apply(&parse_pairs(text)?)?;
        cfg.apply(overrides)?;
        cfg.generator.validate()?;
        Ok(cfg)
    }
}

impl Configurable for GenerateConfig {
    fn keys() -> &'static [&'static str] {
        &[
            "vocab", "n_lip", "dim", "dur_min", "dur_max", "lag_min", "lag_max", "sigma", "len_min", "len_max",
            "word_min", "word_max", "seed", "count", "out",
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let g = &mut self.generator;
        match key {
            "vocab" => g.vocab = parse(key, v)?,
            "n_lip" => g.n_lip = parse(key, v)?,
            "dim" => g.dim = parse(key, v)?,
            "dur_min" => g.duration.0 = parse(key, v)?,
            "dur_max" => g.duration.1 = parse(key, v)?,
            "lag_min" => g.lag.0 = parse(key, v)?,
            "lag_max" => g.lag.1 = parse(key, v)?,
            "sigma" => g.sigma = parse(key, v)?,
            "len_min" => g.length.0 = parse(key, v)?,
            "len_max" => g.length.1 = parse(key, v)?,
            "word_min" => g.word_length.0 = parse(key, v)?,
            "word_max" => g.word_length.1 = parse(key, v)?,
            "seed" => g.seed = parse(key, v)?,
            "count" => self.count = parse(key, v)?,
            "out" => self.out_dir = PathBuf::from(v),
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let g = &self.generator;
        match key {
            "vocab" => g.vocab.to_string(),
            "n_lip" => g.n_lip.to_string(),
            "dim" => g.dim.to_string(),
            "dur_min" => g.duration.0.to_string(),
            "dur_max" => g.duration.1.to_string(),
            "lag_min" => g.lag.0.to_string(),
            "lag_max" => g.lag.1.to_string(),
            "sigma" => format!("{:?}", g.sigma),
            "len_min" => g.length.0.to_string(),
            "len_max" => g.length.1.to_string(),
            "word_min" => g.word_length.0.to_string(),
            "word_max" => g.word_length.1.to_string(),
            "seed" => g.seed.to_string(),
            "count" => self.count.to_string(),
            "out" => self.out_dir.display().to_string(),
            _ => String::new(),
        }
    }
}

/// Reads the model section back out of a stored config text.
pub fn model_config_from_text(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    cfg.apply(&parse_pairs(text)?)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.model.layers, c.optim.warmup, c.epochs, c.batch), (3, 4000, 50, 1));
        assert_eq!((c.optim.beta1, c.optim.beta2, c.optim.eps), (0.9, 0.98, 0.05));
        assert_eq!(c.optim.peak_lr, 5e-4);
        assert_eq!(c.model.ablation, Ablation::Full);
    }

    #[test]
    fn file_then_overrides() {
        let text = "# comment\ndim = 32\nheads=2\n\nmode = concat\neps = 1e-8\n";
        let over = vec![("dim".to_string(), "16".to_string())];
        let c = TrainConfig::from_text(text, &over).unwrap();
        assert_eq!((c.model.dim, c.model.heads), (16, 2));
        assert_eq!(c.model.ablation, Ablation::Concat);
        assert_eq!(c.optim.eps, 1e-8);
    }

    #[test]
    fn text_round_trips() {
        let mut c = TrainConfig::default();
        c.set("lr", "0.0003").unwrap();
        c.set("mode", "self-attn+CB-eq4").unwrap();
        let back = TrainConfig::from_text(&c.to_text(), &[]).unwrap();
        assert_eq!(back, c);
        let g = GenerateConfig::default();
        assert_eq!(GenerateConfig::from_text(&g.to_text(), &[]).unwrap(), g);
    }

    #[test]
    fn bad_input_is_reported() {
        assert!(TrainConfig::from_text("nonsense", &[]).is_err());
        assert!(TrainConfig::from_text("colour = red", &[]).is_err());
        assert!(TrainConfig::from_text("dim = big", &[]).is_err());
        assert!(TrainConfig::from_text("warmup = 0", &[]).is_err());
        assert!(TrainConfig::from_text("epochs = 0", &[]).is_err());
        assert!(TrainConfig::from_text("mode = everything", &[]).is_err());
        assert!(GenerateConfig::from_text("lag_max = 9", &[]).is_err());
    }
}
