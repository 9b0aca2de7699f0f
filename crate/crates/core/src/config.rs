//! Flat `key=value` run configuration shared by the command-line tools.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones, except `width_divisor`, which is applied first so
//! explicit channel counts can refine a narrowed plan.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::codec::{ArchitectureConfig, ReconstructionMode};
use crate::error::{Error, Result};
use crate::training::{LossNorm, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchitectureConfig::default();
        let train = TrainConfig {
            iterations: arch.iterations,
            patch_size: arch.patch_size,
            ..TrainConfig::default()
        };
        RunConfig { arch, train }
    }
}

pub const KEYS: &[&str] = &[
    "width_divisor",
    "patch_size",
    "analysis_channels",
    "encoder_hidden",
    "code_channels",
    "synthesis_channels",
    "decoder_hidden",
    "use_gdn",
    "mode",
    "iterations",
    "lr",
    "batch_size",
    "epochs",
    "patches_per_epoch",
    "steps",
    "loss_weight",
    "loss_norm",
    "seed",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "stochastic",
];

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = v
        .split(',')
        .map(|s| value(key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs {N} comma-separated values")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Splits `key=value` text into trimmed pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_all(pairs)?;
        Ok(cfg)
    }

    /// Applies `pairs` on top of this configuration and validates the result.
    pub fn apply_all(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "width_divisor") {
            let narrowed = ArchitectureConfig::narrowed(value("width_divisor", v)?)?;
            self.arch = ArchitectureConfig {
                patch_size: self.arch.patch_size,
                code_channels: self.arch.code_channels,
                use_gdn: self.arch.use_gdn,
                mode: self.arch.mode,
                iterations: self.arch.iterations,
                ..narrowed
            };
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "width_divisor") {
            self.set(k, v)?;
        }
        self.validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (a, t) = (&mut self.arch, &mut self.train);
        match key {
            "patch_size" => {
                a.patch_size = value(key, v)?;
                t.patch_size = a.patch_size;
            }
            "analysis_channels" => a.analysis_channels = value(key, v)?,
            "encoder_hidden" => a.encoder_hidden = list(key, v)?,
            "code_channels" => a.code_channels = value(key, v)?,
            "synthesis_channels" => a.synthesis_channels = value(key, v)?,
            "decoder_hidden" => a.decoder_hidden = list(key, v)?,
            "use_gdn" => a.use_gdn = value(key, v)?,
            "mode" => a.mode = v.parse::<ReconstructionMode>()?,
            "iterations" => {
                a.iterations = value(key, v)?;
                t.iterations = a.iterations;
            }
            "lr" => t.learning_rate = value(key, v)?,
            "batch_size" => t.batch_size = value(key, v)?,
            "epochs" => t.epochs = value(key, v)?,
            "patches_per_epoch" => t.patches_per_epoch = value(key, v)?,
            "steps" => t.steps = Some(value(key, v)?),
            "loss_weight" => t.loss_weight = value(key, v)?,
            "loss_norm" => t.loss_norm = v.parse::<LossNorm>()?,
            "seed" => t.seed = value(key, v)?,
            "adam_beta1" => t.beta1 = value(key, v)?,
            "adam_beta2" => t.beta2 = value(key, v)?,
            "adam_eps" => t.eps = value(key, v)?,
            "stochastic" => t.stochastic = value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if self.arch.patch_size != self.train.patch_size || self.arch.iterations != self.train.iterations {
            return Err(Error::Config("patch_size and iterations must agree".into()));
        }
        Ok(())
    }

    /// Every key except `width_divisor`, as `key=value` lines that
    /// [`RunConfig::parse`] reads back to the same configuration.
    pub fn render(&self) -> String {
        let (a, t) = (&self.arch, &self.train);
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        line("lr", t.learning_rate.to_string());
        line("batch_size", t.batch_size.to_string());
        line("patch_size", a.patch_size.to_string());
        line("epochs", t.epochs.to_string());
        line("patches_per_epoch", t.patches_per_epoch.to_string());
        if let Some(steps) = t.steps {
            line("steps", steps.to_string());
        }
        line("iterations", a.iterations.to_string());
        line("loss_weight", t.loss_weight.to_string());
        line("loss_norm", t.loss_norm.to_string());
        line("seed", t.seed.to_string());
        line("adam_beta1", t.beta1.to_string());
        line("adam_beta2", t.beta2.to_string());
        line("adam_eps", t.eps.to_string());
        line("stochastic", t.stochastic.to_string());
        line("analysis_channels", a.analysis_channels.to_string());
        line("encoder_hidden", join(&a.encoder_hidden));
        line("code_channels", a.code_channels.to_string());
        line("synthesis_channels", a.synthesis_channels.to_string());
        line("decoder_hidden", join(&a.decoder_hidden));
        line("use_gdn", a.use_gdn.to_string());
        line("mode", a.mode.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.learning_rate, 0.0005);
        assert!(c.render().starts_with("lr=0.0005\n"));
    }

    #[test]
    fn parses_and_round_trips() {
        let text = "# desk scale\nwidth_divisor = 8\ncode_channels=32\niterations=4\nlr=0.001\nmode=additive\nsteps=50\nencoder_hidden=8,16,16\nuse_gdn=false\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.arch.analysis_channels, 8);
        assert_eq!(c.arch.encoder_hidden, [8, 16, 16]);
        assert_eq!(c.arch.code_channels, 32);
        assert_eq!(c.arch.mode, ReconstructionMode::Additive);
        assert_eq!(c.train.iterations, 4);
        assert_eq!(c.train.steps, Some(50));
        assert!(!c.arch.use_gdn);
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn divisor_applies_before_explicit_channels() {
        let c = RunConfig::parse("analysis_channels=5\nwidth_divisor=4").unwrap();
        assert_eq!(c.arch.analysis_channels, 5);
        assert_eq!(c.arch.synthesis_channels, 128);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("learning_rate=0.1").is_err());
        assert!(RunConfig::parse("lr").is_err());
        assert!(RunConfig::parse("lr=fast").is_err());
        assert!(RunConfig::parse("patch_size=24").is_err());
        assert!(RunConfig::parse("encoder_hidden=1,2").is_err());
        assert!(RunConfig::parse("mode=gamma").is_err());
        assert!(RunConfig::parse("lr=-1").is_err());
    }
}
