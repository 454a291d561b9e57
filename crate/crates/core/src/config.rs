//! Model and training configuration, read from `key = value` text files.
//!
//! ```text
//! # comments start with '#'
//! hidden = 128
//! attention_layers = 3
//! loss_weights = 0.4, 0.4, 0.1, 0.1
//! solver_h = auto
//! ```

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How intermediate encoder attention layers mix tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionForm {
    /// Standard masked token-to-token attention.
    Cross,
    /// The matched-index pooling of the final layer, broadcast back to every token.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    /// Normalize each token over its own features.
    Instance,
    None,
}

/// Interpretation of the horizon spread estimated from training end times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HorizonSpread {
    Variance,
    StdDev,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepSize {
    /// `min(0.01·t_max, smallest inter-event gap / 4)` per sequence.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature dimension D; taken from the data at training time.
    pub dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub attention_layers: usize,
    pub attention_form: AttentionForm,
    pub norm: Norm,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub diffusion_hidden: usize,
    pub step_embedding: usize,
    /// `(k, ε)` draws averaged in the diffusion loss of each sequence.
    #[serde(default = "one")]
    pub diffusion_draws: usize,
    pub k_reg: usize,
    pub delta: f64,
    pub horizon_spread: HorizonSpread,
    pub solver_h: StepSize,
}

fn one() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 0,
            hidden: 128,
            embed: 32,
            attention_layers: 3,
            attention_form: AttentionForm::Cross,
            norm: Norm::Instance,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            diffusion_hidden: 128,
            step_embedding: 32,
            diffusion_draws: 1,
            k_reg: 5,
            delta: 0.05,
            horizon_spread: HorizonSpread::Variance,
            solver_h: StepSize::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// λ₁..λ₄ for sequence NLL, diffusion, horizon and missingness terms.
    pub loss_weights: [f64; 4],
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    pub grad_clip: f64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_weights: [0.4, 0.4, 0.1, 0.1],
            lr: 1e-3,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            dropout: 0.1,
            grad_clip: 5.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config { line, msg: format!("invalid value `{v}` for `{key}`") })
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config { line, msg: format!("expected key = value, got `{content}`") })?;
            cfg.set(line, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key = value` assignment. `line` is only used in error messages.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "hidden" => m.hidden = parse_num(line, key, v)?,
            "embed" => m.embed = parse_num(line, key, v)?,
            "attention_layers" => m.attention_layers = parse_num(line, key, v)?,
            "attention_form" => {
                m.attention_form = match v {
                    "cross" => AttentionForm::Cross,
                    "pooled" => AttentionForm::Pooled,
                    _ => return Err(Error::Config { line, msg: format!("unknown attention_form `{v}`") }),
                }
            }
            "norm" => {
                m.norm = match v {
                    "instance" => Norm::Instance,
                    "none" => Norm::None,
                    _ => return Err(Error::Config { line, msg: format!("unknown norm `{v}`") }),
                }
            }
            "diffusion_steps" => m.diffusion_steps = parse_num(line, key, v)?,
            "beta_start" => m.beta_start = parse_num(line, key, v)?,
            "beta_end" => m.beta_end = parse_num(line, key, v)?,
            "diffusion_hidden" => m.diffusion_hidden = parse_num(line, key, v)?,
            "step_embedding" => m.step_embedding = parse_num(line, key, v)?,
            "diffusion_draws" => m.diffusion_draws = parse_num(line, key, v)?,
            "k_reg" => m.k_reg = parse_num(line, key, v)?,
            "delta" => m.delta = parse_num(line, key, v)?,
            "horizon_spread" => {
                m.horizon_spread = match v {
                    "variance" => HorizonSpread::Variance,
                    "std" => HorizonSpread::StdDev,
                    _ => return Err(Error::Config { line, msg: format!("unknown horizon_spread `{v}`") }),
                }
            }
            "solver_h" => {
                m.solver_h = if v == "auto" { StepSize::Auto } else { StepSize::Fixed(parse_num(line, key, v)?) }
            }
            "loss_weights" => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| parse_num(line, key, p.trim()))
                    .collect::<Result<_>>()?;
                t.loss_weights = parts
                    .try_into()
                    .map_err(|_| Error::Config { line, msg: "loss_weights needs four values".into() })?;
            }
            "lr" => t.lr = parse_num(line, key, v)?,
            "batch_size" => t.batch_size = parse_num(line, key, v)?,
            "epochs" => t.epochs = parse_num(line, key, v)?,
            "seed" => t.seed = parse_num(line, key, v)?,
            "dropout" => t.dropout = parse_num(line, key, v)?,
            "grad_clip" => t.grad_clip = parse_num(line, key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(line, key, v)?,
            _ => return Err(Error::Config { line, msg: format!("unknown key `{key}`") }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let bad = |msg: &str| Err(Error::Config { line: 0, msg: msg.to_string() });
        if m.hidden == 0 || m.embed == 0 || m.diffusion_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if m.attention_layers == 0 {
            return bad("attention_layers must be at least 1");
        }
        if m.diffusion_steps == 0 || m.k_reg > m.diffusion_steps {
            return bad("need 0 <= k_reg <= diffusion_steps and diffusion_steps >= 1");
        }
        if !(0.0 < m.beta_start && m.beta_start <= m.beta_end && m.beta_end < 1.0) {
            return bad("need 0 < beta_start <= beta_end < 1");
        }
        if m.diffusion_draws == 0 {
            return bad("diffusion_draws must be at least 1");
        }
        if m.step_embedding % 2 != 0 {
            return bad("step_embedding must be even");
        }
        if !(m.delta >= 0.0) {
            return bad("delta must be non-negative");
        }
        if let StepSize::Fixed(h) = m.solver_h {
            if !(h > 0.0) {
                return bad("solver_h must be positive");
            }
        }
        if t.loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if t.batch_size == 0 || !(t.lr > 0.0) || !(0.0..1.0).contains(&t.dropout) || !(t.grad_clip > 0.0) {
            return bad("batch_size, lr, grad_clip must be positive and dropout in [0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_sections() {
        let cfg = Config::parse(
            "# desk run\nhidden = 16\nembed=4\nloss_weights = 1, 0, 0.5, 0.25\nsolver_h = 0.05 # fixed\nattention_form = pooled\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.model.hidden, 16);
        assert_eq!(cfg.model.embed, 4);
        assert_eq!(cfg.model.solver_h, StepSize::Fixed(0.05));
        assert_eq!(cfg.model.attention_form, AttentionForm::Pooled);
        assert_eq!(cfg.train.loss_weights, [1.0, 0.0, 0.5, 0.25]);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn defaults() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg.train.loss_weights, [0.4, 0.4, 0.1, 0.1]);
        assert_eq!(cfg.model.diffusion_steps, 1000);
        assert_eq!(cfg.model.hidden, 128);
        assert_eq!(cfg.model.attention_layers, 3);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.grad_clip, 5.0);
        assert_eq!(cfg.train.dropout, 0.1);
        assert_eq!(cfg.model.k_reg, 5);
        assert_eq!(cfg.model.delta, 0.05);
    }

    #[test]
    fn unknown_key_reports_line() {
        match Config::parse("hidden = 8\nwarp = 9\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::parse("hidden = many").is_err());
        assert!(Config::parse("loss_weights = 1, 2").is_err());
        assert!(Config::parse("beta_end = 1.5").is_err());
        assert!(Config::parse("dropout = 1.0").is_err());
    }
}
