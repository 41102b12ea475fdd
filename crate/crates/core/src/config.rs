//! Flat `key = value` run configuration. Every hyperparameter is one
//! greppable line; unknown keys are hard errors; printing and re-parsing
//! is a fixed point.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{loss_by_name, ModelConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    pub q: f64,
    pub m: usize,
    pub lambda: f64,
    pub patch: usize,
    pub sigma: f64,
    pub variant: Variant,
    pub use_ewr: bool,
    pub use_centrality: bool,
    /// Dataset directories; empty means "must come from the command line".
    pub data: String,
    pub eval_data: String,
    pub out: String,
    pub iters: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: String,
    pub flip: bool,
    pub scale_aug: bool,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            channels: 64,
            heads: 4,
            layers: 2,
            q: 0.3,
            m: 18,
            lambda: 0.1,
            patch: 8,
            sigma: 2.0,
            variant: Variant::Gramformer,
            use_ewr: true,
            use_centrality: true,
            data: String::new(),
            eval_data: String::new(),
            out: String::new(),
            iters: 2000,
            eval_interval: 100,
            seed: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: "mse_count".to_string(),
            flip: true,
            scale_aug: false,
            scale_min: 0.75,
            scale_max: 1.25,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            heads: self.heads,
            layers: self.layers,
            q: self.q,
            m: self.m,
            lambda: self.lambda,
            patch: self.patch,
            sigma: self.sigma,
            variant: self.variant,
            use_ewr: self.use_ewr,
            use_centrality: self.use_centrality,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        loss_by_name(&self.loss)?;
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(Error::config(format!("betas must be in [0,1), got {} {}", self.beta1, self.beta2)));
        }
        if self.lr <= 0.0 || self.adam_eps <= 0.0 {
            return Err(Error::config("lr and adam_eps must be positive".to_string()));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval must be >= 1".to_string()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::config(format!(
                "scale range [{}, {}] is invalid",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let bad = |what: &str| Error::config(format!("line {line}: bad {what} value {value:?}"));
        match key {
            "channels" => self.channels = value.parse().map_err(|_| bad("channels"))?,
            "heads" => self.heads = value.parse().map_err(|_| bad("heads"))?,
            "layers" => self.layers = value.parse().map_err(|_| bad("layers"))?,
            "q" => self.q = value.parse().map_err(|_| bad("q"))?,
            "m" => self.m = value.parse().map_err(|_| bad("m"))?,
            "lambda" => self.lambda = value.parse().map_err(|_| bad("lambda"))?,
            "patch" => self.patch = value.parse().map_err(|_| bad("patch"))?,
            "sigma" => self.sigma = value.parse().map_err(|_| bad("sigma"))?,
            "variant" => self.variant = Variant::parse(value)?,
            "use_ewr" => self.use_ewr = parse_bool(value).ok_or_else(|| bad("use_ewr"))?,
            "use_centrality" => self.use_centrality = parse_bool(value).ok_or_else(|| bad("use_centrality"))?,
            "data" => self.data = value.to_string(),
            "eval_data" => self.eval_data = value.to_string(),
            "out" => self.out = value.to_string(),
            "iters" => self.iters = value.parse().map_err(|_| bad("iters"))?,
            "eval_interval" => self.eval_interval = value.parse().map_err(|_| bad("eval_interval"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("lr"))?,
            "beta1" => self.beta1 = value.parse().map_err(|_| bad("beta1"))?,
            "beta2" => self.beta2 = value.parse().map_err(|_| bad("beta2"))?,
            "adam_eps" => self.adam_eps = value.parse().map_err(|_| bad("adam_eps"))?,
            "loss" => self.loss = value.to_string(),
            "flip" => self.flip = parse_bool(value).ok_or_else(|| bad("flip"))?,
            "scale_aug" => self.scale_aug = parse_bool(value).ok_or_else(|| bad("scale_aug"))?,
            "scale_min" => self.scale_min = value.parse().map_err(|_| bad("scale_min"))?,
            "scale_max" => self.scale_max = value.parse().map_err(|_| bad("scale_max"))?,
            other => {
                return Err(Error::config(format!("line {line}: unknown key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and
    /// `#` comments are allowed; unknown keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            cfg.set(key.trim(), value.trim(), i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical text form: every key, fixed order. `parse(print(c)) == c`.
    pub fn print(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("channels", self.channels.to_string());
        kv("heads", self.heads.to_string());
        kv("layers", self.layers.to_string());
        kv("q", format!("{:?}", self.q));
        kv("m", self.m.to_string());
        kv("lambda", format!("{:?}", self.lambda));
        kv("patch", self.patch.to_string());
        kv("sigma", format!("{:?}", self.sigma));
        kv("variant", self.variant.name().to_string());
        kv("use_ewr", self.use_ewr.to_string());
        kv("use_centrality", self.use_centrality.to_string());
        kv("data", self.data.clone());
        kv("eval_data", self.eval_data.clone());
        kv("out", self.out.clone());
        kv("iters", self.iters.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        kv("seed", self.seed.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("adam_eps", format!("{:?}", self.adam_eps));
        kv("loss", self.loss.clone());
        kv("flip", self.flip.to_string());
        kv("scale_aug", self.scale_aug.to_string());
        kv("scale_min", format!("{:?}", self.scale_min));
        kv("scale_max", format!("{:?}", self.scale_max));
        s
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}
