//! Run configuration: training hyperparameters, model geometry, loss
//! weights, and augmentation settings, with a plain `key = value` file
//! format. Printing a config and re-parsing the text reproduces it
//! exactly.

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::{FocalParams, LossWeights};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta: f32,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub modality_dropout_p: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 1e-4,
            beta: 1.0,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            modality_dropout_p: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.beta > 0.0 && self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} too small for contrastive loss (needs >= 2)",
                self.batch_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.modality_dropout_p) {
            return Err(Error::Config(format!(
                "modality_dropout_p {} outside [0,1)",
                self.modality_dropout_p
            )));
        }
        Ok(())
    }
}

/// Everything one experiment needs. `input_size` stays `None` until
/// resolved against the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub input_size: Option<(usize, usize)>,
    pub loss: LossWeights,
    pub focal: FocalParams,
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            input_size: None,
            loss: LossWeights::default(),
            focal: FocalParams::default(),
            augment_enabled: true,
            augment: AugmentConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("cannot parse '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        other => Err(Error::Usage(format!("cannot parse '{other}' as a boolean for key '{key}'"))),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "lr" => self.train.lr = parse_num(key, value)?,
            "beta" => {
                self.train.beta = parse_num(key, value)?;
                self.loss.beta = self.train.beta;
            }
            "seed" => self.train.seed = parse_num(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_num(key, value)?,
            "eval_every" => self.train.eval_every = parse_num(key, value)?,
            "modality_dropout_p" => self.train.modality_dropout_p = parse_num(key, value)?,
            "stages" => self.model.stages = parse_num(key, value)?,
            "base_width" => self.model.base_width = parse_num(key, value)?,
            "blocks_per_stage" => self.model.blocks_per_stage = parse_num(key, value)?,
            "proj_dim" => self.model.proj_dim = parse_num(key, value)?,
            "num_classes" => self.model.num_classes = parse_num(key, value)?,
            "input_size" => {
                let v = value.trim();
                if v == "auto" {
                    self.input_size = None;
                } else {
                    let parts: Vec<&str> = v.split(',').collect();
                    if parts.len() != 2 {
                        return Err(Error::Usage(format!("input_size wants 'H,W' or 'auto', got '{v}'")));
                    }
                    self.input_size =
                        Some((parse_num(key, parts[0])?, parse_num(key, parts[1])?));
                }
            }
            "w_dice" => self.loss.w_dice = parse_num(key, value)?,
            "w_focal" => self.loss.w_focal = parse_num(key, value)?,
            "temperature" => self.loss.temperature = parse_num(key, value)?,
            "alpha" => self.focal.alpha = parse_num(key, value)?,
            "gamma" => self.focal.gamma = parse_num(key, value)?,
            "augment" => self.augment_enabled = parse_bool(key, value)?,
            "hflip_p" => self.augment.hflip_p = parse_num(key, value)?,
            "vflip_p" => self.augment.vflip_p = parse_num(key, value)?,
            "rotate_limit_deg" => self.augment.rotate_limit_deg = parse_num(key, value)?,
            "shift_limit" => self.augment.shift_limit = parse_num(key, value)?,
            "shift_rotate_p" => self.augment.shift_rotate_p = parse_num(key, value)?,
            "crop_size" => self.augment.crop_size = parse_num(key, value)?,
            "final_size" => self.augment.final_size = parse_num(key, value)?,
            other => return Err(Error::Usage(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a whole config text ('#' starts a comment).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("line {}: expected 'key = value', got '{line}'", lineno + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Render as `key = value` lines; the output re-parses to an identical
    /// configuration.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("alpha", format!("{:?}", self.focal.alpha));
        kv("augment", self.augment_enabled.to_string());
        kv("base_width", self.model.base_width.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("beta", format!("{:?}", self.train.beta));
        kv("blocks_per_stage", self.model.blocks_per_stage.to_string());
        kv("checkpoint_every", self.train.checkpoint_every.to_string());
        kv("crop_size", self.augment.crop_size.to_string());
        kv("epochs", self.train.epochs.to_string());
        kv("eval_every", self.train.eval_every.to_string());
        kv("final_size", self.augment.final_size.to_string());
        kv("gamma", format!("{:?}", self.focal.gamma));
        kv("hflip_p", format!("{:?}", self.augment.hflip_p));
        kv(
            "input_size",
            match self.input_size {
                Some((h, w)) => format!("{h},{w}"),
                None => "auto".to_string(),
            },
        );
        kv("lr", format!("{:?}", self.train.lr));
        kv("modality_dropout_p", format!("{:?}", self.train.modality_dropout_p));
        kv("num_classes", self.model.num_classes.to_string());
        kv("proj_dim", self.model.proj_dim.to_string());
        kv("rotate_limit_deg", format!("{:?}", self.augment.rotate_limit_deg));
        kv("seed", self.train.seed.to_string());
        kv("shift_limit", format!("{:?}", self.augment.shift_limit));
        kv("shift_rotate_p", format!("{:?}", self.augment.shift_rotate_p));
        kv("stages", self.model.stages.to_string());
        kv("temperature", format!("{:?}", self.loss.temperature));
        kv("vflip_p", format!("{:?}", self.augment.vflip_p));
        kv("w_dice", format!("{:?}", self.loss.w_dice));
        kv("w_focal", format!("{:?}", self.loss.w_focal));
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.focal.validate()?;
        if self.augment_enabled {
            self.augment.validate()?;
        }
        if (self.loss.beta - self.train.beta).abs() > 0.0 {
            return Err(Error::Config("beta disagrees between train and loss settings".into()));
        }
        Ok(())
    }
}
