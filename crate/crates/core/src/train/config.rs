//! Flat `key = value` run configuration.
//!
//! ```text
//! # phase-1 defaults
//! phase = pretrain
//! lr = 1e-3
//! steps = 600
//! dim = 64
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; later assignments override earlier ones, so command-line overrides
//! are applied with [`RunConfig::set`] after parsing the file.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, PathContext, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Text and image streams on single-person final stages.
    Pretrain,
    /// Pose stream adaptation on every stage of multi-person scenes.
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda_pose: f64,
    pub lambda_img: f64,
    pub p_drop: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Pretrain,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            steps: 600,
            lambda_pose: 1.0,
            lambda_img: 1.0,
            p_drop: 0.1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for `phase`: fine-tuning runs fewer, larger steps on the
    /// low-rank adapters.
    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self::default(),
            Phase::Finetune => Self {
                phase,
                lr: 3e-3,
                steps: 400,
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return bad("p_drop must lie in [0, 1]");
        }
        if !(self.lambda_pose.is_finite() && self.lambda_img.is_finite()) {
            return bad("loss weights must be finite");
        }
        Ok(())
    }
}

/// Scenes a training run draws from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    /// Inclusive range of people per scene.
    pub min_people: usize,
    pub max_people: usize,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 2000,
            min_people: 1,
            max_people: 1,
            data_seed: 1,
        }
    }
}

/// Everything a training command needs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

/// Parses `a..b` or a single number as an inclusive range.
pub fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let bad = || format!("invalid range `{s}`");
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().trim_start_matches('=').parse().map_err(|_| bad())?,
        ),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

impl RunConfig {
    pub const KEYS: [&'static str; 22] = [
        "phase",
        "lr",
        "weight_decay",
        "batch_size",
        "steps",
        "lambda_pose",
        "lambda_img",
        "p_drop",
        "seed",
        "checkpoint_every",
        "dim",
        "blocks",
        "heads",
        "rope_tau",
        "rope_x",
        "rope_y",
        "rope_base",
        "lora_rank",
        "mlp_ratio",
        "scenes",
        "people",
        "data_seed",
    ];

    /// Assigns one key; the error message names the offending key or value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (t, m, d) = (&mut self.train, &mut self.model, &mut self.data);
        match key {
            "phase" => t.phase = value.parse()?,
            "lr" => t.lr = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "steps" => t.steps = parse_value(key, value)?,
            "lambda_pose" => t.lambda_pose = parse_value(key, value)?,
            "lambda_img" => t.lambda_img = parse_value(key, value)?,
            "p_drop" => t.p_drop = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse_value(key, value)?,
            "dim" => m.dim = parse_value(key, value)?,
            "blocks" => m.blocks = parse_value(key, value)?,
            "heads" => m.heads = parse_value(key, value)?,
            "rope_tau" => m.rope_split[0] = parse_value(key, value)?,
            "rope_x" => m.rope_split[1] = parse_value(key, value)?,
            "rope_y" => m.rope_split[2] = parse_value(key, value)?,
            "rope_base" => m.rope_base = parse_value(key, value)?,
            "lora_rank" => m.lora_rank = parse_value(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse_value(key, value)?,
            "scenes" => d.scenes = parse_value(key, value)?,
            "people" => (d.min_people, d.max_people) = parse_range(value)?,
            "data_seed" => d.data_seed = parse_value(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |reason: String| Error::Parse { line: i + 1, reason };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim()).map_err(parse_err)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).with_path(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.data.min_people == 0 || self.data.min_people > self.data.max_people {
            return Err(Error::InvalidConfig("people range is empty".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let (t, m, d) = (&self.train, &self.model, &self.data);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("phase", t.phase.name().into());
        kv("lr", format!("{:?}", t.lr));
        kv("weight_decay", format!("{:?}", t.weight_decay));
        kv("batch_size", t.batch_size.to_string());
        kv("steps", t.steps.to_string());
        kv("lambda_pose", format!("{:?}", t.lambda_pose));
        kv("lambda_img", format!("{:?}", t.lambda_img));
        kv("p_drop", format!("{:?}", t.p_drop));
        kv("seed", t.seed.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("dim", m.dim.to_string());
        kv("blocks", m.blocks.to_string());
        kv("heads", m.heads.to_string());
        kv("rope_tau", m.rope_split[0].to_string());
        kv("rope_x", m.rope_split[1].to_string());
        kv("rope_y", m.rope_split[2].to_string());
        kv("rope_base", format!("{:?}", m.rope_base));
        kv("lora_rank", m.lora_rank.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("scenes", d.scenes.to_string());
        kv("people", format!("{}..{}", d.min_people, d.max_people));
        kv("data_seed", d.data_seed.to_string());
        s
    }
}
