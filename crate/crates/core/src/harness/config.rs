//! Run configuration and its `section.key = value` text form.

use crate::error::{config_err, Result};
use crate::fusion::PerturbationConfig;
use crate::model::{LossWeights, ModelConfig};
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 3e-3, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Synthetic data drawn for training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub radius_min: f64,
    pub radius_max: f64,
    pub noise: f64,
    pub clutter: usize,
    /// Training search frames are drawn from `1..=clip_frames`.
    pub clip_frames: usize,
    /// Uniform jitter of the training search center, in pixels.
    pub jitter: f64,
    /// Proportions of RGB-only, thermal, depth and event samples.
    pub mix: [f64; 4],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            radius_min: 3.0,
            radius_max: 5.0,
            noise: 0.02,
            clutter: 6,
            clip_frames: 8,
            jitter: 3.0,
            mix: [0.4, 0.2, 0.2, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub frames: usize,
    /// Sequences per (modality, speed) cell.
    pub sequences: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { frames: 30, sequences: 3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub delta: f64,
    pub perturb: PerturbationConfig,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            delta: 0.1,
            perturb: PerturbationConfig::default(),
            optim: OptimConfig::default(),
            steps: 6000,
            batch: 16,
            seed: 0,
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err!("cannot parse {value:?} for {key}"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.perturb.validate()?;
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(config_err!("loss.delta = {} must be non-negative", self.delta));
        }
        if self.batch < 2 {
            return Err(config_err!("train.batch must be at least 2, got {}", self.batch));
        }
        if !(self.optim.lr > 0.0) || self.optim.weight_decay < 0.0 {
            return Err(config_err!("optimizer needs lr > 0 and weight_decay >= 0"));
        }
        let mix_total: f64 = self.data.mix.iter().sum();
        if self.data.mix.iter().any(|&p| p < 0.0) || !(mix_total > 0.0) {
            return Err(config_err!("task mix {:?} must be non-negative with a positive sum", self.data.mix));
        }
        if self.data.clip_frames == 0 || self.eval.frames < 2 {
            return Err(config_err!("train.clip_frames must be positive and eval.frames at least 2"));
        }
        if self.model.search_size != 32 || self.model.image_channels != crate::sim::CHANNELS {
            return Err(config_err!(
                "the synthetic data renders {}-channel 32x32 frames; model.search_size must be 32",
                crate::sim::CHANNELS
            ));
        }
        Ok(())
    }

    /// Every setting as `(key, value)` pairs, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let d = &self.data;
        vec![
            ("model.image_channels", m.image_channels.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.blocks", m.blocks.to_string()),
            ("model.template_size", m.template_size.to_string()),
            ("model.search_size", m.search_size.to_string()),
            ("model.experts", m.experts.to_string()),
            ("model.top_k", m.top_k.to_string()),
            ("model.rank", m.rank.to_string()),
            ("model.ffn_mult", m.ffn_mult.to_string()),
            ("model.spatial_kernel", m.spatial_kernel.to_string()),
            ("model.channel_reduction", m.channel_reduction.to_string()),
            ("model.merge_kernel", m.merge_kernel.to_string()),
            ("model.meta_init_std", m.meta_init_std.to_string()),
            ("model.tasks", m.tasks.to_string()),
            ("loss.giou", self.loss.giou.to_string()),
            ("loss.l1", self.loss.l1.to_string()),
            ("loss.dis", self.loss.dis.to_string()),
            ("loss.cluster", self.loss.cluster.to_string()),
            ("loss.balance", self.loss.balance.to_string()),
            ("loss.delta", self.delta.to_string()),
            ("perturb.p_swap", self.perturb.p_swap.to_string()),
            ("perturb.p_mask", self.perturb.p_mask.to_string()),
            ("perturb.mask_value", self.perturb.mask_value.to_string()),
            ("optim.lr", self.optim.lr.to_string()),
            ("optim.weight_decay", self.optim.weight_decay.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("train.steps", self.steps.to_string()),
            ("train.batch", self.batch.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.clip_frames", d.clip_frames.to_string()),
            ("train.jitter", d.jitter.to_string()),
            ("mix.rgb", d.mix[0].to_string()),
            ("mix.thermal", d.mix[1].to_string()),
            ("mix.depth", d.mix[2].to_string()),
            ("mix.event", d.mix[3].to_string()),
            ("sim.radius_min", d.radius_min.to_string()),
            ("sim.radius_max", d.radius_max.to_string()),
            ("sim.noise", d.noise.to_string()),
            ("sim.clutter", d.clutter.to_string()),
            ("eval.frames", self.eval.frames.to_string()),
            ("eval.sequences", self.eval.sequences.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        let m = &mut self.model;
        let d = &mut self.data;
        match key {
            "model.image_channels" => m.image_channels = parse(key, v)?,
            "model.patch" => m.patch = parse(key, v)?,
            "model.dim" => m.dim = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.blocks" => m.blocks = parse(key, v)?,
            "model.template_size" => m.template_size = parse(key, v)?,
            "model.search_size" => m.search_size = parse(key, v)?,
            "model.experts" => m.experts = parse(key, v)?,
            "model.top_k" => m.top_k = parse(key, v)?,
            "model.rank" => m.rank = parse(key, v)?,
            "model.ffn_mult" => m.ffn_mult = parse(key, v)?,
            "model.spatial_kernel" => m.spatial_kernel = parse(key, v)?,
            "model.channel_reduction" => m.channel_reduction = parse(key, v)?,
            "model.merge_kernel" => m.merge_kernel = parse(key, v)?,
            "model.meta_init_std" => m.meta_init_std = parse(key, v)?,
            "model.tasks" => m.tasks = parse(key, v)?,
            "loss.giou" => self.loss.giou = parse(key, v)?,
            "loss.l1" => self.loss.l1 = parse(key, v)?,
            "loss.dis" => self.loss.dis = parse(key, v)?,
            "loss.cluster" => self.loss.cluster = parse(key, v)?,
            "loss.balance" => self.loss.balance = parse(key, v)?,
            "loss.delta" => self.delta = parse(key, v)?,
            "perturb.p_swap" => self.perturb.p_swap = parse(key, v)?,
            "perturb.p_mask" => self.perturb.p_mask = parse(key, v)?,
            "perturb.mask_value" => self.perturb.mask_value = parse(key, v)?,
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "train.steps" => self.steps = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.clip_frames" => d.clip_frames = parse(key, v)?,
            "train.jitter" => d.jitter = parse(key, v)?,
            "mix.rgb" => d.mix[0] = parse(key, v)?,
            "mix.thermal" => d.mix[1] = parse(key, v)?,
            "mix.depth" => d.mix[2] = parse(key, v)?,
            "mix.event" => d.mix[3] = parse(key, v)?,
            "sim.radius_min" => d.radius_min = parse(key, v)?,
            "sim.radius_max" => d.radius_max = parse(key, v)?,
            "sim.noise" => d.noise = parse(key, v)?,
            "sim.clutter" => d.clutter = parse(key, v)?,
            "eval.frames" => self.eval.frames = parse(key, v)?,
            "eval.sequences" => self.eval.sequences = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            _ => return Err(config_err!("unknown configuration key {key:?}")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Defaults overridden by the lines of `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected `section.key = value`, got {raw:?}", n + 1))?;
            let key = key.trim();
            if !key.contains('.') {
                return Err(config_err!("line {}: key {key:?} has no section", n + 1));
            }
            cfg.set(key, value.trim())
                .map_err(|e| config_err!("line {}: {}", n + 1, e.to_string().trim_start_matches("configuration error: ")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
