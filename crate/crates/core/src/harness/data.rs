//! Turning synthetic sequences into model inputs.

use super::config::{DataConfig, TrainConfig};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::fusion::{Perturbation, PerturbationConfig};
use crate::model::{Bbox, ModelConfig, TrackInputs, TrackTargets};
use crate::sim::{crop, crop_origin, generate_sequence, Modality, SimConfig, SpeedLevel, SyntheticSequence, CHANNELS};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

/// Training seeds live below this value, evaluation seeds at or above it.
pub const EVAL_SEED_BASE: u64 = 1 << 40;

pub fn sim_config(data: &DataConfig, frames: usize, speed: SpeedLevel, modality: Modality, seed: u64) -> SimConfig {
    SimConfig {
        image_size: 32,
        frames,
        radius_min: data.radius_min,
        radius_max: data.radius_max,
        speed,
        modality,
        noise: data.noise,
        clutter: data.clutter,
        seed,
    }
}

/// One template/search pair with crop-normalized supervision.
#[derive(Clone, Debug)]
pub struct Sample {
    pub template_rgb: Vec<f64>,
    pub template_x: Vec<f64>,
    pub search_rgb: Vec<f64>,
    pub search_x: Vec<f64>,
    pub target: Bbox,
    pub task: usize,
    pub perturbation: Perturbation,
}

/// Crop a template around `center` and a search region around `search_center`
/// from frames `t0` and `t` of a sequence.
pub fn crop_pair(
    seq: &SyntheticSequence,
    model: &ModelConfig,
    t0: usize,
    center: (f64, f64),
    t: usize,
    search_center: (f64, f64),
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, (i64, i64)) {
    let s = seq.image_size();
    let (ts, ss) = (model.template_size, model.search_size);
    let (tx0, ty0) = crop_origin(center.0, center.1, ts);
    let (sx0, sy0) = crop_origin(search_center.0, search_center.1, ss);
    (
        crop(seq.rgb_frame(t0), CHANNELS, s, tx0, ty0, ts),
        crop(seq.x_frame(t0), CHANNELS, s, tx0, ty0, ts),
        crop(seq.rgb_frame(t), CHANNELS, s, sx0, sy0, ss),
        crop(seq.x_frame(t), CHANNELS, s, sx0, sy0, ss),
        (sx0, sy0),
    )
}

/// Frame-normalized box → search-crop-normalized box.
pub fn to_crop(b: &Bbox, image: usize, origin: (i64, i64), search: usize) -> Bbox {
    let (s, c) = (image as f64, search as f64);
    Bbox::new(
        (b.cx * s - origin.0 as f64) / c,
        (b.cy * s - origin.1 as f64) / c,
        b.w * s / c,
        b.h * s / c,
    )
}

/// Search-crop-normalized box → frame-normalized box.
pub fn from_crop(b: &Bbox, image: usize, origin: (i64, i64), search: usize) -> Bbox {
    let (s, c) = (image as f64, search as f64);
    Bbox::new(
        (b.cx * c + origin.0 as f64) / s,
        (b.cy * c + origin.1 as f64) / s,
        b.w * c / s,
        b.h * c / s,
    )
}

fn apply(p: Perturbation, rgb: Vec<f64>, x: Vec<f64>, mask: f64) -> (Vec<f64>, Vec<f64>) {
    let (a, b) = p.apply(Tensor::from_vec(rgb), Tensor::from_vec(x), mask);
    (a.into_data(), b.into_data())
}

/// Draw one training sample. RGB-only sequences already substitute RGB for X,
/// and the same perturbation is applied to the template and search pairs.
pub fn draw_sample<R: Rng>(cfg: &TrainConfig, perturb: &PerturbationConfig, rng: &mut R) -> Result<Sample> {
    let mix = WeightedIndex::new(cfg.data.mix).map_err(|e| crate::error::config_err!("task mix: {e}"))?;
    let modality = Modality::TRAINING[mix.sample(rng)];
    let speed = SpeedLevel::ALL[rng.gen_range(0..4)];
    let seed = rng.gen_range(0..EVAL_SEED_BASE);
    let t = rng.gen_range(1..=cfg.data.clip_frames);
    let seq = generate_sequence(&sim_config(&cfg.data, t + 1, speed, modality, seed))?;
    let centers = seq.centers_px();
    let j = cfg.data.jitter;
    let jitter = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
    let search_center = (centers[t - 1].0 + jitter.0, centers[t - 1].1 + jitter.1);
    let (trgb, tx, srgb, sx, origin) = crop_pair(&seq, &cfg.model, 0, centers[0], t, search_center);
    let action = Perturbation::draw(rng, perturb);
    let (template_rgb, template_x) = apply(action, trgb, tx, perturb.mask_value);
    let (search_rgb, search_x) = apply(action, srgb, sx, perturb.mask_value);
    Ok(Sample {
        template_rgb,
        template_x,
        search_rgb,
        search_x,
        target: to_crop(&seq.boxes[t], seq.image_size(), origin, cfg.model.search_size),
        task: modality.task_id().expect("training modalities carry a task id"),
        perturbation: action,
    })
}

pub fn stack(model: &ModelConfig, samples: &[Sample]) -> (TrackInputs, TrackTargets) {
    let b = samples.len();
    let c = model.image_channels;
    let (ts, ss) = (model.template_size, model.search_size);
    let cat = |f: &dyn Fn(&Sample) -> &Vec<f64>, size: usize| {
        Tensor::from_parts(vec![b, c, size, size], samples.iter().flat_map(|s| f(s).iter().copied()).collect())
    };
    (
        TrackInputs {
            template_rgb: cat(&|s| &s.template_rgb, ts),
            template_x: cat(&|s| &s.template_x, ts),
            search_rgb: cat(&|s| &s.search_rgb, ss),
            search_x: cat(&|s| &s.search_x, ss),
        },
        TrackTargets {
            boxes: samples.iter().map(|s| s.target).collect(),
            tasks: samples.iter().map(|s| s.task).collect(),
        },
    )
}

/// Which evaluation sequences to render.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub modalities: Vec<Modality>,
    pub speeds: Vec<SpeedLevel>,
    pub per_cell: usize,
    pub frames: usize,
    pub seed: u64,
}

impl EvalSet {
    pub fn from_config(cfg: &TrainConfig, modalities: &[Modality]) -> Self {
        Self {
            modalities: modalities.to_vec(),
            speeds: SpeedLevel::ALL.to_vec(),
            per_cell: cfg.eval.sequences,
            frames: cfg.eval.frames,
            seed: cfg.eval.seed,
        }
    }

    /// Sequences in (modality, speed, index) order, all with evaluation seeds.
    pub fn sequences(&self, data: &DataConfig) -> Result<Vec<SyntheticSequence>> {
        let mut out = Vec::new();
        let mut k = 0u64;
        for &m in &self.modalities {
            for &s in &self.speeds {
                for _ in 0..self.per_cell {
                    let seed = EVAL_SEED_BASE + self.seed.wrapping_mul(1_000_003) % EVAL_SEED_BASE + k;
                    out.push(generate_sequence(&sim_config(data, self.frames, s, m, seed))?);
                    k += 1;
                }
            }
        }
        Ok(out)
    }
}
