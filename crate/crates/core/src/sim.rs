//! Synthetic multimodal sequences: a disc moving over a cluttered background,
//! rendered as an RGB-like image plus one auxiliary modality.

use crate::autodiff::Tensor;
use crate::error::{config_err, validation_err, Result};
use crate::model::Bbox;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpeedLevel {
    Slow,
    Middle,
    Fast,
    Extreme,
}

impl SpeedLevel {
    pub const ALL: [SpeedLevel; 4] = [SpeedLevel::Slow, SpeedLevel::Middle, SpeedLevel::Fast, SpeedLevel::Extreme];

    /// Per-frame center displacement band in pixels. Slow includes 0; the other
    /// bands are open below.
    pub fn band(self) -> (f64, f64) {
        match self {
            SpeedLevel::Slow => (0.0, 1.0),
            SpeedLevel::Middle => (1.0, 2.0),
            SpeedLevel::Fast => (2.0, 4.0),
            SpeedLevel::Extreme => (4.0, 8.0),
        }
    }

    pub fn from_displacement(d: f64) -> Self {
        if d <= 1.0 {
            SpeedLevel::Slow
        } else if d <= 2.0 {
            SpeedLevel::Middle
        } else if d <= 4.0 {
            SpeedLevel::Fast
        } else {
            SpeedLevel::Extreme
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SpeedLevel::Slow => "slow",
            SpeedLevel::Middle => "middle",
            SpeedLevel::Fast => "fast",
            SpeedLevel::Extreme => "extreme",
        }
    }
}

impl fmt::Display for SpeedLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpeedLevel {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        SpeedLevel::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| config_err!("unknown speed level {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Thermal,
    Depth,
    Event,
    HeldOut,
}

impl Modality {
    pub const ALL: [Modality; 5] =
        [Modality::Rgb, Modality::Thermal, Modality::Depth, Modality::Event, Modality::HeldOut];
    pub const TRAINING: [Modality; 4] = [Modality::Rgb, Modality::Thermal, Modality::Depth, Modality::Event];

    /// Task label used for supervision; the held-out modality has none.
    pub fn task_id(self) -> Option<usize> {
        match self {
            Modality::Rgb => Some(0),
            Modality::Thermal => Some(1),
            Modality::Depth => Some(2),
            Modality::Event => Some(3),
            Modality::HeldOut => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Thermal => "thermal",
            Modality::Depth => "depth",
            Modality::Event => "event",
            Modality::HeldOut => "heldout",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err!("unknown modality {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub image_size: usize,
    pub frames: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub speed: SpeedLevel,
    pub modality: Modality,
    pub noise: f64,
    pub clutter: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            frames: 30,
            radius_min: 3.0,
            radius_max: 5.0,
            speed: SpeedLevel::Middle,
            modality: Modality::Rgb,
            noise: 0.02,
            clutter: 6,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(config_err!("a sequence needs at least one frame"));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(config_err!(
                "radius range [{}, {}] is empty or not positive",
                self.radius_min,
                self.radius_max
            ));
        }
        if (self.image_size as f64) < 4.0 * self.radius_max {
            return Err(config_err!(
                "image size {} is smaller than four times the largest radius {}",
                self.image_size,
                self.radius_max
            ));
        }
        let span = self.image_size as f64 - 2.0 * (self.radius_max + 1.0);
        if span < 2.0 * self.speed.band().1 {
            return Err(config_err!(
                "image size {} leaves no room for {} motion",
                self.image_size,
                self.speed
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err!("noise sigma {} must be finite and non-negative", self.noise));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    /// `[N, C, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[N, C, H, W]`; `None` for RGB-only sequences.
    pub x: Option<Tensor>,
    /// Normalized to the image.
    pub boxes: Vec<Bbox>,
    pub modality: Modality,
    pub speed: SpeedLevel,
    pub seed: u64,
}

impl SyntheticSequence {
    pub fn frames(&self) -> usize {
        self.boxes.len()
    }

    pub fn image_size(&self) -> usize {
        self.rgb.shape()[2]
    }

    fn frame_len(&self) -> usize {
        self.rgb.shape()[1..].iter().product()
    }

    pub fn rgb_frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.rgb.data()[t * n..(t + 1) * n]
    }

    /// Auxiliary frame as the tracker sees it: RGB stands in when there is none.
    pub fn x_frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        match &self.x {
            Some(x) => &x.data()[t * n..(t + 1) * n],
            None => self.rgb_frame(t),
        }
    }

    /// Target centers in pixels.
    pub fn centers_px(&self) -> Vec<(f64, f64)> {
        let s = self.image_size() as f64;
        self.boxes.iter().map(|b| (b.cx * s, b.cy * s)).collect()
    }
}

struct Scene {
    size: usize,
    radius: f64,
    target_color: [f64; 3],
    background: Vec<f64>,
    ground: Vec<f64>,
}

impl Scene {
    fn coverage(&self, path: &[(f64, f64)]) -> Vec<f64> {
        let s = self.size;
        let mut cov = vec![0.0; s * s];
        for &(cx, cy) in path {
            for i in 0..s {
                for j in 0..s {
                    let d = ((j as f64 + 0.5 - cx).powi(2) + (i as f64 + 0.5 - cy).powi(2)).sqrt();
                    cov[i * s + j] += (self.radius + 0.5 - d).clamp(0.0, 1.0);
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= path.len() as f64);
        cov
    }

    fn render_rgb(&self, cov: &[f64]) -> Vec<f64> {
        let n = self.size * self.size;
        let mut out = self.background.clone();
        for (c, &tc) in self.target_color.iter().enumerate() {
            for p in 0..n {
                out[c * n + p] = (1.0 - cov[p]) * out[c * n + p] + cov[p] * tc;
            }
        }
        out
    }

    /// Normalized distance to the center, sharpened so the disc reads as a dome.
    fn radial(&self, center: (f64, f64)) -> Vec<f64> {
        let s = self.size;
        let mut out = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                let d = ((j as f64 + 0.5 - center.0).powi(2) + (i as f64 + 0.5 - center.1).powi(2)).sqrt();
                out[i * s + j] = (d / self.radius).min(1.0);
            }
        }
        out
    }
}

fn blur_path(prev: (f64, f64), cur: (f64, f64)) -> Vec<(f64, f64)> {
    const STEPS: usize = 5;
    (0..STEPS)
        .map(|i| {
            let a = i as f64 / (STEPS - 1) as f64;
            (prev.0 + a * (cur.0 - prev.0), prev.1 + a * (cur.1 - prev.1))
        })
        .collect()
}

fn gray(frame: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|p| (frame[p] + frame[n + p] + frame[2 * n + p]) / 3.0).collect()
}

fn replicate(plane: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(plane.len() * CHANNELS);
    for _ in 0..CHANNELS {
        out.extend_from_slice(plane);
    }
    out
}

fn add_noise<R: Rng>(data: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked by SimConfig::validate");
    for v in data.iter_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
}

fn trajectory<R: Rng>(cfg: &SimConfig, radius: f64, rng: &mut R) -> Vec<(f64, f64)> {
    let s = cfg.image_size as f64;
    let (lo, hi) = (radius + 1.0, s - radius - 1.0);
    let (blo, bhi) = cfg.speed.band();
    let mut pos = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let mut theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let turn = Normal::new(0.0, 0.3).expect("constant sigma");
    // one extra leading position so frame 0 has a predecessor for blur and events
    let mut path = vec![pos];
    for _ in 0..cfg.frames {
        let speed = blo + (bhi - blo) * rng.gen_range(0.02..0.98);
        theta += turn.sample(rng);
        let (mut dx, mut dy) = (speed * theta.cos(), speed * theta.sin());
        if !(lo..=hi).contains(&(pos.0 + dx)) {
            dx = -dx;
        }
        if !(lo..=hi).contains(&(pos.1 + dy)) {
            dy = -dy;
        }
        theta = dy.atan2(dx);
        pos = ((pos.0 + dx).clamp(lo, hi), (pos.1 + dy).clamp(lo, hi));
        path.push(pos);
    }
    path
}

/// Render one sequence; a pure function of `cfg`.
pub fn generate_sequence(cfg: &SimConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.image_size;
    let n = s * s;
    let radius = rng.gen_range(cfg.radius_min..=cfg.radius_max);

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.6));
    let tilt: (f64, f64) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    let mut background = vec![0.0; CHANNELS * n];
    for c in 0..CHANNELS {
        for i in 0..s {
            for j in 0..s {
                let v = base[c] + tilt.0 * (j as f64 / s as f64 - 0.5) + tilt.1 * (i as f64 / s as f64 - 0.5);
                background[c * n + i * s + j] = v;
            }
        }
    }
    for _ in 0..cfg.clutter {
        let side = rng.gen_range(2..=4usize);
        let (x0, y0) = (rng.gen_range(0..=s - side), rng.gen_range(0..=s - side));
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        for c in 0..CHANNELS {
            for i in y0..y0 + side {
                for j in x0..x0 + side {
                    background[c * n + i * s + j] = color[c];
                }
            }
        }
    }
    // keep the target clearly separated from the mean background color
    let target_color: [f64; 3] = std::array::from_fn(|c| {
        let up = rng.gen::<bool>();
        if up {
            (base[c] + rng.gen_range(0.35..0.5)).min(1.0)
        } else {
            (base[c] - rng.gen_range(0.15..0.3)).max(0.0)
        }
    });
    let ground: Vec<f64> = (0..n).map(|p| 0.4 + 0.5 * (p / s) as f64 / s as f64).collect();
    let scene = Scene { size: s, radius, target_color, background, ground };

    let path = trajectory(cfg, radius, &mut rng);
    let mut clean = Vec::with_capacity(cfg.frames + 1);
    let mut covs = Vec::with_capacity(cfg.frames + 1);
    for t in 0..=cfg.frames {
        let prev = path[t.saturating_sub(1)];
        let cov = scene.coverage(&blur_path(prev, path[t]));
        clean.push(scene.render_rgb(&cov));
        covs.push(cov);
    }

    let mut rgb = Vec::with_capacity(cfg.frames * CHANNELS * n);
    let mut x = Vec::with_capacity(cfg.frames * CHANNELS * n);
    for t in 1..=cfg.frames {
        let mut frame = clean[t].clone();
        add_noise(&mut frame, cfg.noise, &mut rng);
        rgb.extend(frame);

        let cov = &covs[t];
        let plane: Option<Vec<f64>> = match cfg.modality {
            Modality::Rgb => None,
            Modality::Thermal => Some(cov.iter().map(|&c| if c >= 0.5 { 0.1 } else { 0.85 }).collect()),
            Modality::Depth | Modality::HeldOut => {
                let r = scene.radial(path[t]);
                let d: Vec<f64> = (0..n)
                    .map(|p| cov[p] * (0.05 + 0.3 * r[p]) + (1.0 - cov[p]) * scene.ground[p])
                    .collect();
                Some(if cfg.modality == Modality::HeldOut { d.iter().map(|v| 1.0 - v).collect() } else { d })
            }
            Modality::Event => {
                let (g1, g0) = (gray(&clean[t], n), gray(&clean[t - 1], n));
                Some(g1.iter().zip(&g0).map(|(a, b)| (3.0 * (a - b).abs()).min(1.0)).collect())
            }
        };
        if let Some(plane) = plane {
            let mut xf = replicate(&plane);
            add_noise(&mut xf, cfg.noise, &mut rng);
            x.extend(xf);
        }
    }

    let shape = vec![cfg.frames, CHANNELS, s, s];
    let sf = s as f64;
    let boxes = path[1..]
        .iter()
        .map(|&(cx, cy)| Bbox::new(cx / sf, cy / sf, 2.0 * radius / sf, 2.0 * radius / sf))
        .collect();
    Ok(SyntheticSequence {
        rgb: Tensor::from_parts(shape.clone(), rgb),
        x: if x.is_empty() { None } else { Some(Tensor::from_parts(shape, x)) },
        boxes,
        modality: cfg.modality,
        speed: cfg.speed,
        seed: cfg.seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Missing {
    Rgb,
    X,
}

impl FromStr for Missing {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Missing::Rgb),
            "x" => Ok(Missing::X),
            _ => Err(config_err!("unknown modality to drop {s:?}")),
        }
    }
}

/// Replace one stream with zeros. Dropping X from an RGB-only sequence leaves an
/// explicit all-zero X stream instead of the RGB stand-in.
pub fn corrupt_missing(seq: &SyntheticSequence, which: Missing) -> SyntheticSequence {
    let mut out = seq.clone();
    let zeros = Tensor::zeros(seq.rgb.shape());
    match which {
        Missing::Rgb => out.rgb = zeros,
        Missing::X => out.x = Some(zeros),
    }
    out
}

/// Speed level of a sequence from its mean center displacement.
pub fn motion_bin(seq: &SyntheticSequence) -> Result<SpeedLevel> {
    let centers = seq.centers_px();
    if centers.len() < 2 {
        return Err(validation_err!("motion binning needs at least two frames, got {}", centers.len()));
    }
    Ok(SpeedLevel::from_displacement(mean_displacement(&centers)))
}

pub fn mean_displacement(centers: &[(f64, f64)]) -> f64 {
    let total: f64 = centers
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .sum();
    total / (centers.len() - 1) as f64
}

/// Square crop of a `[C, H, W]` frame with top-left corner `(x0, y0)`, zero-padded.
pub fn crop(frame: &[f64], channels: usize, size_in: usize, x0: i64, y0: i64, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels * size * size];
    let n_in = size_in * size_in;
    for c in 0..channels {
        for i in 0..size {
            let yi = y0 + i as i64;
            if yi < 0 || yi >= size_in as i64 {
                continue;
            }
            for j in 0..size {
                let xj = x0 + j as i64;
                if xj < 0 || xj >= size_in as i64 {
                    continue;
                }
                out[c * size * size + i * size + j] = frame[c * n_in + yi as usize * size_in + xj as usize];
            }
        }
    }
    out
}

/// Top-left corner of a `size` crop centered on a pixel position.
pub fn crop_origin(cx: f64, cy: f64, size: usize) -> (i64, i64) {
    let half = size as f64 / 2.0;
    ((cx - half).round() as i64, (cy - half).round() as i64)
}

fn write_f32(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Write `rgb.f32`, `x.f32` (when present), `boxes.f32` and `manifest.txt` into `dir`.
pub fn export_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_f32(&dir.join("rgb.f32"), seq.rgb.data())?;
    if let Some(x) = &seq.x {
        write_f32(&dir.join("x.f32"), x.data())?;
    }
    let boxes: Vec<f64> = seq.boxes.iter().flat_map(|b| b.to_array()).collect();
    write_f32(&dir.join("boxes.f32"), &boxes)?;
    let s = seq.rgb.shape();
    let mut m = std::fs::File::create(dir.join("manifest.txt"))?;
    writeln!(m, "seed = {}", seq.seed)?;
    writeln!(m, "modality = {}", seq.modality)?;
    writeln!(m, "speed = {}", seq.speed)?;
    writeln!(m, "frames = {}", s[0])?;
    writeln!(m, "channels = {}", s[1])?;
    writeln!(m, "height = {}", s[2])?;
    writeln!(m, "width = {}", s[3])?;
    writeln!(m, "rgb = rgb.f32 f32le [{}, {}, {}, {}]", s[0], s[1], s[2], s[3])?;
    if seq.x.is_some() {
        writeln!(m, "x = x.f32 f32le [{}, {}, {}, {}]", s[0], s[1], s[2], s[3])?;
    }
    writeln!(m, "boxes = boxes.f32 f32le [{}, 4] cx cy w h normalized", s[0])?;
    Ok(())
}
