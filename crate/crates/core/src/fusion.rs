//! Multimodal fusion front end.
//!
//! RGB and auxiliary (X) images go through one shared patch embedding, are
//! each sharpened by spatial and channel attention, and are then folded into a
//! learnable meta embedding by three convolutions:
//!
//! ```text
//! F'    = F ⊙ σ(conv(avg_c F) + conv(max_c F)) ⊙ σ(mlp(avg_s F) + mlp(max_s F)) + F
//! out   = conv_o( conv_a(meta + F'_rgb) + conv_b(meta + F'_x) + meta )
//! ```
//!
//! `avg_c`/`max_c` pool over channels (one-channel spatial maps), `avg_s`/`max_s`
//! pool over the grid (one scalar per channel).

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{config_err, shape_err, Result};
use crate::params::{Bound, ParamId, ParamStore};
use rand::Rng;

/// Shared patch embedding: a linear map of each non-overlapping `patch × patch`
/// block to a `dim`-vector, laid out as a `[B, dim, H/patch, W/patch]` feature map.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub weight: ParamId,
    pub bias: ParamId,
    pub patch: usize,
    pub in_channels: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_channels: usize, patch: usize, dim: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * patch * patch;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[dim, fan_in], 1.0 / (fan_in as f64).sqrt(), rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { weight, bias, patch, in_channels, dim }
    }

    /// `image: [B, C_img, H, W]` → `[B, dim, H/patch, W/patch]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(shape_err!(
                "patch embedding expects [B, {}, H, W], got {:?}",
                self.in_channels,
                s
            ));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let pt = self.patch;
        if h % pt != 0 || w % pt != 0 {
            return Err(config_err!("image size {h}x{w} is not divisible by patch size {pt}"));
        }
        let (gh, gw) = (h / pt, w / pt);
        let x = g.reshape(image, &[b, c, gh, pt, gw, pt])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = g.reshape(x, &[b * gh * gw, c * pt * pt])?;
        let y = g.linear(x, p[self.weight], Some(p[self.bias]))?;
        let y = g.reshape(y, &[b, gh, gw, self.dim])?;
        g.permute(y, &[0, 3, 1, 2])
    }
}

/// Spatial + channel attention with a residual connection.
#[derive(Clone, Debug)]
pub struct Enhance {
    pub spatial_w: ParamId,
    pub spatial_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl Enhance {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        spatial_kernel: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = (channels / reduction).max(1);
        let k2 = (spatial_kernel * spatial_kernel) as f64;
        Self {
            spatial_w: store.add(
                format!("{name}.spatial.weight"),
                Tensor::randn(&[1, 1, spatial_kernel, spatial_kernel], 1.0 / k2.sqrt(), rng),
            ),
            spatial_b: store.add(format!("{name}.spatial.bias"), Tensor::zeros(&[1])),
            fc1_w: store.add(
                format!("{name}.fc1.weight"),
                Tensor::randn(&[hidden, channels], 1.0 / (channels as f64).sqrt(), rng),
            ),
            fc1_b: store.add(format!("{name}.fc1.bias"), Tensor::zeros(&[hidden])),
            fc2_w: store.add(
                format!("{name}.fc2.weight"),
                Tensor::randn(&[channels, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            ),
            fc2_b: store.add(format!("{name}.fc2.bias"), Tensor::zeros(&[channels])),
        }
    }

    fn mlp(&self, g: &mut Graph, p: &Bound, v: Var) -> Result<Var> {
        let h = g.linear(v, p[self.fc1_w], Some(p[self.fc1_b]))?;
        let h = g.relu(h);
        g.linear(h, p[self.fc2_w], Some(p[self.fc2_b]))
    }

    /// Attention weights `(spatial [B,1,H,W], channel [B,C,1,1])`.
    pub fn weights(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<(Var, Var)> {
        let s = g.shape(f).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("enhance expects [B, C, H, W], got {:?}", s));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);

        let avg_c = g.mean_axis(f, 1)?;
        let max_c = g.max_axis(f, 1)?;
        let sa = g.conv2d(avg_c, p[self.spatial_w], p[self.spatial_b])?;
        let sm = g.conv2d(max_c, p[self.spatial_w], p[self.spatial_b])?;
        let spatial = g.add(sa, sm)?;
        let spatial = g.sigmoid(spatial);

        let flat = g.reshape(f, &[b, c, h * w])?;
        let avg_s = g.mean_axis(flat, 2)?;
        let avg_s = g.reshape(avg_s, &[b, c])?;
        let max_s = g.max_axis(flat, 2)?;
        let max_s = g.reshape(max_s, &[b, c])?;
        let ca = self.mlp(g, p, avg_s)?;
        let cm = self.mlp(g, p, max_s)?;
        let channel = g.add(ca, cm)?;
        let channel = g.sigmoid(channel);
        let channel = g.reshape(channel, &[b, c, 1, 1])?;
        Ok((spatial, channel))
    }

    /// `F ⊙ W_spatial ⊙ W_channel + F`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        let (spatial, channel) = self.weights(g, p, f)?;
        let y = g.mul(f, spatial)?;
        let y = g.mul(y, channel)?;
        g.add(y, f)
    }
}

/// A same-padded convolution layer.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::randn(&[cout, cin, kernel, kernel], 1.0 / fan_in.sqrt(), rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], p[self.bias])
    }
}

/// The three convolutions that fold both modalities into a meta embedding.
#[derive(Clone, Debug)]
pub struct Merge {
    pub conv_rgb: Conv,
    pub conv_x: Conv,
    pub conv_out: Conv,
}

impl Merge {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            conv_rgb: Conv::new(store, &format!("{name}.conv_rgb"), channels, channels, kernel, rng),
            conv_x: Conv::new(store, &format!("{name}.conv_x"), channels, channels, kernel, rng),
            conv_out: Conv::new(store, &format!("{name}.conv_out"), channels, channels, kernel, rng),
        }
    }

    /// `conv_out(conv_rgb(meta + rgb) + conv_x(meta + x) + meta)`; `meta: [C, H, W]`
    /// is broadcast over the batch of `rgb, x: [B, C, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, rgb: Var, x: Var, meta: Var) -> Result<Var> {
        let (rs, xs, ms) = (g.shape(rgb).to_vec(), g.shape(x).to_vec(), g.shape(meta).to_vec());
        if rs != xs || rs.len() != 4 || ms.as_slice() != &rs[1..] {
            return Err(shape_err!(
                "merge shapes disagree: rgb {:?}, x {:?}, meta {:?}",
                rs,
                xs,
                ms
            ));
        }
        let a = g.add(rgb, meta)?;
        let a = self.conv_rgb.forward(g, p, a)?;
        let b = g.add(x, meta)?;
        let b = self.conv_x.forward(g, p, b)?;
        let s = g.add(a, b)?;
        let s = g.add(s, meta)?;
        self.conv_out.forward(g, p, s)
    }
}

/// Which image region a meta embedding belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Template,
    Search,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub image_channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub spatial_kernel: usize,
    pub channel_reduction: usize,
    pub merge_kernel: usize,
    pub template_grid: usize,
    pub search_grid: usize,
    pub meta_init_std: f64,
}

/// Patch embedding, per-modality enhancement, and meta-embedding merge.
#[derive(Clone, Debug)]
pub struct MetaMerger {
    pub embed: PatchEmbed,
    pub enhance_rgb: Enhance,
    pub enhance_x: Enhance,
    pub merge: Merge,
    pub meta_template: ParamId,
    pub meta_search: ParamId,
}

impl MetaMerger {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let (tg, sg) = (cfg.template_grid, cfg.search_grid);
        Self {
            embed: PatchEmbed::new(store, &format!("{name}.embed"), cfg.image_channels, cfg.patch, d, rng),
            enhance_rgb: Enhance::new(
                store,
                &format!("{name}.enhance_rgb"),
                d,
                cfg.spatial_kernel,
                cfg.channel_reduction,
                rng,
            ),
            enhance_x: Enhance::new(
                store,
                &format!("{name}.enhance_x"),
                d,
                cfg.spatial_kernel,
                cfg.channel_reduction,
                rng,
            ),
            merge: Merge::new(store, &format!("{name}.merge"), d, cfg.merge_kernel, rng),
            meta_template: store.add(
                format!("{name}.meta_template"),
                Tensor::randn(&[d, tg, tg], cfg.meta_init_std, rng),
            ),
            meta_search: store.add(
                format!("{name}.meta_search"),
                Tensor::randn(&[d, sg, sg], cfg.meta_init_std, rng),
            ),
        }
    }

    /// Fuse one region: both images `[B, C_img, H, W]` → `[B, dim, H/p, W/p]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, rgb: Var, x: Var, region: Region) -> Result<Var> {
        let f_rgb = self.embed.forward(g, p, rgb)?;
        let f_x = self.embed.forward(g, p, x)?;
        let e_rgb = self.enhance_rgb.forward(g, p, f_rgb)?;
        let e_x = self.enhance_x.forward(g, p, f_x)?;
        let meta = match region {
            Region::Template => p[self.meta_template],
            Region::Search => p[self.meta_search],
        };
        self.merge.forward(g, p, e_rgb, e_x, meta)
    }
}

/// For RGB-only tasks the RGB image stands in for the missing X image.
pub fn substitute_rgb_only(rgb: Tensor, x: Option<Tensor>) -> (Tensor, Tensor) {
    match x {
        Some(x) => (rgb, x),
        None => {
            let copy = rgb.clone();
            (rgb, copy)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationConfig {
    pub p_swap: f64,
    pub p_mask: f64,
    pub mask_value: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self { p_swap: 0.1, p_mask: 0.1, mask_value: 0.0 }
    }
}

impl PerturbationConfig {
    pub fn disabled() -> Self {
        Self { p_swap: 0.0, p_mask: 0.0, mask_value: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p_swap", self.p_swap), ("p_mask", self.p_mask)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err!("{name} = {v} is not a probability"));
            }
        }
        if !self.mask_value.is_finite() {
            return Err(config_err!("mask_value must be finite"));
        }
        Ok(())
    }
}

/// What [`Perturbation::draw`] decided for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    None,
    Swap,
    MaskRgb,
    MaskX,
}

impl Perturbation {
    /// Swap with probability `p_swap`; otherwise mask one input (fair coin) with
    /// probability `p_mask`.
    pub fn draw<R: Rng>(rng: &mut R, cfg: &PerturbationConfig) -> Self {
        if rng.gen::<f64>() < cfg.p_swap {
            return Perturbation::Swap;
        }
        if rng.gen::<f64>() < cfg.p_mask {
            return if rng.gen::<bool>() { Perturbation::MaskRgb } else { Perturbation::MaskX };
        }
        Perturbation::None
    }

    /// Apply this action to an `(rgb, x)` pair.
    pub fn apply(self, rgb: Tensor, x: Tensor, mask_value: f64) -> (Tensor, Tensor) {
        let masked = |t: &Tensor| Tensor::full(t.shape(), mask_value);
        match self {
            Perturbation::None => (rgb, x),
            Perturbation::Swap => (x, rgb),
            Perturbation::MaskRgb => (masked(&rgb), x),
            Perturbation::MaskX => {
                let m = masked(&x);
                (rgb, m)
            }
        }
    }
}

/// Draw one action and apply it; returns the perturbed pair and the action taken.
pub fn perturb<R: Rng>(rgb: Tensor, x: Tensor, rng: &mut R, cfg: &PerturbationConfig) -> (Tensor, Tensor, Perturbation) {
    let action = Perturbation::draw(rng, cfg);
    let (a, b) = action.apply(rgb, x, cfg.mask_value);
    (a, b, action)
}
