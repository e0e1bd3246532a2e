//! One-stream tracker: fused template and search tokens go through a stack of
//! encoder blocks whose feed-forward stage is a [`DMoELayer`], then a center
//! score head and a box head read the search tokens.

use crate::autodiff::{Graph, Tensor, Var};
use crate::dmoe::{
    balance_loss_graph, cluster_loss_graph, dissimilarity_loss_graph, sample_distributions, DMoEConfig,
    DMoEGraphOutput, DMoELayer,
};
use crate::error::{config_err, shape_err, validation_err, Error, Result};
use crate::fusion::{FusionConfig, MetaMerger, Region};
use crate::params::{Bound, ParamId, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FOCAL_GAMMA: f64 = 2.0;
/// Exponent of the negative-cell down-weighting near the target peak.
pub const FOCAL_BETA: f64 = 4.0;
pub const LN_EPS: f64 = 1e-5;
pub const TEMPLATE_UPDATE_PERIOD: usize = 25;
pub const TEMPLATE_UPDATE_THRESHOLD: f64 = 0.7;
/// Width of the Gaussian center target, in grid cells.
pub const CENTER_SIGMA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub experts: usize,
    pub top_k: usize,
    pub rank: usize,
    pub ffn_mult: usize,
    pub spatial_kernel: usize,
    pub channel_reduction: usize,
    pub merge_kernel: usize,
    pub meta_init_std: f64,
    pub tasks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            patch: 8,
            dim: 32,
            heads: 2,
            blocks: 2,
            template_size: 16,
            search_size: 32,
            experts: 8,
            top_k: 2,
            rank: 16,
            ffn_mult: 4,
            spatial_kernel: 7,
            channel_reduction: 4,
            merge_kernel: 3,
            meta_init_std: 0.02,
            tasks: 4,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration that still exercises every mechanism.
    pub fn tiny() -> Self {
        Self {
            patch: 4,
            dim: 16,
            heads: 2,
            blocks: 1,
            template_size: 8,
            search_size: 8,
            experts: 4,
            rank: 4,
            spatial_kernel: 3,
            ..Self::default()
        }
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.template_size % self.patch != 0 || self.search_size % self.patch != 0 {
            return Err(config_err!(
                "template {} and search {} sizes must be multiples of the patch size {}",
                self.template_size,
                self.search_size,
                self.patch
            ));
        }
        if self.template_size == 0 || self.search_size == 0 {
            return Err(config_err!("region sizes must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(config_err!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.blocks == 0 || self.tasks == 0 || self.image_channels == 0 || self.ffn_mult == 0 {
            return Err(config_err!("blocks, tasks, channels and ffn_mult must be positive"));
        }
        if self.spatial_kernel % 2 == 0 || self.merge_kernel % 2 == 0 {
            return Err(config_err!("convolution kernels must have odd size"));
        }
        if self.channel_reduction == 0 {
            return Err(config_err!("channel_reduction must be positive"));
        }
        self.dmoe().validate()
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            image_channels: self.image_channels,
            patch: self.patch,
            dim: self.dim,
            spatial_kernel: self.spatial_kernel,
            channel_reduction: self.channel_reduction,
            merge_kernel: self.merge_kernel,
            template_grid: self.template_grid(),
            search_grid: self.search_grid(),
            meta_init_std: self.meta_init_std,
        }
    }

    pub fn dmoe(&self) -> DMoEConfig {
        DMoEConfig {
            dim: self.dim,
            experts: self.experts,
            top_k: self.top_k,
            rank: self.rank,
            ffn_mult: self.ffn_mult,
        }
    }
}

/// Axis-aligned box in center form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bbox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Bbox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { cx: (x1 + x2) / 2.0, cy: (y1 + y2) / 2.0, w: x2 - x1, h: y2 - y1 }
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Plain intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &Bbox) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        // areas from the same corners as the overlap, so identical boxes score exactly 1
        let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub giou: f64,
    pub l1: f64,
    pub dis: f64,
    pub cluster: f64,
    pub balance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { giou: 2.0, l1: 5.0, dis: 0.1, cluster: 1.0, balance: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("giou", self.giou),
            ("l1", self.l1),
            ("dis", self.dis),
            ("cluster", self.cluster),
            ("balance", self.balance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("loss weight {name} = {v} must be a finite non-negative number"));
            }
        }
        Ok(())
    }

    /// Coefficients in [`LossComponents::NAMES`] order.
    pub fn coefficients(&self) -> [f64; 7] {
        [1.0, self.giou, self.l1, 1.0, self.dis, self.cluster, self.balance]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub class: f64,
    pub iou: f64,
    pub l1: f64,
    pub task: f64,
    pub dis: f64,
    pub cluster: f64,
    pub balance: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 7] = ["class", "iou", "l1", "task", "dis", "cluster", "balance"];

    pub fn to_array(&self) -> [f64; 7] {
        [self.class, self.iou, self.l1, self.task, self.dis, self.cluster, self.balance]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self { class: v[0], iou: v[1], l1: v[2], task: v[3], dis: v[4], cluster: v[5], balance: v[6] }
    }
}

/// Weighted sum of the objective's components.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    let values = c.to_array();
    for (name, v) in LossComponents::NAMES.iter().zip(values) {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss component {name} is {v}")));
        }
    }
    Ok(values.iter().zip(w.coefficients()).map(|(v, c)| v * c).sum())
}

fn focal_term_prob(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if y >= 1.0 {
        -(1.0 - p).powf(FOCAL_GAMMA) * p.ln()
    } else {
        -(1.0 - y).powf(FOCAL_BETA) * p.powf(FOCAL_GAMMA) * (1.0 - p).ln()
    }
}

/// Focal binary cross-entropy between a probability map and its heatmap target,
/// averaged over cells. Only cells at exactly 1 count as positives.
pub fn classification_loss(score_map: &[f64], gt_map: &[f64]) -> Result<f64> {
    if score_map.len() != gt_map.len() || score_map.is_empty() {
        return Err(shape_err!("score map has {} cells, target {}", score_map.len(), gt_map.len()));
    }
    Ok(score_map
        .iter()
        .zip(gt_map)
        .map(|(&p, &y)| focal_term_prob(p, y))
        .sum::<f64>()
        / score_map.len() as f64)
}

/// `1 − GIoU(pred, gt)`.
pub fn iou_loss(pred: &Bbox, gt: &Bbox) -> Result<f64> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(validation_err!("ground-truth box {:?} has no area", gt));
    }
    let [px1, py1, px2, py2] = pred.corners();
    let [gx1, gy1, gx2, gy2] = gt.corners();
    let iw = (px2.min(gx2) - px1.max(gx1)).max(0.0);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let union = pred.area() + gt.area() - inter;
    let enclose = (px2.max(gx2) - px1.min(gx1)) * (py2.max(gy2) - py1.min(gy1));
    let giou = inter / union - (enclose - union) / enclose;
    Ok(1.0 - giou)
}

pub fn l1_loss(pred: &Bbox, gt: &Bbox) -> f64 {
    pred.to_array().iter().zip(gt.to_array()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0
}

pub fn task_loss(logits: &[f64], task: usize) -> Result<f64> {
    if task >= logits.len() {
        return Err(validation_err!("task id {task} out of range for {} tasks", logits.len()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[task])
}

/// Mean `1 − GIoU` between predicted boxes `[B, 4]` (center form) and constant targets.
pub fn giou_loss_graph(g: &mut Graph, pred: Var, gt: &[Bbox]) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    if s != [gt.len(), 4] {
        return Err(shape_err!("predicted boxes {:?} vs {} targets", s, gt.len()));
    }
    if let Some(bad) = gt.iter().find(|b| !(b.w > 0.0 && b.h > 0.0)) {
        return Err(validation_err!("ground-truth box {:?} has no area", bad));
    }
    let b = gt.len();
    let col = |g: &mut Graph, i| g.narrow(pred, 1, i, 1);
    let (cx, cy, w, h) = (col(g, 0)?, col(g, 1)?, col(g, 2)?, col(g, 3)?);
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let px1 = g.sub(cx, hw)?;
    let px2 = g.add(cx, hw)?;
    let py1 = g.sub(cy, hh)?;
    let py2 = g.add(cy, hh)?;
    let gcol = |g: &mut Graph, f: &dyn Fn(&Bbox) -> f64| {
        g.constant(Tensor::from_parts(vec![b, 1], gt.iter().map(f).collect()))
    };
    let gx1 = gcol(g, &|b| b.corners()[0]);
    let gy1 = gcol(g, &|b| b.corners()[1]);
    let gx2 = gcol(g, &|b| b.corners()[2]);
    let gy2 = gcol(g, &|b| b.corners()[3]);
    let garea = gcol(g, &|b| b.area());

    let ix2 = g.minimum(px2, gx2)?;
    let ix1 = g.maximum(px1, gx1)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let iy2 = g.minimum(py2, gy2)?;
    let iy1 = g.maximum(py1, gy1)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let parea = g.mul(w, h)?;
    let union = g.add(parea, garea)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;

    let ex2 = g.maximum(px2, gx2)?;
    let ex1 = g.minimum(px1, gx1)?;
    let ew = g.sub(ex2, ex1)?;
    let ey2 = g.maximum(py2, gy2)?;
    let ey1 = g.minimum(py1, gy1)?;
    let eh = g.sub(ey2, ey1)?;
    let enclose = g.mul(ew, eh)?;
    let slack = g.sub(enclose, union)?;
    let slack = g.div(slack, enclose)?;
    let giou = g.sub(iou, slack)?;
    let loss = g.scale(giou, -1.0);
    let loss = g.add_scalar(loss, 1.0);
    Ok(g.mean_all(loss))
}

/// Mean absolute coordinate difference between `[B, 4]` predictions and targets.
pub fn l1_loss_graph(g: &mut Graph, pred: Var, gt: &[Bbox]) -> Result<Var> {
    let t = g.constant(Tensor::from_parts(
        vec![gt.len(), 4],
        gt.iter().flat_map(|b| b.to_array()).collect(),
    ));
    let d = g.sub(pred, t)?;
    let d = g.abs(d);
    Ok(g.mean_all(d))
}

/// Symmetric Hanning window of length `n`; `[1]` for `n = 1`.
pub fn hanning(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Outer product of two Hanning windows, row-major `h × w`.
pub fn hanning_window(h: usize, w: usize) -> Vec<f64> {
    let (a, b) = (hanning(h), hanning(w));
    a.iter().flat_map(|y| b.iter().map(move |x| y * x)).collect()
}

/// Pick the cell maximizing `score · window` (first on ties) and return it with its box.
pub fn predict_box(score_map: &[f64], boxes: &[Bbox], window: &[f64]) -> Result<(usize, Bbox)> {
    if score_map.len() != window.len() || boxes.len() != score_map.len() || score_map.is_empty() {
        return Err(shape_err!(
            "score map {} cells, window {}, boxes {}",
            score_map.len(),
            window.len(),
            boxes.len()
        ));
    }
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (s, w)) in score_map.iter().zip(window).enumerate() {
        let v = s * w;
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    let mut b = boxes[best];
    b.w = b.w.max(1e-6);
    b.h = b.h.max(1e-6);
    Ok((best, b))
}

/// The template is refreshed on every `period`-th frame when the tracker is
/// confident enough.
pub fn maybe_update_template(frame_idx: usize, confidence: f64, threshold: f64, period: usize) -> bool {
    frame_idx > 0 && period > 0 && frame_idx % period == 0 && confidence > threshold
}

/// Gaussian bump on a `grid × grid` map, peaking at exactly 1 on the cell that
/// contains the normalized position.
pub fn center_target(grid: usize, cx: f64, cy: f64, sigma_cells: f64) -> Vec<f64> {
    let peak = cell_of(grid, cx, cy);
    let (pr, pc) = ((peak / grid) as f64, (peak % grid) as f64);
    let mut out = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let dx = j as f64 - pc;
            let dy = i as f64 - pr;
            out.push((-(dx * dx + dy * dy) / (2.0 * sigma_cells * sigma_cells)).exp());
        }
    }
    out
}

/// Grid cell containing a normalized position, clamped to the grid.
pub fn cell_of(grid: usize, cx: f64, cy: f64) -> usize {
    let clamp = |v: f64| ((v * grid as f64).floor().max(0.0) as usize).min(grid - 1);
    clamp(cy) * grid + clamp(cx)
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub heads: usize,
}

impl Attention {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            qkv_w: store.add(format!("{name}.qkv.weight"), Tensor::randn(&[3 * dim, dim], std, rng)),
            qkv_b: store.add(format!("{name}.qkv.bias"), Tensor::zeros(&[3 * dim])),
            out_w: store.add(format!("{name}.out.weight"), Tensor::randn(&[dim, dim], std, rng)),
            out_b: store.add(format!("{name}.out.bias"), Tensor::zeros(&[dim])),
            heads,
        }
    }

    /// `x: [B, N, d]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let qkv = g.linear(x, p[self.qkv_w], Some(p[self.qkv_b]))?;
        let qkv = g.reshape(qkv, &[b, n, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let t = g.narrow(qkv, 0, i, 1)?;
            parts.push(g.reshape(t, &[b * h, n, dh])?);
        }
        let att = g.bmm(parts[0], parts[1], true)?;
        let att = g.scale(att, 1.0 / (dh as f64).sqrt());
        let att = g.softmax(att)?;
        let y = g.bmm(att, parts[2], false)?;
        let y = g.reshape(y, &[b, h, n, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b, n, d])?;
        g.linear(y, p[self.out_w], Some(p[self.out_b]))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: Attention,
    pub moe: DMoELayer,
}

impl EncoderBlock {
    /// `x: [B, N, d]`. With `experts = false` only the shared feed-forward runs.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        experts: bool,
    ) -> Result<(Var, Option<DMoEGraphOutput>)> {
        let s = g.shape(x).to_vec();
        let h = g.layer_norm(x, LN_EPS);
        let a = self.attn.forward(g, p, h)?;
        let x = g.add(x, a)?;
        let h = g.layer_norm(x, LN_EPS);
        let h = g.reshape(h, &[s[0] * s[1], s[2]])?;
        let (f, aux) = if experts {
            let out = self.moe.forward(g, p, h)?;
            (out.y, Some(out))
        } else {
            (self.moe.shared.forward(g, p, h)?, None)
        };
        let f = g.reshape(f, &s)?;
        Ok((g.add(x, f)?, aux))
    }
}

/// Two-layer MLP head with GELU.
#[derive(Clone, Debug)]
pub struct Head {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Head {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, out: usize, bias: f64, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            w1: store.add(format!("{name}.w1"), Tensor::randn(&[dim, dim], std, rng)),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[dim])),
            w2: store.add(format!("{name}.w2"), Tensor::randn(&[out, dim], 0.1 * std, rng)),
            b2: store.add(format!("{name}.b2"), Tensor::full(&[out], bias)),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.linear(x, p[self.w1], Some(p[self.b1]))?;
        let h = g.gelu(h);
        g.linear(h, p[self.w2], Some(p[self.b2]))
    }
}

/// Template and search image pairs for a batch, all `[B, C, S, S]`.
#[derive(Clone, Debug)]
pub struct TrackInputs {
    pub template_rgb: Tensor,
    pub template_x: Tensor,
    pub search_rgb: Tensor,
    pub search_x: Tensor,
}

impl TrackInputs {
    pub fn batch(&self) -> usize {
        self.search_rgb.shape()[0]
    }
}

/// Supervision for one batch: boxes normalized to the search crop, task ids.
#[derive(Clone, Debug)]
pub struct TrackTargets {
    pub boxes: Vec<Bbox>,
    pub tasks: Vec<usize>,
}

pub struct ForwardOutput {
    /// `[B, S]` center logits.
    pub score_logits: Var,
    /// `[B, S, 4]` decoded boxes, center form, normalized to the search crop.
    pub boxes: Var,
    /// `[B, T]`.
    pub task_logits: Var,
    /// One entry per block when experts are active.
    pub layers: Vec<DMoEGraphOutput>,
}

pub struct Objective {
    pub total: Var,
    /// In [`LossComponents::NAMES`] order.
    pub components: [Var; 7],
    pub output: ForwardOutput,
}

impl Objective {
    pub fn values(&self, g: &Graph) -> LossComponents {
        LossComponents::from_array(self.components.map(|v| g.value(v).item()))
    }
}

/// Plain values read out of one forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[B, S]` probabilities.
    pub scores: Tensor,
    /// `[B, S, 4]`.
    pub boxes: Tensor,
    /// `[B, T]`.
    pub task_logits: Tensor,
    /// Per block: selected T experts, `k` per token, tokens in `[B, N]` order.
    pub t_selected: Vec<Vec<usize>>,
    pub m_selected: Vec<Vec<usize>>,
    /// Per block `[B·N, K]` gate distributions.
    pub t_probs: Vec<Tensor>,
    pub m_probs: Vec<Tensor>,
}

impl Inference {
    pub fn sample_boxes(&self, b: usize) -> Vec<Bbox> {
        let s = self.scores.shape()[1];
        self.boxes.data()[b * s * 4..(b + 1) * s * 4]
            .chunks(4)
            .map(|c| Bbox::new(c[0], c[1], c[2], c[3]))
            .collect()
    }

    pub fn sample_scores(&self, b: usize) -> &[f64] {
        let s = self.scores.shape()[1];
        &self.scores.data()[b * s..(b + 1) * s]
    }
}

#[derive(Clone, Debug)]
pub struct TrackerModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub merger: MetaMerger,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub score_head: Head,
    pub box_head: Head,
    pub task_w: ParamId,
    pub task_b: ParamId,
}

impl TrackerModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let merger = MetaMerger::new(&mut store, "fusion", &cfg.fusion(), &mut rng);
        let pos_template = store.add("pos.template", Tensor::randn(&[cfg.template_tokens(), d], 0.02, &mut rng));
        let pos_search = store.add("pos.search", Tensor::randn(&[cfg.search_tokens(), d], 0.02, &mut rng));
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            blocks.push(EncoderBlock {
                attn: Attention::new(&mut store, &format!("block{i}.attn"), d, cfg.heads, &mut rng),
                moe: DMoELayer::new(&mut store, &format!("block{i}.moe"), &cfg.dmoe(), &mut rng)?,
            });
        }
        let score_head = Head::new(&mut store, "head.score", d, 1, -2.0, &mut rng);
        let box_head = Head::new(&mut store, "head.box", d, 4, 0.0, &mut rng);
        let task_w = store.add("head.task.weight", Tensor::randn(&[cfg.tasks, d], 0.1 / (d as f64).sqrt(), &mut rng));
        let task_b = store.add("head.task.bias", Tensor::zeros(&[cfg.tasks]));
        Ok(Self {
            cfg,
            params: store,
            merger,
            pos_template,
            pos_search,
            blocks,
            score_head,
            box_head,
            task_w,
            task_b,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    fn check_inputs(&self, inputs: &TrackInputs) -> Result<usize> {
        let c = &self.cfg;
        let b = inputs.batch();
        let want = |size: usize| vec![b, c.image_channels, size, size];
        for (name, t, size) in [
            ("template rgb", &inputs.template_rgb, c.template_size),
            ("template x", &inputs.template_x, c.template_size),
            ("search rgb", &inputs.search_rgb, c.search_size),
            ("search x", &inputs.search_x, c.search_size),
        ] {
            if t.shape() != want(size).as_slice() {
                return Err(config_err!("{name} has shape {:?}, expected {:?}", t.shape(), want(size)));
            }
        }
        Ok(b)
    }

    fn tokens(&self, g: &mut Graph, p: &Bound, rgb: Var, x: Var, region: Region) -> Result<Var> {
        let f = self.merger.forward(g, p, rgb, x, region)?;
        let s = g.shape(f).to_vec();
        let (b, d, n) = (s[0], s[1], s[2] * s[3]);
        let t = g.reshape(f, &[b, d, n])?;
        let t = g.permute(t, &[0, 2, 1])?;
        let pos = match region {
            Region::Template => p[self.pos_template],
            Region::Search => p[self.pos_search],
        };
        g.add(t, pos)
    }

    /// Full forward pass. With `experts = false` both expert banks are skipped and
    /// the blocks reduce to a plain transformer.
    pub fn forward_with(&self, g: &mut Graph, p: &Bound, inputs: &TrackInputs, experts: bool) -> Result<ForwardOutput> {
        let b = self.check_inputs(inputs)?;
        let c = &self.cfg;
        let (nt, ns, d) = (c.template_tokens(), c.search_tokens(), c.dim);
        let trgb = g.constant(inputs.template_rgb.clone());
        let tx = g.constant(inputs.template_x.clone());
        let srgb = g.constant(inputs.search_rgb.clone());
        let sx = g.constant(inputs.search_x.clone());
        let tt = self.tokens(g, p, trgb, tx, Region::Template)?;
        let st = self.tokens(g, p, srgb, sx, Region::Search)?;
        let mut x = g.concat(&[tt, st], 1)?;
        let mut layers = Vec::new();
        for block in &self.blocks {
            let (y, aux) = block.forward(g, p, x, experts)?;
            x = y;
            layers.extend(aux);
        }
        let x = g.layer_norm(x, LN_EPS);

        let search = g.narrow(x, 1, nt, ns)?;
        let search = g.reshape(search, &[b * ns, d])?;
        let score = self.score_head.forward(g, p, search)?;
        let score_logits = g.reshape(score, &[b, ns])?;

        let raw = self.box_head.forward(g, p, search)?;
        let raw = g.sigmoid(raw);
        let raw = g.reshape(raw, &[b, ns, 4])?;
        let grid = c.search_grid();
        let gf = grid as f64;
        let scale = g.constant(Tensor::from_fn(&[ns, 4], |i| if i % 4 < 2 { 1.0 / gf } else { 1.0 }));
        let offset = g.constant(Tensor::from_fn(&[ns, 4], |i| {
            let (cell, k) = (i / 4, i % 4);
            match k {
                0 => (cell % grid) as f64 / gf,
                1 => (cell / grid) as f64 / gf,
                _ => 0.0,
            }
        }));
        let boxes = g.mul(raw, scale)?;
        let boxes = g.add(boxes, offset)?;

        let pooled = g.mean_axis(x, 1)?;
        let pooled = g.reshape(pooled, &[b, d])?;
        let task_logits = g.linear(pooled, p[self.task_w], Some(p[self.task_b]))?;
        Ok(ForwardOutput { score_logits, boxes, task_logits, layers })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, inputs: &TrackInputs) -> Result<ForwardOutput> {
        self.forward_with(g, p, inputs, true)
    }

    /// Build the full training objective on `g`.
    pub fn objective(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: &TrackInputs,
        targets: &TrackTargets,
        w: &LossWeights,
        delta: f64,
    ) -> Result<Objective> {
        let output = self.forward(g, p, inputs)?;
        let b = inputs.batch();
        if targets.boxes.len() != b || targets.tasks.len() != b {
            return Err(shape_err!(
                "batch of {b} with {} boxes and {} task ids",
                targets.boxes.len(),
                targets.tasks.len()
            ));
        }
        let grid = self.cfg.search_grid();
        let ns = grid * grid;

        let gt_map: Vec<f64> = targets
            .boxes
            .iter()
            .flat_map(|bx| center_target(grid, bx.cx, bx.cy, CENTER_SIGMA))
            .collect();
        let class = g.focal_bce(output.score_logits, &Tensor::from_parts(vec![b, ns], gt_map), FOCAL_GAMMA, FOCAL_BETA)?;

        let rows: Vec<usize> = targets
            .boxes
            .iter()
            .enumerate()
            .map(|(i, bx)| i * ns + cell_of(grid, bx.cx, bx.cy))
            .collect();
        let flat = g.reshape(output.boxes, &[b * ns, 4])?;
        let picked = g.gather_rows(flat, &rows)?;
        let iou = giou_loss_graph(g, picked, &targets.boxes)?;
        let l1 = l1_loss_graph(g, picked, &targets.boxes)?;
        let task = g.cross_entropy(output.task_logits, &targets.tasks)?;

        let layers = output.layers.len() as f64;
        let mut dis_terms = Vec::new();
        let mut cluster_terms = Vec::new();
        let mut balance_terms = Vec::new();
        for layer in &output.layers {
            dis_terms.push(dissimilarity_loss_graph(g, layer.t.y, layer.m.y)?);
            let dist = sample_distributions(g, layer.m.probs, b)?;
            cluster_terms.push(cluster_loss_graph(g, dist, &targets.tasks, delta)?);
            let bt = balance_loss_graph(g, &layer.t)?;
            let bm = balance_loss_graph(g, &layer.m)?;
            let both = g.add(bt, bm)?;
            balance_terms.push(g.scale(both, 0.5));
        }
        let average = |g: &mut Graph, terms: Vec<Var>| -> Result<Var> {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t)?;
            }
            Ok(g.scale(acc, 1.0 / layers))
        };
        let dis = average(g, dis_terms)?;
        let cluster = average(g, cluster_terms)?;
        let balance = average(g, balance_terms)?;

        let components = [class, iou, l1, task, dis, cluster, balance];
        let mut total: Option<Var> = None;
        for (&v, c) in components.iter().zip(w.coefficients()) {
            let term = g.scale(v, c);
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        let total = total.expect("seven components");
        for (name, &v) in LossComponents::NAMES.iter().zip(&components) {
            let value = g.value(v).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss component {name} is {value}")));
            }
        }
        Ok(Objective { total, components, output })
    }

    /// Forward pass with frozen parameters, returning plain values.
    pub fn infer(&self, inputs: &TrackInputs) -> Result<Inference> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.forward(&mut g, &p, inputs)?;
        let scores = g.value(out.score_logits).clone();
        let scores = Tensor::from_parts(
            scores.shape().to_vec(),
            scores.data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect(),
        );
        Ok(Inference {
            scores,
            boxes: g.value(out.boxes).clone(),
            task_logits: g.value(out.task_logits).clone(),
            t_selected: out.layers.iter().map(|l| l.t.selected.clone()).collect(),
            m_selected: out.layers.iter().map(|l| l.m.selected.clone()).collect(),
            t_probs: out.layers.iter().map(|l| g.value(l.t.probs).clone()).collect(),
            m_probs: out.layers.iter().map(|l| g.value(l.m.probs).clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check_coords;

    fn inputs(cfg: &ModelConfig, b: usize, seed: u64) -> TrackInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.image_channels;
        let mut img = |s: usize| Tensor::uniform(&[b, c, s, s], 0.0, 1.0, &mut rng);
        TrackInputs {
            template_rgb: img(cfg.template_size),
            template_x: img(cfg.template_size),
            search_rgb: img(cfg.search_size),
            search_x: img(cfg.search_size),
        }
    }

    fn targets(b: usize) -> TrackTargets {
        TrackTargets {
            boxes: (0..b)
                .map(|i| Bbox::new(0.3 + 0.1 * i as f64, 0.6 - 0.05 * i as f64, 0.25, 0.3))
                .collect(),
            tasks: (0..b).map(|i| i % 3).collect(),
        }
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let ones = LossComponents::from_array([1.0; 7]);
        assert!((total_loss(&ones, &w).unwrap() - 10.11).abs() < 1e-12);
        assert_eq!(total_loss(&LossComponents::default(), &w).unwrap(), 0.0);
        let mut c = ones;
        c.iou = 3.0;
        assert!((total_loss(&c, &w).unwrap() - 10.11 - 4.0).abs() < 1e-12);
        c.cluster = f64::NAN;
        match total_loss(&c, &w) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("cluster"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn iou_loss_examples() {
        let a = Bbox::from_corners(0.0, 0.0, 1.0, 1.0);
        assert!(iou_loss(&a, &a).unwrap().abs() < 1e-15);
        let b = Bbox::from_corners(1.0, 0.0, 2.0, 1.0);
        assert!((iou_loss(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let flat = Bbox::new(0.5, 0.5, 0.0, 1.0);
        assert!(matches!(iou_loss(&a, &flat), Err(Error::Validation(_))));
    }

    #[test]
    fn l1_and_task_examples() {
        let a = Bbox::new(0.5, 0.5, 0.2, 0.3);
        let b = Bbox::new(0.6, 0.5, 0.2, 0.3);
        assert_eq!(l1_loss(&a, &a), 0.0);
        assert!((l1_loss(&b, &a) - 0.025).abs() < 1e-15);
        assert_eq!(l1_loss(&a, &b), l1_loss(&b, &a));
        assert!((task_loss(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(task_loss(&[50.0, 0.0, 0.0], 0).unwrap() < 1e-20);
        assert!(matches!(task_loss(&[0.0; 4], 4), Err(Error::Validation(_))));
    }

    #[test]
    fn classification_examples() {
        let gt = [0.0, 1.0, 0.0, 0.0];
        assert!(classification_loss(&gt, &gt).unwrap() < 1e-6);
        // uniform 0.5: each cell contributes 0.25 · ln 2
        let half = [0.5; 4];
        let oracle = (0..4).map(|_| 0.25 * 2f64.ln()).sum::<f64>() / 4.0;
        assert!((classification_loss(&half, &gt).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn center_target_peaks_on_the_containing_cell() {
        let t = center_target(4, 0.62, 0.3, 1.0);
        // (0.62, 0.3) lies in row 1, column 2
        assert_eq!(t[1 * 4 + 2], 1.0);
        assert_eq!(t.iter().filter(|&&v| v == 1.0).count(), 1);
        assert!((t[1 * 4 + 3] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((t[3 * 4] - (-(4.0 + 4.0) / 2.0f64).exp()).abs() < 1e-15);
        // a soft cell away from the peak is a down-weighted negative
        let cell = focal_term_prob(0.3, t[1 * 4 + 3]);
        let w = (1.0 - (-0.5f64).exp()).powi(4);
        assert!((cell - -w * 0.09 * 0.7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn classification_plain_matches_graph() {
        let logits = [0.3, -1.2, 2.0, 0.0, -0.4, 1.1];
        let target = center_target(2, 0.4, 0.7, 1.0);
        let target = [target, vec![0.2, 0.9]].concat();
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(logits.to_vec()));
        let l = g.focal_bce(z, &Tensor::from_vec(target.clone()), FOCAL_GAMMA, FOCAL_BETA).unwrap();
        let probs: Vec<f64> = logits.iter().map(|z| 1.0 / (1.0 + (-z as f64).exp())).collect();
        assert!((g.value(l).item() - classification_loss(&probs, &target).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn giou_graph_matches_plain() {
        let preds = [Bbox::new(0.4, 0.5, 0.3, 0.2), Bbox::new(0.1, 0.9, 0.1, 0.4)];
        let gts = [Bbox::new(0.45, 0.55, 0.25, 0.3), Bbox::new(0.6, 0.2, 0.2, 0.2)];
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_parts(vec![2, 4], preds.iter().flat_map(|b| b.to_array()).collect()));
        let l = giou_loss_graph(&mut g, p, &gts).unwrap();
        let plain = (iou_loss(&preds[0], &gts[0]).unwrap() + iou_loss(&preds[1], &gts[1]).unwrap()) / 2.0;
        assert!((g.value(l).item() - plain).abs() < 1e-12);
    }

    #[test]
    fn hanning_examples() {
        let w = hanning_window(5, 5);
        assert_eq!(w[12], 1.0);
        assert_eq!(w[0], 0.0);
        assert_eq!(hanning_window(1, 1), vec![1.0]);
        let (cell, b) = predict_box(&[0.3; 25], &vec![Bbox::new(0.5, 0.5, 0.2, 0.2); 25], &w).unwrap();
        assert_eq!(cell, 12);
        assert_eq!(b, Bbox::new(0.5, 0.5, 0.2, 0.2));
        let only = Bbox::new(0.1, 0.2, 0.3, 0.4);
        assert_eq!(predict_box(&[0.9], &[only], &[1.0]).unwrap(), (0, only));
    }

    #[test]
    fn template_update_rule() {
        let upd = |f, c| maybe_update_template(f, c, TEMPLATE_UPDATE_THRESHOLD, TEMPLATE_UPDATE_PERIOD);
        assert!(upd(25, 0.9));
        assert!(!upd(25, 0.5));
        assert!(!upd(13, 0.99));
        assert!(!upd(0, 0.99));
        assert!(!upd(50, 0.7));
    }

    #[test]
    fn forward_shapes_determinism_and_masked_x() {
        let cfg = ModelConfig::default();
        let model = TrackerModel::new(cfg.clone(), 3).unwrap();
        let mut inp = inputs(&cfg, 2, 4);
        let a = model.infer(&inp).unwrap();
        let b = model.infer(&inp).unwrap();
        assert_eq!(a.scores.shape(), &[2, 16]);
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.boxes, b.boxes);
        inp.search_x = Tensor::zeros(inp.search_x.shape());
        inp.template_x = Tensor::zeros(inp.template_x.shape());
        let m = model.infer(&inp).unwrap();
        assert!(m.scores.is_finite() && m.boxes.is_finite());
    }

    #[test]
    fn rejects_wrong_image_size() {
        let cfg = ModelConfig::default();
        let model = TrackerModel::new(cfg.clone(), 3).unwrap();
        let mut inp = inputs(&cfg, 1, 4);
        inp.search_rgb = Tensor::zeros(&[1, 3, 24, 24]);
        assert!(matches!(model.infer(&inp), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_banks_reduce_to_plain_transformer() {
        let cfg = ModelConfig::default();
        let mut model = TrackerModel::new(cfg.clone(), 5).unwrap();
        let ups: Vec<ParamId> = model
            .blocks
            .iter()
            .flat_map(|b| b.moe.t_experts.iter().chain(&b.moe.m_experts).map(|e| e.up))
            .collect();
        for id in ups {
            model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let inp = inputs(&cfg, 2, 6);
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let full = model.forward_with(&mut g, &p, &inp, true).unwrap();
        let plain = model.forward_with(&mut g, &p, &inp, false).unwrap();
        for (a, b) in [(full.score_logits, plain.score_logits), (full.boxes, plain.boxes), (full.task_logits, plain.task_logits)] {
            assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-10);
        }
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny();
        let model = TrackerModel::new(cfg.clone(), 7).unwrap();
        let inp = inputs(&cfg, 3, 8);
        let tg = targets(3);
        let w = LossWeights::default();
        let mut worst: f64 = 0.0;
        for (id, name, t) in model.params.iter() {
            let coords: Vec<usize> = (0..t.numel()).step_by((t.numel() / 6).max(1)).collect();
            let err = gradient_check_coords(
                |g, x| {
                    let mut p = model.bind(g, false);
                    p.replace(id, x);
                    Ok(model.objective(g, &p, &inp, &tg, &w, 0.1)?.total)
                },
                t,
                1e-5,
                &coords,
            )
            .unwrap();
            assert!(err < 1e-3, "{name}: {err}");
            worst = worst.max(err);
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let cfg = ModelConfig::default();
        let model = TrackerModel::new(cfg.clone(), 9).unwrap();
        let inp = inputs(&cfg, 4, 10);
        let tg = targets(4);
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let obj = model.objective(&mut g, &p, &inp, &tg, &LossWeights::default(), 0.1).unwrap();
        g.backward(obj.total).unwrap();
        let grads = model.params.grads(&g, &p);
        let mut used = std::collections::HashSet::new();
        for (bi, layer) in obj.output.layers.iter().enumerate() {
            for &e in &layer.t.selected {
                used.insert(format!("block{bi}.moe.t_expert.{e}."));
            }
            for &e in &layer.m.selected {
                used.insert(format!("block{bi}.moe.m_expert.{e}."));
            }
        }
        for ((_, name, _), gr) in model.params.iter().zip(&grads) {
            let is_expert = name.contains("_expert.");
            if is_expert && !used.iter().any(|u| name.starts_with(u.as_str())) {
                assert!(gr.data().iter().all(|&v| v == 0.0), "{name}");
                continue;
            }
            assert!(gr.data().iter().any(|&v| v != 0.0), "{name} has no gradient");
        }
    }
}
