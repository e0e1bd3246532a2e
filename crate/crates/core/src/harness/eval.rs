//! Frame-by-frame tracking and the success / precision metrics.

use super::data::{crop_pair, from_crop};
use super::fmt_float;
use crate::autodiff::Tensor;
use crate::error::{validation_err, Result};
use crate::model::{
    hanning_window, maybe_update_template, predict_box, Bbox, Inference, TrackInputs, TrackerModel, TEMPLATE_UPDATE_PERIOD,
    TEMPLATE_UPDATE_THRESHOLD,
};
use crate::sim::{Modality, SpeedLevel, SyntheticSequence};
use std::io::Write;
use std::path::Path;

pub const IOU_THRESHOLDS: usize = 21;
pub const PRECISION_RADIUS_PX: f64 = 2.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Breakdown {
    pub frames: usize,
    pub mean_iou: f64,
    pub auc: f64,
    pub precision: f64,
}

impl Breakdown {
    fn from_frames(ious: &[f64], errors: &[f64]) -> Self {
        let n = ious.len();
        if n == 0 {
            return Self::default();
        }
        let nf = n as f64;
        let auc = (0..IOU_THRESHOLDS)
            .map(|i| {
                let t = i as f64 / (IOU_THRESHOLDS - 1) as f64;
                ious.iter().filter(|&&v| v >= t).count() as f64 / nf
            })
            .sum::<f64>()
            / IOU_THRESHOLDS as f64;
        Self {
            frames: n,
            mean_iou: ious.iter().sum::<f64>() / nf,
            auc,
            precision: errors.iter().filter(|&&e| e <= PRECISION_RADIUS_PX).count() as f64 / nf,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub overall: Breakdown,
    pub per_modality: Vec<(Modality, Breakdown)>,
    pub per_speed: Vec<(SpeedLevel, Breakdown)>,
}

/// Score predicted tracks against ground truth. Frame 0 carries the given
/// initial box and is left out.
pub fn score_tracks(seqs: &[SyntheticSequence], preds: &[Vec<Bbox>]) -> Result<MetricsReport> {
    if seqs.is_empty() || seqs.len() != preds.len() {
        return Err(validation_err!("{} sequences with {} predicted tracks", seqs.len(), preds.len()));
    }
    let mut all = (Vec::new(), Vec::new());
    let mut by_mod: Vec<(Modality, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut by_speed: Vec<(SpeedLevel, Vec<f64>, Vec<f64>)> = Vec::new();
    for (seq, track) in seqs.iter().zip(preds) {
        if track.len() != seq.frames() {
            return Err(validation_err!("track of {} frames for a {}-frame sequence", track.len(), seq.frames()));
        }
        let s = seq.image_size() as f64;
        for (gt, p) in seq.boxes.iter().zip(track).skip(1) {
            let iou = if p.is_finite() { p.iou(gt) } else { 0.0 };
            let err = ((p.cx - gt.cx) * s).hypot((p.cy - gt.cy) * s);
            let err = if err.is_finite() { err } else { f64::INFINITY };
            all.0.push(iou);
            all.1.push(err);
            let slot = match by_mod.iter().position(|e| e.0 == seq.modality) {
                Some(i) => i,
                None => {
                    by_mod.push((seq.modality, Vec::new(), Vec::new()));
                    by_mod.len() - 1
                }
            };
            by_mod[slot].1.push(iou);
            by_mod[slot].2.push(err);
            let slot = match by_speed.iter().position(|e| e.0 == seq.speed) {
                Some(i) => i,
                None => {
                    by_speed.push((seq.speed, Vec::new(), Vec::new()));
                    by_speed.len() - 1
                }
            };
            by_speed[slot].1.push(iou);
            by_speed[slot].2.push(err);
        }
    }
    if all.0.is_empty() {
        return Err(validation_err!("sequences need at least two frames to be scored"));
    }
    by_mod.sort_by_key(|e| e.0);
    by_speed.sort_by_key(|e| e.0);
    Ok(MetricsReport {
        overall: Breakdown::from_frames(&all.0, &all.1),
        per_modality: by_mod.into_iter().map(|(m, i, e)| (m, Breakdown::from_frames(&i, &e))).collect(),
        per_speed: by_speed.into_iter().map(|(s, i, e)| (s, Breakdown::from_frames(&i, &e))).collect(),
    })
}

/// Track every sequence from its first-frame box, all sequences batched per frame.
pub fn track(model: &TrackerModel, seqs: &[SyntheticSequence]) -> Result<Vec<Vec<Bbox>>> {
    track_with(model, seqs, |_, _| {})
}

/// [`track`], handing each frame's raw network output to `inspect`.
pub fn track_with(
    model: &TrackerModel,
    seqs: &[SyntheticSequence],
    mut inspect: impl FnMut(usize, &Inference),
) -> Result<Vec<Vec<Bbox>>> {
    if seqs.is_empty() {
        return Err(validation_err!("nothing to track"));
    }
    let cfg = &model.cfg;
    let grid = cfg.search_grid();
    let window = hanning_window(grid, grid);
    let frames = seqs[0].frames();
    if seqs.iter().any(|s| s.frames() != frames) {
        return Err(validation_err!("batched tracking needs sequences of equal length"));
    }
    let (ts, ss, c) = (cfg.template_size, cfg.search_size, cfg.image_channels);
    let mut preds: Vec<Vec<Bbox>> = seqs.iter().map(|s| vec![s.boxes[0]]).collect();
    // template source: (frame, center in pixels)
    let mut templates: Vec<(usize, (f64, f64))> = seqs.iter().map(|s| (0, s.centers_px()[0])).collect();
    for t in 1..frames {
        let b = seqs.len();
        let mut trgb = Vec::with_capacity(b * c * ts * ts);
        let mut tx = Vec::with_capacity(b * c * ts * ts);
        let mut srgb = Vec::with_capacity(b * c * ss * ss);
        let mut sx = Vec::with_capacity(b * c * ss * ss);
        let mut origins = Vec::with_capacity(b);
        for (i, seq) in seqs.iter().enumerate() {
            let s = seq.image_size() as f64;
            let prev = preds[i][t - 1];
            let (a, bx, cc, d, origin) = crop_pair(seq, cfg, templates[i].0, templates[i].1, t, (prev.cx * s, prev.cy * s));
            trgb.extend(a);
            tx.extend(bx);
            srgb.extend(cc);
            sx.extend(d);
            origins.push(origin);
        }
        let inputs = TrackInputs {
            template_rgb: Tensor::from_parts(vec![b, c, ts, ts], trgb),
            template_x: Tensor::from_parts(vec![b, c, ts, ts], tx),
            search_rgb: Tensor::from_parts(vec![b, c, ss, ss], srgb),
            search_x: Tensor::from_parts(vec![b, c, ss, ss], sx),
        };
        let out = model.infer(&inputs)?;
        inspect(t, &out);
        for (i, seq) in seqs.iter().enumerate() {
            let scores = out.sample_scores(i);
            let (cell, local) = predict_box(scores, &out.sample_boxes(i), &window)?;
            let pred = from_crop(&local, seq.image_size(), origins[i], ss);
            if maybe_update_template(t, scores[cell], TEMPLATE_UPDATE_THRESHOLD, TEMPLATE_UPDATE_PERIOD) {
                let s = seq.image_size() as f64;
                templates[i] = (t, (pred.cx * s, pred.cy * s));
            }
            preds[i].push(pred);
        }
    }
    Ok(preds)
}

pub fn evaluate(model: &TrackerModel, seqs: &[SyntheticSequence]) -> Result<MetricsReport> {
    let preds = track(model, seqs)?;
    score_tracks(seqs, &preds)
}

pub fn write_metrics(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "group,name,frames,mean_iou,auc,precision")?;
    let mut row = |group: &str, name: &str, b: &Breakdown| -> std::io::Result<()> {
        writeln!(
            f,
            "{group},{name},{},{},{},{}",
            b.frames,
            fmt_float(b.mean_iou),
            fmt_float(b.auc),
            fmt_float(b.precision)
        )
    };
    row("overall", "all", &report.overall)?;
    for (m, b) in &report.per_modality {
        row("modality", m.name(), b)?;
    }
    for (s, b) in &report.per_speed {
        row("speed", s.name(), b)?;
    }
    drop(row);
    f.flush()?;
    Ok(())
}
