//! Router statistics: expert selection frequencies per motion-speed bin (T bank)
//! and per modality (M bank), plus per-sample routing similarities.

use super::data::crop_pair;
use super::fmt_float;
use crate::autodiff::Tensor;
use crate::error::{validation_err, Result};
use crate::model::{TrackInputs, TrackerModel};
use crate::sim::{Modality, SpeedLevel, SyntheticSequence};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bank {
    T,
    M,
}

impl Bank {
    pub fn name(self) -> &'static str {
        match self {
            Bank::T => "T",
            Bank::M => "M",
        }
    }
}

/// One selection made by one router for one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateRecord {
    pub sample: usize,
    pub layer: usize,
    pub bank: Bank,
    pub token: usize,
    pub slot: usize,
    pub expert: usize,
}

#[derive(Clone, Debug)]
pub struct RouteSample {
    pub seed: u64,
    pub frame: usize,
    pub modality: Modality,
    pub speed: SpeedLevel,
    /// Per layer, the M-router distribution averaged over the sample's tokens.
    pub m_dist: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct RouteAnalysis {
    pub experts: usize,
    pub samples: Vec<RouteSample>,
    pub trace: Vec<GateRecord>,
}

pub fn normalize(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

impl RouteAnalysis {
    fn counts<K: Copy + Ord>(&self, bank: Bank, key: impl Fn(&RouteSample) -> K) -> Vec<(K, Vec<u64>)> {
        let mut rows: Vec<(K, Vec<u64>)> = Vec::new();
        for r in self.trace.iter().filter(|r| r.bank == bank) {
            let k = key(&self.samples[r.sample]);
            let slot = match rows.iter().position(|e| e.0 == k) {
                Some(i) => i,
                None => {
                    rows.push((k, vec![0; self.experts]));
                    rows.len() - 1
                }
            };
            rows[slot].1[r.expert] += 1;
        }
        rows.sort_by_key(|e| e.0);
        rows
    }

    pub fn t_counts(&self) -> Vec<(SpeedLevel, Vec<u64>)> {
        self.counts(Bank::T, |s| s.speed)
    }

    pub fn m_counts(&self) -> Vec<(Modality, Vec<u64>)> {
        self.counts(Bank::M, |s| s.modality)
    }

    /// T-bank selection frequencies per speed bin.
    pub fn t_router(&self) -> Vec<(SpeedLevel, Vec<f64>)> {
        self.t_counts().into_iter().map(|(k, c)| (k, normalize(&c))).collect()
    }

    /// M-bank selection frequencies per modality.
    pub fn m_router(&self) -> Vec<(Modality, Vec<f64>)> {
        self.m_counts().into_iter().map(|(k, c)| (k, normalize(&c))).collect()
    }

    /// Mean `⟨G_i, G_j⟩` over same-modality and different-modality sample pairs,
    /// averaged over layers.
    pub fn routing_similarity(&self) -> (f64, f64) {
        let n = self.samples.len();
        let (mut intra, mut inter, mut ni, mut nx) = (0.0, 0.0, 0usize, 0usize);
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&self.samples[i], &self.samples[j]);
                let s: f64 = a
                    .m_dist
                    .iter()
                    .zip(&b.m_dist)
                    .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
                    .sum::<f64>()
                    / a.m_dist.len() as f64;
                if a.modality == b.modality {
                    intra += s;
                    ni += 1;
                } else {
                    inter += s;
                    nx += 1;
                }
            }
        }
        (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
    }

    pub fn write_router_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let header = |first: &str| {
            let mut h = first.to_string();
            for e in 0..self.experts {
                h.push_str(&format!(",e{e}"));
            }
            h
        };
        let line = |name: &str, v: &[f64]| {
            let mut s = name.to_string();
            for x in v {
                s.push(',');
                s.push_str(&fmt_float(*x));
            }
            s
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("t_router.csv"))?);
        writeln!(f, "{}", header("speed"))?;
        for (k, v) in self.t_router() {
            writeln!(f, "{}", line(k.name(), &v))?;
        }
        f.flush()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("m_router.csv"))?);
        writeln!(f, "{}", header("modality"))?;
        for (k, v) in self.m_router() {
            writeln!(f, "{}", line(k.name(), &v))?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_gate_trace(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "sample,seed,frame,modality,speed,layer,bank,token,slot,expert")?;
        for r in &self.trace {
            let s = &self.samples[r.sample];
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{}",
                r.sample,
                s.seed,
                s.frame,
                s.modality,
                s.speed,
                r.layer,
                r.bank.name(),
                r.token,
                r.slot,
                r.expert
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Recount selection frequencies from a gate trace file: `(bank, group) → counts`.
pub fn counts_from_trace(path: &Path, experts: usize) -> Result<Vec<(String, String, Vec<u64>)>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows: Vec<(String, String, Vec<u64>)> = Vec::new();
    for (n, line) in f.lines().enumerate().skip(1) {
        let line = line?;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(validation_err!("gate trace line {} has {} columns", n + 1, cols.len()));
        }
        let bank = cols[6].to_string();
        let group = if bank == "T" { cols[4] } else { cols[3] }.to_string();
        let expert: usize = cols[9]
            .parse()
            .map_err(|_| validation_err!("gate trace line {}: bad expert {:?}", n + 1, cols[9]))?;
        let slot = match rows.iter().position(|r| r.0 == bank && r.1 == group) {
            Some(i) => i,
            None => {
                rows.push((bank, group, vec![0; experts]));
                rows.len() - 1
            }
        };
        rows[slot].2[expert] += 1;
    }
    Ok(rows)
}

/// Route teacher-forced crops (template at the first box, search centered on the
/// previous true box) through the model and record every gate decision.
pub fn route_analysis(model: &TrackerModel, seqs: &[SyntheticSequence]) -> Result<RouteAnalysis> {
    if seqs.iter().all(|s| s.frames() < 2) {
        return Err(validation_err!("route analysis needs at least one sequence with two or more frames"));
    }
    let cfg = &model.cfg;
    let (ts, ss, c) = (cfg.template_size, cfg.search_size, cfg.image_channels);
    let tokens = cfg.template_tokens() + cfg.search_tokens();
    let k = cfg.top_k;
    let mut samples = Vec::new();
    let mut trace = Vec::new();
    for seq in seqs {
        let centers = seq.centers_px();
        let b = seq.frames().saturating_sub(1);
        if b == 0 {
            continue;
        }
        let mut parts: [Vec<f64>; 4] = Default::default();
        for t in 1..seq.frames() {
            let (a, bx, cc, d, _) = crop_pair(seq, cfg, 0, centers[0], t, centers[t - 1]);
            parts[0].extend(a);
            parts[1].extend(bx);
            parts[2].extend(cc);
            parts[3].extend(d);
        }
        let [trgb, tx, srgb, sx] = parts;
        let inputs = TrackInputs {
            template_rgb: Tensor::from_parts(vec![b, c, ts, ts], trgb),
            template_x: Tensor::from_parts(vec![b, c, ts, ts], tx),
            search_rgb: Tensor::from_parts(vec![b, c, ss, ss], srgb),
            search_x: Tensor::from_parts(vec![b, c, ss, ss], sx),
        };
        let out = model.infer(&inputs)?;
        let base = samples.len();
        for i in 0..b {
            let t = i + 1;
            let (p, q) = (centers[t - 1], centers[t]);
            let m_dist = out
                .m_probs
                .iter()
                .map(|probs| {
                    let kk = probs.shape()[1];
                    let mut g = vec![0.0; kk];
                    for row in probs.data()[i * tokens * kk..(i + 1) * tokens * kk].chunks(kk) {
                        g.iter_mut().zip(row).for_each(|(a, v)| *a += v / tokens as f64);
                    }
                    g
                })
                .collect();
            samples.push(RouteSample {
                seed: seq.seed,
                frame: t,
                modality: seq.modality,
                speed: SpeedLevel::from_displacement((q.0 - p.0).hypot(q.1 - p.1)),
                m_dist,
            });
        }
        for (layer, (ts_sel, ms_sel)) in out.t_selected.iter().zip(&out.m_selected).enumerate() {
            for (bank, sel) in [(Bank::T, ts_sel), (Bank::M, ms_sel)] {
                for (j, &expert) in sel.iter().enumerate() {
                    let row = j / k;
                    trace.push(GateRecord {
                        sample: base + row / tokens,
                        layer,
                        bank,
                        token: row % tokens,
                        slot: j % k,
                        expert,
                    });
                }
            }
        }
    }
    Ok(RouteAnalysis { experts: cfg.experts, samples, trace })
}
