//! AdamW training loop over mixed-task synthetic batches.

use super::config::{OptimConfig, TrainConfig};
use super::data::{draw_sample, stack};
use super::fmt_float;
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{total_loss, LossComponents, TrackerModel};
use crate::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Decoupled-weight-decay Adam.
pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, &g) in grads[i].data().iter().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                p[j] -= c.lr * (update + c.weight_decay * p[j]);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub components: LossComponents,
    pub total: f64,
}

pub struct TrainRun {
    pub model: TrackerModel,
    pub trace: Vec<TraceRow>,
}

/// Train from the seeded initialization. `progress` sees every logged row.
pub fn train_with(cfg: &TrainConfig, mut progress: impl FnMut(&TraceRow)) -> Result<TrainRun> {
    cfg.validate()?;
    let mut model = TrackerModel::new(cfg.model.clone(), cfg.seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);
    let mut opt = AdamW::new(cfg.optim.clone(), &model.params);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let samples = (0..cfg.batch)
            .map(|_| draw_sample(cfg, &cfg.perturb, &mut data_rng))
            .collect::<Result<Vec<_>>>()?;
        let (inputs, targets) = stack(&cfg.model, &samples);
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let obj = model
            .objective(&mut g, &p, &inputs, &targets, &cfg.loss, cfg.delta)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
                other => other,
            })?;
        let components = obj.values(&g);
        let total = total_loss(&components, &cfg.loss)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        g.backward(obj.total)?;
        let grads = model.params.grads(&g, &p);
        if let Some(bad) = grads.iter().position(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!(
                "step {step}: gradient of {} is not finite",
                model.params.name(model.params.ids().nth(bad).expect("index in range"))
            )));
        }
        opt.step(&mut model.params, &grads);
        let row = TraceRow { step, components, total };
        progress(&row);
        trace.push(row);
    }
    Ok(TrainRun { model, trace })
}

pub fn train(cfg: &TrainConfig) -> Result<TrainRun> {
    train_with(cfg, |_| {})
}

pub fn trace_header() -> String {
    let mut h = String::from("step");
    for n in LossComponents::NAMES {
        h.push(',');
        h.push_str(n);
    }
    h.push_str(",total");
    h
}

pub fn trace_line(row: &TraceRow) -> String {
    let mut s = row.step.to_string();
    for v in row.components.to_array() {
        s.push(',');
        s.push_str(&fmt_float(v));
    }
    s.push(',');
    s.push_str(&fmt_float(row.total));
    s
}

pub fn write_loss_trace(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", trace_header())?;
    for r in rows {
        writeln!(f, "{}", trace_line(r))?;
    }
    f.flush()?;
    Ok(())
}
