#![allow(dead_code)]

use mmtrack::autodiff::Tensor;
use mmtrack::dmoe::{DMoEConfig, DMoELayer};
use mmtrack::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    let mut out = vec![0.0; w.shape()[0]];
    for (i, o) in out.iter_mut().enumerate() {
        for j in 0..cols {
            *o += w.data()[i * cols + j] * x[j];
        }
    }
    out
}

pub fn layer(seed: u64, dim: usize, experts: usize, k: usize, rank: usize) -> (ParamStore, DMoELayer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = DMoEConfig { dim, experts, top_k: k, rank, ffn_mult: 2 };
    let l = DMoELayer::new(&mut store, "l", &cfg, &mut rng).unwrap();
    // expert up-projections start near zero; make them matter
    for e in l.t_experts.iter().chain(&l.m_experts) {
        let shape = store.get(e.up).shape().to_vec();
        *store.get_mut(e.up) = Tensor::randn(&shape, 0.5, &mut rng);
    }
    (store, l)
}

/// All experts of both banks, weighted by the full softmax, plus the shared path.
pub fn dense_oracle(store: &ParamStore, l: &DMoELayer, x: &[f64]) -> Vec<f64> {
    let ff = &l.shared;
    let mut h = mat_vec(store.get(ff.w1), x);
    for (v, b) in h.iter_mut().zip(store.get(ff.b1).data()) {
        *v = gelu(*v + b);
    }
    let mut y = mat_vec(store.get(ff.w2), &h);
    for (v, b) in y.iter_mut().zip(store.get(ff.b2).data()) {
        *v += b;
    }
    for (router, bank) in [(&l.t_router, &l.t_experts), (&l.m_router, &l.m_experts)] {
        let logits = mat_vec(store.get(router.weight), x);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        for (i, e) in bank.iter().enumerate() {
            let gi = (logits[i] - m).exp() / z;
            let hid: Vec<f64> = mat_vec(store.get(e.down), x).into_iter().map(gelu).collect();
            for (o, v) in y.iter_mut().zip(mat_vec(store.get(e.up), &hid)) {
                *o += gi * v;
            }
        }
    }
    y
}
