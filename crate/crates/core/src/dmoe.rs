//! Dual mixture-of-experts feed-forward layer.
//!
//! Every token passes through a shared feed-forward block plus two routed
//! banks of low-rank experts. The temporal bank (T) and the modality bank (M)
//! each pick their top-`k` experts from a softmax gate and mix them with the
//! renormalized gate weights:
//!
//! ```text
//! y = shared(x) + Σ_{i∈S_T} ĝ_T,i E_T,i(x) + Σ_{i∈S_M} ĝ_M,i E_M,i(x)
//! ```
//!
//! The selection itself carries no gradient; gradients reach the router through
//! the renormalized weights of the selected experts.

use crate::autodiff::{gelu, topk, Graph, Tensor, Var};
use crate::error::{config_err, shape_err, validation_err, Result};
use crate::params::{Bound, ParamId, ParamStore};
use rand::Rng;

/// Per-token routing record.
#[derive(Clone, Debug, PartialEq)]
pub struct GateResult {
    /// Full softmax distribution over the bank.
    pub g: Vec<f64>,
    /// Selected expert indices, highest gate first.
    pub selected: Vec<usize>,
    /// Gate weights renormalized over `selected`.
    pub g_hat: Vec<f64>,
}

impl GateResult {
    /// Build from a probability vector.
    pub fn from_probs(g: Vec<f64>, k: usize) -> Result<Self> {
        let selected = topk(&g, k)?;
        let total: f64 = selected.iter().map(|&i| g[i]).sum();
        let g_hat = selected.iter().map(|&i| g[i] / total).collect();
        Ok(Self { g, selected, g_hat })
    }
}

/// Low-rank expert: `W_up · GELU(W_down · x)`.
#[derive(Clone, Debug)]
pub struct Expert {
    /// `[r, d]`
    pub down: ParamId,
    /// `[d, r]`
    pub up: ParamId,
}

impl Expert {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rank: usize, up_std: f64, rng: &mut R) -> Self {
        Self {
            down: store.add(
                format!("{name}.down"),
                Tensor::randn(&[rank, dim], 1.0 / (dim as f64).sqrt(), rng),
            ),
            up: store.add(format!("{name}.up"), Tensor::randn(&[dim, rank], up_std, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.linear(x, p[self.down], None)?;
        let h = g.gelu(h);
        g.linear(h, p[self.up], None)
    }
}

/// Linear gate producing `K` logits.
#[derive(Clone, Debug)]
pub struct Router {
    /// `[K, d]`
    pub weight: ParamId,
}

/// Standard two-layer feed-forward block, `d → hidden → d`, GELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add(
                format!("{name}.w1"),
                Tensor::randn(&[hidden, dim], 1.0 / (dim as f64).sqrt(), rng),
            ),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(
                format!("{name}.w2"),
                Tensor::randn(&[dim, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            ),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.linear(x, p[self.w1], Some(p[self.b1]))?;
        let h = g.gelu(h);
        g.linear(h, p[self.w2], Some(p[self.b2]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DMoEConfig {
    pub dim: usize,
    pub experts: usize,
    pub top_k: usize,
    pub rank: usize,
    pub ffn_mult: usize,
}

impl DMoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(config_err!(
                "top_k = {} must lie in 1..={} (number of experts)",
                self.top_k,
                self.experts
            ));
        }
        if self.rank == 0 || self.rank >= self.dim {
            return Err(config_err!("expert rank {} must satisfy 0 < r < d = {}", self.rank, self.dim));
        }
        Ok(())
    }
}

/// Shared expert plus temporal and modality expert banks.
#[derive(Clone, Debug)]
pub struct DMoELayer {
    pub shared: FeedForward,
    pub t_experts: Vec<Expert>,
    pub m_experts: Vec<Expert>,
    pub t_router: Router,
    pub m_router: Router,
    pub k: usize,
}

/// Graph handles produced by one bank.
pub struct BankOutput {
    /// Mixed expert output `[N, d]`.
    pub y: Var,
    /// Softmax gate `[N, K]`.
    pub probs: Var,
    /// Selected experts, `k` per token, highest gate first.
    pub selected: Vec<usize>,
    /// Rows fed through experts (equals `N·k`).
    pub evaluated_rows: usize,
}

/// Graph handles produced by one DMoE layer.
pub struct DMoEGraphOutput {
    pub y: Var,
    pub t: BankOutput,
    pub m: BankOutput,
}

/// Plain-value result of one token through the layer.
#[derive(Clone, Debug)]
pub struct DMoETokenOutput {
    pub y: Vec<f64>,
    pub y_t: Vec<f64>,
    pub y_m: Vec<f64>,
    pub gate_t: GateResult,
    pub gate_m: GateResult,
}

impl DMoELayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &DMoEConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let up_std = 1.0 / (cfg.rank as f64).sqrt();
        let bank = |store: &mut ParamStore, tag: &str, rng: &mut R| -> Vec<Expert> {
            (0..cfg.experts)
                .map(|i| Expert::new(store, &format!("{name}.{tag}.{i}"), d, cfg.rank, up_std, rng))
                .collect()
        };
        let shared = FeedForward::new(store, &format!("{name}.shared"), d, d * cfg.ffn_mult, rng);
        let t_experts = bank(store, "t_expert", rng);
        let m_experts = bank(store, "m_expert", rng);
        let router = |store: &mut ParamStore, tag: &str, rng: &mut R| Router {
            weight: store.add(
                format!("{name}.{tag}"),
                Tensor::randn(&[cfg.experts, d], 1.0 / (d as f64).sqrt(), rng),
            ),
        };
        let t_router = router(store, "t_router", rng);
        let m_router = router(store, "m_router", rng);
        Ok(Self { shared, t_experts, m_experts, t_router, m_router, k: cfg.top_k })
    }

    pub fn num_experts(&self) -> usize {
        self.t_experts.len()
    }

    /// Route and mix one bank over `x: [N, d]`.
    pub fn bank_forward(
        g: &mut Graph,
        p: &Bound,
        x: Var,
        router: &Router,
        experts: &[Expert],
        k: usize,
    ) -> Result<BankOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err!("DMoE expects tokens as [N, d], got {:?}", s));
        }
        let n = s[0];
        let kk = experts.len();
        if k == 0 || k > kk {
            return Err(config_err!("top_k = {k} must lie in 1..={kk}"));
        }
        let logits = g.linear(x, p[router.weight], None)?;
        let probs = g.softmax(logits)?;
        let mut selected = Vec::with_capacity(n * k);
        for row in g.value(probs).data().chunks(kk) {
            selected.extend(topk(row, k)?);
        }
        let picked = g.take_along_last(probs, &selected, k)?;
        let denom = g.sum_axis(picked, 1)?;
        let g_hat = g.div(picked, denom)?;
        let g_hat = g.reshape(g_hat, &[n * k, 1])?;

        let mut y: Option<Var> = None;
        let mut evaluated_rows = 0;
        for (e, expert) in experts.iter().enumerate() {
            let slots: Vec<usize> = (0..n * k).filter(|&j| selected[j] == e).collect();
            if slots.is_empty() {
                continue;
            }
            let rows: Vec<usize> = slots.iter().map(|&j| j / k).collect();
            evaluated_rows += rows.len();
            let xe = g.gather_rows(x, &rows)?;
            let ye = expert.forward(g, p, xe)?;
            let we = g.gather_rows(g_hat, &slots)?;
            let ye = g.mul(ye, we)?;
            let contrib = g.scatter_add_rows(ye, &rows, n)?;
            y = Some(match y {
                Some(acc) => g.add(acc, contrib)?,
                None => contrib,
            });
        }
        let y = y.expect("k >= 1 selects at least one expert");
        Ok(BankOutput { y, probs, selected, evaluated_rows })
    }

    /// Full layer over `x: [N, d]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<DMoEGraphOutput> {
        let shared = self.shared.forward(g, p, x)?;
        let t = Self::bank_forward(g, p, x, &self.t_router, &self.t_experts, self.k)?;
        let m = Self::bank_forward(g, p, x, &self.m_router, &self.m_experts, self.k)?;
        let y = g.add(shared, t.y)?;
        let y = g.add(y, m.y)?;
        Ok(DMoEGraphOutput { y, t, m })
    }

    /// Single-token evaluation on plain values.
    pub fn forward_token(&self, store: &ParamStore, x: &[f64]) -> Result<DMoETokenOutput> {
        let shared = feed_forward_value(store, &self.shared, x)?;
        let gate_t = route(x, store.get(self.t_router.weight), self.k)?;
        let gate_m = route(x, store.get(self.m_router.weight), self.k)?;
        let mix = |gate: &GateResult, bank: &[Expert]| -> Result<Vec<f64>> {
            let mut out = vec![0.0; x.len()];
            for (&i, &w) in gate.selected.iter().zip(&gate.g_hat) {
                let e = expert_forward(x, store.get(bank[i].down), store.get(bank[i].up))?;
                out.iter_mut().zip(e).for_each(|(o, v)| *o += w * v);
            }
            Ok(out)
        };
        let y_t = mix(&gate_t, &self.t_experts)?;
        let y_m = mix(&gate_m, &self.m_experts)?;
        let y = shared
            .iter()
            .zip(&y_t)
            .zip(&y_m)
            .map(|((a, b), c)| a + b + c)
            .collect();
        Ok(DMoETokenOutput { y, y_t, y_m, gate_t, gate_m })
    }
}

fn matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let s = w.shape();
    if s.len() != 2 || s[1] != x.len() {
        return Err(shape_err!("matrix {:?} cannot multiply vector of length {}", s, x.len()));
    }
    Ok(w.data().chunks(s[1]).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect())
}

fn feed_forward_value(store: &ParamStore, ff: &FeedForward, x: &[f64]) -> Result<Vec<f64>> {
    let mut h = matvec(store.get(ff.w1), x)?;
    for (v, b) in h.iter_mut().zip(store.get(ff.b1).data()) {
        *v = gelu(*v + b);
    }
    let mut y = matvec(store.get(ff.w2), &h)?;
    for (v, b) in y.iter_mut().zip(store.get(ff.b2).data()) {
        *v += b;
    }
    Ok(y)
}

/// Softmax gate, top-`k` selection and renormalization for one token.
/// `router` is the `[K, d]` gate matrix.
pub fn route(x: &[f64], router: &Tensor, k: usize) -> Result<GateResult> {
    let logits = matvec(router, x)?;
    if logits.iter().any(|v| v.is_nan()) {
        return Err(crate::Error::Numeric("router logits contain NaN".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    GateResult::from_probs(e.into_iter().map(|v| v / s).collect(), k)
}

/// `up · GELU(down · x)` on plain values.
pub fn expert_forward(x: &[f64], down: &Tensor, up: &Tensor) -> Result<Vec<f64>> {
    let h: Vec<f64> = matvec(down, x)?.into_iter().map(gelu).collect();
    matvec(up, &h)
}

pub const DIS_EPS: f64 = 1e-8;

/// Squared cosine similarity between the two bank outputs of one token.
pub fn dissimilarity_loss(y_t: &[f64], y_m: &[f64]) -> f64 {
    let (mut s, mut qa, mut qb) = (0.0, 0.0, 0.0);
    for (a, b) in y_t.iter().zip(y_m) {
        s += a * b;
        qa += a * a;
        qb += b * b;
    }
    (s * s / (qa * qb).max(DIS_EPS * DIS_EPS)).min(1.0)
}

/// Mean squared cosine similarity over the rows of `[N, d]` bank outputs.
pub fn dissimilarity_loss_graph(g: &mut Graph, y_t: Var, y_m: Var) -> Result<Var> {
    let c = g.cos_sq_rows(y_t, y_m, DIS_EPS)?;
    Ok(g.mean_all(c))
}

fn pair_masks(task_ids: &[usize]) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let b = task_ids.len();
    let mut same = vec![0.0; b * b];
    let mut diff = vec![0.0; b * b];
    let (mut ns, mut nd) = (0, 0);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            if task_ids[i] == task_ids[j] {
                same[i * b + j] = 1.0;
                ns += 1;
            } else {
                diff[i * b + j] = 1.0;
                nd += 1;
            }
        }
    }
    (same, diff, ns, nd)
}

fn check_cluster_inputs(rows: usize, k: usize, task_ids: &[usize]) -> Result<()> {
    if rows != task_ids.len() {
        return Err(shape_err!("{} routing rows but {} task ids", rows, task_ids.len()));
    }
    if rows < 2 {
        return Err(validation_err!("router clustering needs at least two samples"));
    }
    if k == 0 {
        return Err(validation_err!("router clustering needs at least one expert"));
    }
    Ok(())
}

/// Router-clustering hinge over per-sample routing distributions `dist: [B, K]`.
///
/// Same-task pairs are pushed above `1/K + δ`, different-task pairs below
/// `1/K − δ`; each term is the mean hinge over its ordered pairs `i ≠ j`, and an
/// empty pair set contributes zero.
pub fn cluster_loss(dist: &Tensor, task_ids: &[usize], delta: f64) -> Result<f64> {
    let s = dist.shape();
    if s.len() != 2 {
        return Err(shape_err!("routing distributions must be [B, K], got {:?}", s));
    }
    let (b, k) = (s[0], s[1]);
    check_cluster_inputs(b, k, task_ids)?;
    for (i, row) in dist.data().chunks(k).enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(validation_err!("routing row {i} sums to {total}, not 1"));
        }
    }
    let base = 1.0 / k as f64;
    let (mut same, mut diff, mut ns, mut nd) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let sij: f64 = dist.data()[i * k..(i + 1) * k]
                .iter()
                .zip(&dist.data()[j * k..(j + 1) * k])
                .map(|(a, c)| a * c)
                .sum();
            if task_ids[i] == task_ids[j] {
                same += (base + delta - sij).max(0.0);
                ns += 1;
            } else {
                diff += (sij - (base - delta)).max(0.0);
                nd += 1;
            }
        }
    }
    let l_same = if ns > 0 { same / ns as f64 } else { 0.0 };
    let l_diff = if nd > 0 { diff / nd as f64 } else { 0.0 };
    Ok(l_same + l_diff)
}

/// Graph form of [`cluster_loss`]; `dist: [B, K]`.
pub fn cluster_loss_graph(g: &mut Graph, dist: Var, task_ids: &[usize], delta: f64) -> Result<Var> {
    let s = g.shape(dist).to_vec();
    if s.len() != 2 {
        return Err(shape_err!("routing distributions must be [B, K], got {:?}", s));
    }
    let (b, k) = (s[0], s[1]);
    check_cluster_inputs(b, k, task_ids)?;
    let base = 1.0 / k as f64;
    let (same, diff, ns, nd) = pair_masks(task_ids);
    let sim = g.matmul_t(dist, dist, false, true)?;
    let mut total: Option<Var> = None;
    if ns > 0 {
        // max(0, base + δ − S) averaged over same-task pairs
        let neg = g.scale(sim, -1.0);
        let h = g.add_scalar(neg, base + delta);
        let h = g.relu(h);
        let mask = g.constant(Tensor::from_parts(vec![b, b], same.iter().map(|m| m / ns as f64).collect()));
        let h = g.mul(h, mask)?;
        total = Some(g.sum_all(h));
    }
    if nd > 0 {
        let h = g.add_scalar(sim, -(base - delta));
        let h = g.relu(h);
        let mask = g.constant(Tensor::from_parts(vec![b, b], diff.iter().map(|m| m / nd as f64).collect()));
        let h = g.mul(h, mask)?;
        let d = g.sum_all(h);
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// Load-balance loss of one bank: `K · Σ_i f_i · P_i`, with `f_i` the fraction
/// of the `tokens · k` selections that went to expert `i` and `P_i` the mean gate
/// probability of expert `i`.
pub fn balance_loss(gates: &[GateResult], experts: usize) -> Result<f64> {
    if gates.is_empty() {
        return Err(validation_err!("balance loss needs at least one token"));
    }
    let mut f = vec![0.0; experts];
    let mut prob = vec![0.0; experts];
    let mut selections = 0usize;
    for gate in gates {
        if gate.g.len() != experts {
            return Err(shape_err!("gate over {} experts, expected {}", gate.g.len(), experts));
        }
        for &i in &gate.selected {
            f[i] += 1.0;
        }
        selections += gate.selected.len();
        prob.iter_mut().zip(&gate.g).for_each(|(p, g)| *p += g);
    }
    let n = gates.len() as f64;
    Ok(experts as f64
        * f.iter()
            .zip(&prob)
            .map(|(fi, pi)| fi / selections as f64 * pi / n)
            .sum::<f64>())
}

/// Graph form of [`balance_loss`] for one bank.
pub fn balance_loss_graph(g: &mut Graph, bank: &BankOutput) -> Result<Var> {
    let s = g.shape(bank.probs).to_vec();
    let (n, kk) = (s[0], s[1]);
    let mut counts = vec![0.0; kk];
    for &i in &bank.selected {
        counts[i] += 1.0;
    }
    let total = bank.selected.len() as f64;
    let f = g.constant(Tensor::from_parts(
        vec![1, kk],
        counts.iter().map(|c| kk as f64 * c / total / n as f64).collect(),
    ));
    let weighted = g.mul(bank.probs, f)?;
    Ok(g.sum_all(weighted))
}

/// Per-sample routing distributions: the mean gate over each sample's tokens.
/// `probs: [B·T, K]` → `[B, K]`.
pub fn sample_distributions(g: &mut Graph, probs: Var, batch: usize) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 2 || s[0] % batch != 0 {
        return Err(shape_err!("cannot split {:?} routing rows into {} samples", s, batch));
    }
    let r = g.reshape(probs, &[batch, s[0] / batch, s[1]])?;
    let m = g.mean_axis(r, 1)?;
    g.reshape(m, &[batch, s[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(seed: u64, k: usize) -> (ParamStore, DMoELayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = DMoEConfig { dim: 6, experts: 4, top_k: k, rank: 3, ffn_mult: 2 };
        let l = DMoELayer::new(&mut store, "l", &cfg, &mut rng).unwrap();
        (store, l)
    }

    #[test]
    fn route_uniform_logits_uses_tie_rule() {
        let router = Tensor::zeros(&[8, 3]);
        let gate = route(&[0.3, -1.0, 2.0], &router, 2).unwrap();
        assert_eq!(gate.selected, vec![0, 1]);
        assert_eq!(gate.g_hat, vec![0.5, 0.5]);
    }

    #[test]
    fn route_closed_form() {
        // logits [0, 0, ln2, ln2] from a 4×1 router and x = [1]
        let l2 = 2f64.ln();
        let router = Tensor::new(vec![4, 1], vec![0.0, 0.0, l2, l2]).unwrap();
        let gate = route(&[1.0], &router, 2).unwrap();
        let want = [1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0];
        for (a, b) in gate.g.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(gate.selected, vec![2, 3]);
        for w in &gate.g_hat {
            assert!((w - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn route_rejects_k_above_bank() {
        let router = Tensor::zeros(&[4, 2]);
        assert!(matches!(route(&[1.0, 1.0], &router, 5), Err(crate::Error::Config(_))));
    }

    #[test]
    fn expert_zero_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let down = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let up = Tensor::randn(&[4, 2], 1.0, &mut rng);
        assert!(expert_forward(&[0.0; 4], &down, &up).unwrap().iter().all(|&v| v == 0.0));
        let x = [0.5, -1.0, 2.0, 0.1];
        assert!(expert_forward(&x, &down, &Tensor::zeros(&[4, 2]))
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn zero_expert_banks_leave_shared_path() {
        let (mut store, l) = layer(12, 2);
        for e in l.t_experts.iter().chain(&l.m_experts) {
            store.get_mut(e.up).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = [0.1, 0.2, -0.3, 0.4, 0.0, 1.0];
        let out = l.forward_token(&store, &x).unwrap();
        let shared = feed_forward_value(&store, &l.shared, &x).unwrap();
        assert_eq!(out.y, shared);
        assert!(out.y_t.iter().chain(&out.y_m).all(|&v| v == 0.0));
    }

    #[test]
    fn forced_single_expert() {
        let (mut store, l) = layer(13, 1);
        for id in [l.shared.w1, l.shared.b1, l.shared.w2, l.shared.b2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        // force T to expert 2 and M to expert 1 by a huge first-coordinate gate
        for (router, j) in [(&l.t_router, 2usize), (&l.m_router, 1usize)] {
            let w = store.get_mut(router.weight);
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
            w.data_mut()[j * 6] = 100.0;
        }
        let x = [1.0, 0.2, -0.3, 0.4, 0.0, 1.0];
        let out = l.forward_token(&store, &x).unwrap();
        assert_eq!(out.gate_t.selected, vec![2]);
        assert_eq!(out.gate_m.selected, vec![1]);
        let et = expert_forward(&x, store.get(l.t_experts[2].down), store.get(l.t_experts[2].up)).unwrap();
        let em = expert_forward(&x, store.get(l.m_experts[1].down), store.get(l.m_experts[1].up)).unwrap();
        for i in 0..6 {
            assert!((out.y[i] - (et[i] + em[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_matches_token_path() {
        let (store, l) = layer(14, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = l.forward(&mut g, &p, xv).unwrap();
        assert_eq!(out.t.evaluated_rows, 5 * 2);
        assert_eq!(out.m.evaluated_rows, 5 * 2);
        for (r, row) in x.data().chunks(6).enumerate() {
            let tok = l.forward_token(&store, row).unwrap();
            for i in 0..6 {
                assert!((g.value(out.y).data()[r * 6 + i] - tok.y[i]).abs() < 1e-12);
                assert!((g.value(out.t.y).data()[r * 6 + i] - tok.y_t[i]).abs() < 1e-12);
            }
            assert_eq!(&out.m.selected[r * 2..r * 2 + 2], tok.gate_m.selected.as_slice());
        }
    }

    #[test]
    fn dissimilarity_examples() {
        assert_eq!(dissimilarity_loss(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(dissimilarity_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(dissimilarity_loss(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]), 1.0);
        assert_eq!(dissimilarity_loss(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn cluster_examples() {
        let one_hot = |i: usize| Tensor::from_fn(&[8], |j| if j == i { 1.0 } else { 0.0 }).into_data();
        let two = |a: Vec<f64>, b: Vec<f64>| Tensor::new(vec![2, 8], [a, b].concat()).unwrap();
        assert_eq!(cluster_loss(&two(one_hot(3), one_hot(3)), &[0, 0], 0.1).unwrap(), 0.0);
        let uni = vec![0.125; 8];
        let l = cluster_loss(&two(uni.clone(), uni), &[0, 0], 0.1).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        assert_eq!(cluster_loss(&two(one_hot(1), one_hot(2)), &[0, 1], 0.1).unwrap(), 0.0);
        let l = cluster_loss(&two(one_hot(4), one_hot(4)), &[0, 1], 0.1).unwrap();
        assert!((l - 0.975).abs() < 1e-12);
    }

    #[test]
    fn cluster_validation() {
        let bad = Tensor::new(vec![2, 2], vec![0.5, 0.6, 0.5, 0.5]).unwrap();
        assert!(matches!(cluster_loss(&bad, &[0, 1], 0.1), Err(crate::Error::Validation(_))));
        let single = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(cluster_loss(&single, &[0], 0.1).is_err());
    }

    #[test]
    fn cluster_graph_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let logits = Tensor::randn(&[6, 8], 2.0, &mut rng);
        let ids = [0, 1, 0, 2, 1, 1];
        let mut g = Graph::new();
        let lv = g.constant(logits);
        let pv = g.softmax(lv).unwrap();
        let probs = g.value(pv).clone();
        let lg = cluster_loss_graph(&mut g, pv, &ids, 0.1).unwrap();
        let plain = cluster_loss(&probs, &ids, 0.1).unwrap();
        assert!((g.value(lg).item() - plain).abs() < 1e-12);
    }

    #[test]
    fn balance_examples() {
        // perfectly uniform routing over 4 experts with k = 2
        let gates: Vec<GateResult> = (0..4)
            .map(|t| GateResult {
                g: vec![0.25; 4],
                selected: vec![t, (t + 1) % 4],
                g_hat: vec![0.5, 0.5],
            })
            .collect();
        assert!((balance_loss(&gates, 4).unwrap() - 1.0).abs() < 1e-12);

        // everything on expert 0 with a near one-hot gate
        let eps = 1e-9;
        let collapsed: Vec<GateResult> = (0..10)
            .map(|_| GateResult::from_probs(vec![1.0 - 7.0 * eps, eps, eps, eps, eps, eps, eps, eps], 1).unwrap())
            .collect();
        assert!((balance_loss(&collapsed, 8).unwrap() - 8.0).abs() < 1e-6);
        assert!(balance_loss(&[], 8).is_err());
    }

    #[test]
    fn balance_graph_matches_plain() {
        let (store, l) = layer(17, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = Tensor::randn(&[7, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = l.forward(&mut g, &p, xv).unwrap();
        let lb = balance_loss_graph(&mut g, &out.t).unwrap();
        let gates: Vec<GateResult> = x
            .data()
            .chunks(6)
            .map(|row| route(row, store.get(l.t_router.weight), 2).unwrap())
            .collect();
        assert!((g.value(lb).item() - balance_loss(&gates, 4).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = DMoEConfig { dim: 8, experts: 4, top_k: 5, rank: 2, ffn_mult: 4 };
        assert!(bad.validate().is_err());
        let bad = DMoEConfig { dim: 8, experts: 4, top_k: 2, rank: 8, ffn_mult: 4 };
        assert!(bad.validate().is_err());
    }
}
