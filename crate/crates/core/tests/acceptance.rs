mod common;

use common::{dense_oracle, layer};
use mmtrack::autodiff::{gradient_check, Graph, Tensor, Var};
use mmtrack::dmoe::{
    balance_loss_graph, cluster_loss, cluster_loss_graph, dissimilarity_loss, dissimilarity_loss_graph,
    sample_distributions, DMoELayer,
};
use mmtrack::error::Error;
use mmtrack::fusion::{FusionConfig, MetaMerger, PerturbationConfig, Region};
use mmtrack::harness::analysis::total_variation;
use mmtrack::harness::checkpoint::{from_bytes, VERSION};
use mmtrack::harness::{
    evaluate, load_checkpoint, route_analysis, save_checkpoint, score_tracks, track_with, train_with, EvalSet,
    TrainConfig,
};
use mmtrack::model::{
    total_loss, Bbox, LossComponents, LossWeights, ModelConfig, TrackInputs, TrackTargets, TrackerModel,
};
use mmtrack::params::{Bound, ParamStore};
use mmtrack::sim::{corrupt_missing, generate_sequence, Missing, Modality, SimConfig, SpeedLevel, SyntheticSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::process::ExitCode;
use std::time::Instant;

const MAIN_SEED: u64 = 0;
const ABLATION_STEPS: usize = 2000;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn fail(e: impl std::fmt::Display) -> Outcome {
    outcome(false, format!("error: {e}"))
}

fn ratio(n: usize, d: usize) -> String {
    format!("{n}/{d}")
}

// ---------------------------------------------------------------- 1

fn tiny_inputs(cfg: &ModelConfig, b: usize, seed: u64) -> TrackInputs {
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

fn reduce(g: &mut Graph, y: Var, seed: u64) -> mmtrack::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::uniform(&g.shape(y).to_vec(), -1.0, 1.0, &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn primitive_errors() -> mmtrack::Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = Tensor::uniform(&[3, 5], -1.5, 1.5, &mut rng);
    let other = Tensor::uniform(&[3, 5], -1.5, 1.5, &mut rng);
    let w = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng);
    let img = Tensor::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
    let kern = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let bias = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
    let batched = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let batched_b = Tensor::uniform(&[2, 5, 4], -1.0, 1.0, &mut rng);
    let soft = Tensor::from_fn(&[3, 5], |i| if i == 2 { 1.0 } else { (i as f64 * 0.37).sin().abs() });
    let mut out = Vec::new();
    let unary: [(&str, fn(&mut Graph, Var) -> Var); 7] = [
        ("sigmoid", Graph::sigmoid),
        ("gelu", Graph::gelu),
        ("exp", Graph::exp),
        ("tanh", Graph::tanh),
        ("square", Graph::square),
        ("relu", Graph::relu),
        ("layer_norm", |g, v| g.layer_norm(v, 1e-5)),
    ];
    for (name, op) in unary {
        let e = gradient_check(
            |g, v| {
                let y = op(g, v);
                reduce(g, y, 1)
            },
            &x,
            1e-5,
        )?;
        out.push((name, e));
    }
    let normalizers: [(&str, fn(&mut Graph, Var) -> mmtrack::Result<Var>); 2] =
        [("softmax", Graph::softmax), ("log_softmax", Graph::log_softmax)];
    for (name, op) in normalizers {
        out.push((
            name,
            gradient_check(
                |g, v| {
                    let y = op(g, v)?;
                    reduce(g, y, 2)
                },
                &x,
                1e-5,
            )?,
        ));
    }
    out.push((
        "linear",
        gradient_check(
            |g, v| {
                let wv = g.constant(w.clone());
                let y = g.linear(v, wv, None)?;
                reduce(g, y, 3)
            },
            &x,
            1e-5,
        )?,
    ));
    out.push((
        "bmm",
        gradient_check(
            |g, v| {
                let b = g.constant(batched_b.clone());
                let y = g.bmm(v, b, true)?;
                reduce(g, y, 4)
            },
            &batched,
            1e-5,
        )?,
    ));
    out.push((
        "conv2d",
        gradient_check(
            |g, v| {
                let (k, b) = (g.constant(kern.clone()), g.constant(bias.clone()));
                let y = g.conv2d(v, k, b)?;
                reduce(g, y, 5)
            },
            &img,
            1e-5,
        )?,
    ));
    out.push(("cross_entropy", gradient_check(|g, v| g.cross_entropy(v, &[0, 3, 4]), &x, 1e-5)?));
    out.push(("focal_bce", gradient_check(|g, v| g.focal_bce(v, &soft, 2.0, 4.0), &x, 1e-5)?));
    out.push((
        "cos_sq_rows",
        gradient_check(
            |g, v| {
                let o = g.constant(other.clone());
                let y = g.cos_sq_rows(v, o, 1e-8)?;
                reduce(g, y, 6)
            },
            &x,
            1e-5,
        )?,
    ));

    // DMoE layer with all three auxiliary losses
    let (store, l) = layer(7, 6, 4, 2, 3);
    let batch = 3;
    let tokens = Tensor::randn(&[batch * 4, 6], 1.0, &mut rng);
    let dmoe_objective = |g: &mut Graph, l: &DMoELayer, p: &Bound, x: Var| -> mmtrack::Result<Var> {
        let o = l.forward(g, p, x)?;
        let main = g.square(o.y);
        let main = g.mean_all(main);
        let dis = dissimilarity_loss_graph(g, o.t.y, o.m.y)?;
        let bt = balance_loss_graph(g, &o.t)?;
        let bm = balance_loss_graph(g, &o.m)?;
        let dist = sample_distributions(g, o.m.probs, batch)?;
        let cl = cluster_loss_graph(g, dist, &[0, 1, 0], 0.1)?;
        let mut total = g.add(main, dis)?;
        for v in [bt, bm, cl] {
            total = g.add(total, v)?;
        }
        Ok(total)
    };
    out.push((
        "dmoe_layer",
        gradient_check(
            |g, v| {
                let p = store.bind(g, false);
                dmoe_objective(g, &l, &p, v)
            },
            &tokens,
            1e-5,
        )?,
    ));

    let fcfg = FusionConfig {
        image_channels: 3,
        patch: 4,
        dim: 6,
        spatial_kernel: 3,
        channel_reduction: 2,
        merge_kernel: 3,
        template_grid: 2,
        search_grid: 2,
        meta_init_std: 0.02,
    };
    let mut mstore = ParamStore::new();
    let mm = MetaMerger::new(&mut mstore, "mm", &fcfg, &mut rng);
    let rgb = Tensor::uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
    let aux = Tensor::uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
    out.push((
        "meta_merger",
        gradient_check(
            |g, v| {
                let p = mstore.bind(g, false);
                let xv = g.constant(aux.clone());
                let y = mm.forward(g, &p, v, xv, Region::Search)?;
                reduce(g, y, 7)
            },
            &rgb,
            1e-5,
        )?,
    ));
    Ok(out)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let prims = match primitive_errors() {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let (worst_name, worst_prim) = prims.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });

    let cfg = ModelConfig::tiny();
    let model = match TrackerModel::new(cfg.clone(), 7) {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let inp = tiny_inputs(&cfg, 3, 8);
    let tg = TrackTargets {
        boxes: (0..3).map(|i| Bbox::new(0.3 + 0.1 * i as f64, 0.6 - 0.05 * i as f64, 0.25, 0.3)).collect(),
        tasks: vec![0, 1, 2],
    };
    let w = LossWeights::default();
    let mut worst_model: f64 = 0.0;
    let mut coords = 0;
    for (id, _, t) in model.params.iter() {
        coords += t.numel();
        let err = gradient_check(
            |g, x| {
                let mut p = model.bind(g, false);
                p.replace(id, x);
                Ok(model.objective(g, &p, &inp, &tg, &w, 0.1)?.total)
            },
            t,
            1e-5,
        );
        match err {
            Ok(e) => worst_model = worst_model.max(e),
            Err(e) => return fail(e),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_model < 1e-3 && worst_prim < 1e-4 && secs < 120.0,
        format!(
            "full model {coords} coords max rel err {worst_model:.2e} (< 1e-3); primitives max {worst_prim:.2e} \
             at {worst_name} (< 1e-4); {secs:.1} s (< 120 s)"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let (store, l) = layer(3, 12, 8, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sparse = match l.forward_token(&store, &x) {
            Ok(o) => o.y,
            Err(e) => return fail(e),
        };
        let dense = dense_oracle(&store, &l, &x);
        for (a, b) in sparse.iter().zip(&dense) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-10, format!("k = K = 8, 100 tokens, max |sparse - dense| = {worst:.2e} (<= 1e-10)"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let a = [1.0, 2.0, -0.5, 3.0];
    let orth = [2.0, -1.0, 0.0, 0.0];
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    let dis = [dissimilarity_loss(&a, &orth), dissimilarity_loss(&a, &a), dissimilarity_loss(&a, &neg)];
    let dis_ok = (dis[0] - 0.0).abs() < 1e-12 && (dis[1] - 1.0).abs() < 1e-12 && (dis[2] - 1.0).abs() < 1e-12;

    let k = 8;
    let one_hot = |e: usize| (0..k).map(|i| if i == e { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let rows = |r: [Vec<f64>; 2]| Tensor::new(vec![2, k], r.concat()).unwrap();
    let cases = [
        (rows([one_hot(3), one_hot(3)]), [0, 0], 0.0),
        (rows([vec![1.0 / 8.0; 8], vec![1.0 / 8.0; 8]]), [0, 0], 0.1),
        (rows([one_hot(1), one_hot(5)]), [0, 1], 0.0),
        (rows([one_hot(2), one_hot(2)]), [0, 1], 0.975),
    ];
    let mut got = Vec::new();
    let mut cl_ok = true;
    for (g, ids, want) in &cases {
        match cluster_loss(g, ids, 0.1) {
            Ok(v) => {
                cl_ok &= (v - want).abs() <= 1e-12;
                got.push(v);
            }
            Err(e) => return fail(e),
        }
    }
    outcome(
        dis_ok && cl_ok,
        format!(
            "L_dis orthogonal/equal/opposite = {:.3e}/{:.15}/{:.15}; L_cluster = {:?} (want [0, 0.1, 0, 0.975])",
            dis[0], dis[1], dis[2], got
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let w = LossWeights::default();
    match total_loss(&LossComponents::from_array([1.0; 7]), &w) {
        Ok(v) => outcome(
            (v - 10.11).abs() <= 1e-12 && w.balance == 0.01,
            format!("all components 1, weights {:?}: total = {v:.15} (10.11 +/- 1e-12)", w.coefficients()),
        ),
        Err(e) => fail(e),
    }
}

// ---------------------------------------------------------------- training runs

struct Trained {
    cfg: TrainConfig,
    model: TrackerModel,
    secs: f64,
}

fn run(label: &str, cfg: TrainConfig) -> mmtrack::Result<Trained> {
    let start = Instant::now();
    let steps = cfg.steps;
    let trained = train_with(&cfg, |row| {
        if (row.step + 1) % 1000 == 0 || row.step + 1 == steps {
            eprintln!(
                "[{label}] step {}/{steps} loss {:.4} ({:.0} s)",
                row.step + 1,
                row.total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    Ok(Trained { cfg, model: trained.model, secs: start.elapsed().as_secs_f64() })
}

fn eval_sequences(cfg: &TrainConfig, modalities: &[Modality]) -> mmtrack::Result<Vec<SyntheticSequence>> {
    EvalSet::from_config(cfg, modalities).sequences(&cfg.data)
}

fn relative_auc_drop(t: &Trained) -> mmtrack::Result<(f64, f64, f64)> {
    let seqs = eval_sequences(&t.cfg, &Modality::TRAINING)?;
    let full = evaluate(&t.model, &seqs)?.overall.auc;
    let dropped: Vec<_> = seqs.iter().map(|s| corrupt_missing(s, Missing::X)).collect();
    let missing = evaluate(&t.model, &dropped)?.overall.auc;
    Ok((full, missing, (full - missing) / full))
}

fn gap(model: &TrackerModel, seqs: &[SyntheticSequence]) -> mmtrack::Result<(f64, f64, f64)> {
    let a = route_analysis(model, seqs)?;
    let (intra, inter) = a.routing_similarity();
    let t = a.t_router();
    let freq = |s: SpeedLevel| t.iter().find(|r| r.0 == s).map(|r| r.1.clone()).unwrap_or_default();
    Ok((intra, inter, total_variation(&freq(SpeedLevel::Slow), &freq(SpeedLevel::Extreme))))
}

// ---------------------------------------------------------------- 5

fn criterion_5(main: &Trained) -> mmtrack::Result<Outcome> {
    let seqs = eval_sequences(&main.cfg, &Modality::TRAINING)?;
    let trained = evaluate(&main.model, &seqs)?.overall.mean_iou;
    let init = TrackerModel::new(main.cfg.model.clone(), main.cfg.seed)?;
    let random = evaluate(&init, &seqs)?.overall.mean_iou;
    let frames = seqs.iter().map(|s| s.frames() - 1).sum::<usize>();
    Ok(outcome(
        trained >= 0.5 && random <= 0.2 && main.cfg.steps <= 10_000 && main.secs < 1800.0,
        format!(
            "{} steps in {:.0} s (< 1800 s); held-out mean IoU {trained:.3} (>= 0.5), random init {random:.3} \
             (<= 0.2), {} sequences / {frames} frames",
            main.cfg.steps,
            main.secs,
            seqs.len()
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6(base: &TrainConfig) -> mmtrack::Result<Outcome> {
    let mut wins = 0;
    let mut parts = Vec::new();
    for &seed in &ABLATION_SEEDS {
        let cfg = TrainConfig { seed, steps: ABLATION_STEPS, ..base.clone() };
        let with = run(&format!("perturb seed {seed}"), cfg.clone())?;
        let without =
            run(&format!("no perturb seed {seed}"), TrainConfig { perturb: PerturbationConfig::disabled(), ..cfg })?;
        let (fa, ma, da) = relative_auc_drop(&with)?;
        let (fb, mb, db) = relative_auc_drop(&without)?;
        if da < db {
            wins += 1;
        }
        parts.push(format!("seed {seed}: with {fa:.3}->{ma:.3} drop {da:.3}, without {fb:.3}->{mb:.3} drop {db:.3}"));
    }
    Ok(outcome(
        wins == ABLATION_SEEDS.len(),
        format!(
            "smaller relative drop with perturbation in {} pairs; {}",
            ratio(wins, ABLATION_SEEDS.len()),
            parts.join("; ")
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7(main: &Trained) -> mmtrack::Result<Outcome> {
    let seqs = eval_sequences(&main.cfg, &Modality::TRAINING)?;
    let (intra, inter, tv) = gap(&main.model, &seqs)?;
    let mut loss = main.cfg.loss.clone();
    loss.cluster = 0.0;
    let ablated = run("no cluster", TrainConfig { loss, ..main.cfg.clone() })?;
    let (ai, ax, _) = gap(&ablated.model, &seqs)?;
    let (g1, g0) = (intra - inter, ai - ax);
    Ok(outcome(
        g1 >= 0.05 && g0 < g1 && tv > 0.1,
        format!(
            "with cluster intra {intra:.3} inter {inter:.3} gap {g1:.3} (>= 0.05); without gap {g0:.3} (< {g1:.3}); \
             T-router TV slow/extreme {tv:.3} (> 0.1)"
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8(model: &TrackerModel) -> mmtrack::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut seqs = Vec::new();
    for i in 0..100 {
        let modality = Modality::ALL[rng.gen_range(0..Modality::ALL.len())];
        let speed = SpeedLevel::ALL[rng.gen_range(0..SpeedLevel::ALL.len())];
        seqs.push(generate_sequence(&SimConfig {
            frames: 12,
            modality,
            speed,
            seed: 90_000 + i,
            ..SimConfig::default()
        })?);
    }
    let mut bad = 0usize;
    let mut frames = 0usize;
    for which in [Missing::Rgb, Missing::X] {
        let corrupted: Vec<_> = seqs.iter().map(|s| corrupt_missing(s, which)).collect();
        let preds = track_with(model, &corrupted, |_, out| {
            for t in [&out.scores, &out.boxes, &out.task_logits] {
                if !t.is_finite() {
                    bad += 1;
                }
            }
        })?;
        for track in &preds {
            for b in track {
                frames += 1;
                if !(b.is_finite() && b.w > 0.0 && b.h > 0.0) {
                    bad += 1;
                }
            }
        }
        score_tracks(&corrupted, &preds)?;
    }
    Ok(outcome(bad == 0, format!("100 sequences x {{rgb, x}} zeroed: {frames} boxes, {bad} non-finite or invalid")))
}

// ---------------------------------------------------------------- 9

fn criterion_9(cfg: &TrainConfig, model: &TrackerModel) -> mmtrack::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.dmt");
    save_checkpoint(cfg, model, &path)?;
    let (cfg2, back) = load_checkpoint(&path)?;
    let mut exact = cfg2 == *cfg;
    for ((_, name, a), (_, name2, b)) in model.params.iter().zip(back.params.iter()) {
        exact &= name == name2 && a.shape() == b.shape();
        exact &= a.data().iter().zip(b.data()).all(|(x, y)| (*x as f32).to_bits() == (*y as f32).to_bits());
        exact &= b.data().iter().all(|&y| y == (y as f32) as f64);
    }

    let bytes = std::fs::read(&path)?;
    let mut kinds = Vec::new();
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    kinds.push(("bad magic", matches!(from_bytes(&magic), Err(Error::BadMagic))));
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&(VERSION + 1).to_be_bytes());
    kinds.push(("version", matches!(from_bytes(&version), Err(Error::Version { .. }))));
    kinds.push(("truncated", matches!(from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Checksum(_)))));
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x10;
    kinds.push(("flipped byte", matches!(from_bytes(&flipped), Err(Error::Checksum(_)))));
    // consistent checksum over a wrong tensor count
    let text_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let at = 16 + text_len;
    let mut body = bytes[..bytes.len() - 4].to_vec();
    let count = u32::from_le_bytes(body[at..at + 4].try_into().unwrap());
    body[at..at + 4].copy_from_slice(&(count + 1).to_le_bytes());
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    kinds.push(("malformed", matches!(from_bytes(&body), Err(Error::Malformed(_)))));
    let unreadable = load_checkpoint(&dir.path().join("missing.dmt")).is_err();
    kinds.push(("missing file", unreadable));

    let ok = exact && kinds.iter().all(|k| k.1);
    let listed: Vec<String> = kinds.iter().map(|(n, v)| format!("{n} {}", if *v { "ok" } else { "WRONG" })).collect();
    Ok(outcome(ok, format!("{} tensors bit-exact at f32: {exact}; errors: {}", model.params.len(), listed.join(", "))))
}

// ---------------------------------------------------------------- 10

fn criterion_10(main: &Trained) -> mmtrack::Result<Outcome> {
    let seqs = eval_sequences(&main.cfg, &[Modality::HeldOut])?;
    let report = evaluate(&main.model, &seqs)?;
    let floor = 1.0 / 21.0 + 0.1;
    Ok(outcome(
        report.overall.auc > floor,
        format!(
            "held-out modality AUC {:.3} (> {floor:.4}), mean IoU {:.3}, {} sequences",
            report.overall.auc,
            report.overall.mean_iou,
            seqs.len()
        ),
    ))
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    let flat = |r: mmtrack::Result<Outcome>| r.unwrap_or_else(fail);

    report(1, "gradient correctness", criterion_1());
    report(2, "sparse/dense equivalence", criterion_2());
    report(3, "decoupling and clustering closed forms", criterion_3());
    report(4, "objective composition", criterion_4());

    let base = TrainConfig { seed: MAIN_SEED, ..TrainConfig::default() };
    match run("main", base.clone()) {
        Ok(main) => {
            report(5, "end-to-end learning", flat(criterion_5(&main)));
            report(6, "missing-modality robustness", flat(criterion_6(&base)));
            report(7, "router specialization", flat(criterion_7(&main)));
            report(8, "zeroed-modality robustness", flat(criterion_8(&main.model)));
            report(9, "checkpoint persistence", flat(criterion_9(&main.cfg, &main.model)));
            report(10, "unseen modality", flat(criterion_10(&main)));
        }
        Err(e) => {
            for (n, name) in [
                (5, "end-to-end learning"),
                (6, "missing-modality robustness"),
                (7, "router specialization"),
                (8, "zeroed-modality robustness"),
                (9, "checkpoint persistence"),
                (10, "unseen modality"),
            ] {
                report(n, name, fail(&e));
            }
        }
    }

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
