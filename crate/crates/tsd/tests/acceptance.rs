//! Acceptance suite: one test per release criterion, each printing a single
//! `criterion NN <name>: PASS/FAIL (<detail>)` line before asserting.
//!
//! Criteria 6 through 9 share one desk-scale CBF study (teacher FCN(3, 32),
//! student FCN(2, 4), 30 train / 900 test, 5 seeds) built once in a
//! process-wide fixture; the other criteria are self-contained and fast.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use tsd::data::{generate_cbf, prepare, split_train_val, Instance, TimeSeriesDataset};
use tsd::distill::{
    distill, grid_search_runs, train_base, train_teacher_runs, select_teacher, tsd_loss,
    tsd_loss_on_tape, DistillConfig, Objective, TrainedArtifact,
};
use tsd::metrics::{auc_prc, auc_roc, predictive_kl, saliency_mse, top1_agreement};
use tsd::models::{build_model, forward, ModelParams, ModelSpec};
use tsd::rng::stream;
use tsd::saliency::{
    batched_saliency_on_tape, gradient_saliency, integrated_gradients, make_grid, occlusion_map,
    temporal_saliency, SaliencyProfile, SaliencyVariant,
};
use tsd::tensor::{softmax_temperature, Tape, Tensor};

const TEST_POOL_SEED_FLIP: u64 = 0x9E37_79B9_7F4A_7C15;

// Desk-scale study constants shared by criteria 6 through 10.
const DESK_SEED: u64 = 0;
const DESK_VAL_FRACTION: f64 = 0.3;
const DESK_BETA: f64 = 0.5;

fn verdict(num: u32, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {num:02} {name}: {tag} ({detail})");
    assert!(pass, "criterion {num:02} {name}: {detail}");
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn random_instance(r: &mut impl Rng, t_len: usize, classes: usize) -> Instance {
    Instance {
        values: (0..t_len).map(|_| r.random::<f64>() * 2.0 - 1.0).collect(),
        label: r.random_range(0..classes),
        prepared: true,
    }
}

// ---------------------------------------------------------------------------
// criterion 1: finite-difference gradient suite
// ---------------------------------------------------------------------------

fn grad_leaf(tape: &Tape, shape: Vec<usize>, values: Vec<f64>) -> tsd::tensor::Var {
    let mut t = Tensor::new(shape, values).unwrap();
    t.set_requires_grad(true);
    tape.leaf(&t).unwrap()
}

/// Central finite differences against tape gradients; returns the worst
/// relative error across coordinates.
fn fd_max_rel(x0: &[f64], eval: &mut dyn FnMut(&[f64]) -> f64, grad: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let h = 1e-5 * x0[i].abs().max(1.0);
        let mut xp = x0.to_vec();
        xp[i] += h;
        let mut xm = x0.to_vec();
        xm[i] -= h;
        let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max((fd - grad[i]).abs() / denom);
    }
    worst
}

/// Elementwise chain: mul, add, scale, clamp_min, sub, abs, sigmoid, tanh,
/// relu, div_by_scalar, mean. Inputs in [0.2, 1.2] keep every op away from
/// its kink.
fn chain_elementwise(x: &[f64]) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let v = grad_leaf(&tape, vec![x.len()], x.to_vec());
    let a = tape.mul(v, v).unwrap();
    let b = tape.add(a, tape.scale(v, 0.5).unwrap()).unwrap();
    let c = tape.sub(b, tape.clamp_min(v, 0.1).unwrap()).unwrap();
    let ones = tape.constant_from(vec![x.len()], vec![1.0; x.len()]).unwrap();
    let d = tape.abs(tape.add(c, ones).unwrap()).unwrap();
    let e = tape.sigmoid(d).unwrap();
    let f = tape.tanh(e).unwrap();
    let g = tape.relu(f).unwrap();
    let dv = tape.mean(v).unwrap();
    let q = tape.div_by_scalar(g, dv).unwrap();
    let loss = tape.mean(q).unwrap();
    tape.backward(loss).unwrap();
    (tape.value_scalar(loss).unwrap(), tape.grad(v).unwrap())
}

/// Shape-routing chain: reshape, slice_cols, slice_flat, select, time_step,
/// concat_scalars.
fn chain_shapes(x: &[f64]) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let v = grad_leaf(&tape, vec![12], x.to_vec());
    let r = tape.reshape(v, vec![3, 4]).unwrap();
    let m1 = tape.mean(tape.slice_cols(r, 1, 2).unwrap()).unwrap();
    let m2 = tape.mean(tape.slice_flat(v, 2, 6).unwrap()).unwrap();
    let sel = tape.select(v, 7).unwrap();
    let r3 = tape.reshape(v, vec![1, 3, 4]).unwrap();
    let m3 = tape.mean(tape.time_step(r3, 2).unwrap()).unwrap();
    let cat = tape.concat_scalars(&[m1, m2, sel, m3]).unwrap();
    let loss = tape.mean(cat).unwrap();
    tape.backward(loss).unwrap();
    (tape.value_scalar(loss).unwrap(), tape.grad(v).unwrap())
}

/// Network chain over a 48-coordinate leaf holding input + every parameter:
/// conv1d, scale_shift, tanh, global_avg_pool, linear, softmax_temperature,
/// kl_divergence, cross_entropy, smooth_l1.
fn chain_network(x: &[f64], sl_target: &[f64]) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let v = grad_leaf(&tape, vec![48], x.to_vec());
    let xin = tape.reshape(tape.slice_flat(v, 0, 16).unwrap(), vec![1, 2, 8]).unwrap();
    let wc = tape.reshape(tape.slice_flat(v, 16, 18).unwrap(), vec![3, 2, 3]).unwrap();
    let gam = tape.slice_flat(v, 34, 3).unwrap();
    let bet = tape.slice_flat(v, 37, 3).unwrap();
    let w2 = tape.reshape(tape.slice_flat(v, 40, 6).unwrap(), vec![2, 3]).unwrap();
    let b2 = tape.slice_flat(v, 46, 2).unwrap();
    let conv = tape.conv1d(xin, wc, 1, 1).unwrap();
    let ss = tape.scale_shift(conv, gam, bet).unwrap();
    let t = tape.tanh(ss).unwrap();
    let gap = tape.global_avg_pool(t).unwrap();
    let out = tape.linear(gap, w2, b2).unwrap();
    let sm = tape.softmax_temperature(out, 2.0).unwrap();
    let q = tape.constant_from(vec![1, 2], vec![0.3, 0.7]).unwrap();
    let kl = tape.kl_divergence(sm, q).unwrap();
    let ce = tape.cross_entropy(out, &[1]).unwrap();
    let target = tape.constant_from(vec![1, 3], sl_target.to_vec()).unwrap();
    let sl = tape.smooth_l1(gap, target).unwrap();
    let loss = tape
        .add(tape.add(tape.scale(kl, 0.5).unwrap(), ce).unwrap(), tape.scale(sl, 0.25).unwrap())
        .unwrap();
    tape.backward(loss).unwrap();
    (tape.value_scalar(loss).unwrap(), tape.grad(v).unwrap())
}

/// Evaluates the network chain's pooled activations so the smooth-l1 target
/// can be fixed off the unperturbed point.
fn network_gap(x: &[f64]) -> Vec<f64> {
    let tape = Tape::new();
    let v = tape.leaf(&Tensor::new(vec![48], x.to_vec()).unwrap()).unwrap();
    let xin = tape.reshape(tape.slice_flat(v, 0, 16).unwrap(), vec![1, 2, 8]).unwrap();
    let wc = tape.reshape(tape.slice_flat(v, 16, 18).unwrap(), vec![3, 2, 3]).unwrap();
    let gam = tape.slice_flat(v, 34, 3).unwrap();
    let bet = tape.slice_flat(v, 37, 3).unwrap();
    let conv = tape.conv1d(xin, wc, 1, 1).unwrap();
    let ss = tape.scale_shift(conv, gam, bet).unwrap();
    let t = tape.tanh(ss).unwrap();
    let gap = tape.global_avg_pool(t).unwrap();
    tape.value(gap).unwrap().values().to_vec()
}

/// Composed path: student saliency profile on the tape feeding the scale-free
/// profile loss, differentiated against every model parameter.
fn chain_tsd(
    spec: &ModelSpec,
    base: &ModelParams,
    coords: &[f64],
    x: &Instance,
    bg: &Instance,
    teacher: &SaliencyProfile,
) -> (f64, Vec<f64>) {
    let grid = make_grid(8, 4, 3).unwrap();
    let mut params = base.clone();
    let mut it = coords.iter();
    for tensor in params.tensors_mut().values_mut() {
        for v in tensor.values_mut() {
            *v = *it.next().unwrap();
        }
    }
    let tape = Tape::new();
    let vars = params.attach(&tape).unwrap();
    let profiles = batched_saliency_on_tape(
        &tape,
        spec,
        &vars,
        &[(x, bg)],
        &grid,
        8.0,
        SaliencyVariant::Whole,
    )
    .unwrap();
    let (scores, mu) = profiles[0];
    let loss = tsd_loss_on_tape(&tape, teacher, scores, mu).unwrap();
    tape.backward(loss).unwrap();
    let mut grad = Vec::with_capacity(coords.len());
    for (name, _) in params.tensors() {
        grad.extend(tape.grad(vars[name]).unwrap());
    }
    (tape.value_scalar(loss).unwrap(), grad)
}

#[test]
fn criterion_01_gradient_suite() {
    let started = Instant::now();
    let mut r = stream(2024, "acceptance/gradients");
    let mut instances = 0usize;
    let mut worst_prim = 0.0f64;
    let mut worst_tsd = 0.0f64;

    for _ in 0..16 {
        let x0: Vec<f64> = (0..6).map(|_| 0.2 + r.random::<f64>()).collect();
        let (_, grad) = chain_elementwise(&x0);
        worst_prim = worst_prim.max(fd_max_rel(&x0, &mut |x| chain_elementwise(x).0, &grad));
        instances += 1;
    }
    for _ in 0..12 {
        let x0: Vec<f64> = (0..12).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        let (_, grad) = chain_shapes(&x0);
        worst_prim = worst_prim.max(fd_max_rel(&x0, &mut |x| chain_shapes(x).0, &grad));
        instances += 1;
    }
    for _ in 0..12 {
        let mut x0: Vec<f64> = (0..48).map(|_| r.random::<f64>() * 1.6 - 0.8).collect();
        for g in &mut x0[34..37] {
            *g = 0.5 + r.random::<f64>();
        }
        let gap = network_gap(&x0);
        let target: Vec<f64> = gap.iter().map(|v| v + 0.3).collect();
        let (_, grad) = chain_network(&x0, &target);
        worst_prim = worst_prim.max(fd_max_rel(&x0, &mut |x| chain_network(x, &target).0, &grad));
        instances += 1;
    }

    let spec = ModelSpec::linear(3, 8, 1);
    for draw in 0..12 {
        let base = build_model(&spec, 100 + draw).unwrap();
        let x = random_instance(&mut r, 8, 3);
        let bg = random_instance(&mut r, 8, 3);
        let teacher_params = build_model(&spec, 900 + draw).unwrap();
        let grid = make_grid(8, 4, 3).unwrap();
        let teacher =
            temporal_saliency(&teacher_params, &x, &bg, &grid, 8.0, SaliencyVariant::Whole)
                .unwrap();
        let coords: Vec<f64> =
            base.tensors().values().flat_map(|t| t.values().iter().copied()).collect();
        let (_, grad) = chain_tsd(&spec, &base, &coords, &x, &bg, &teacher);
        worst_tsd = worst_tsd.max(fd_max_rel(
            &coords,
            &mut |c| chain_tsd(&spec, &base, c, &x, &bg, &teacher).0,
            &grad,
        ));
        instances += 1;
    }

    let secs = started.elapsed().as_secs_f64();
    let pass = instances >= 50 && worst_prim < 1e-4 && worst_tsd < 1e-3 && secs < 60.0;
    verdict(
        1,
        "gradient suite",
        pass,
        format!(
            "{instances} instances, primitive rel err {worst_prim:.2e} < 1e-4, \
             composed rel err {worst_tsd:.2e} < 1e-3, {secs:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: saliency invariants
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_saliency_invariants() {
    let started = Instant::now();
    let mut r = stream(2024, "acceptance/saliency");
    let variants =
        [SaliencyVariant::Whole, SaliencyVariant::Binary, SaliencyVariant::TargetScalar];
    let mut draws = 0usize;
    let mut worst_shift = 0.0f64;
    let mut worst_flat = 0.0f64;

    for draw in 0..200 {
        let t_len = r.random_range(8..=12);
        let classes = r.random_range(2..=4);
        let spec = match r.random_range(0..5) {
            0 => ModelSpec::linear(classes, t_len, 1),
            1 => ModelSpec::lstm(1, r.random_range(2..=4), classes, t_len, 1),
            _ => ModelSpec::fcn(r.random_range(1..=2), r.random_range(2..=4), classes, t_len, 1),
        };
        let params = build_model(&spec, r.random::<u64>()).unwrap();
        let x = random_instance(&mut r, t_len, classes);
        let bg = random_instance(&mut r, t_len, classes);
        let width = r.random_range(1..=t_len);
        let num = r.random_range(1..=(t_len - width + 1).min(5));
        let grid = make_grid(t_len, num, width).unwrap();

        for &variant in &variants {
            let p = temporal_saliency(&params, &x, &x, &grid, 8.0, variant).unwrap();
            assert!(
                p.scores.iter().all(|&s| s == 0.0) && p.mean == 0.0,
                "identical background must zero every score"
            );
        }
        for &variant in &variants[..2] {
            let p = temporal_saliency(&params, &x, &bg, &grid, 8.0, variant).unwrap();
            assert!(p.scores.iter().all(|&s| s >= 0.0), "negative divergence score");
            let flat = temporal_saliency(&params, &x, &bg, &grid, 1e6, variant).unwrap();
            for &s in &flat.scores {
                worst_flat = worst_flat.max(s);
            }
        }
        let variant = variants[draw % 3];
        let before = temporal_saliency(&params, &x, &bg, &grid, 8.0, variant).unwrap();
        let mut shifted = params.clone();
        for v in shifted.tensors_mut().get_mut("head.bias").unwrap().values_mut() {
            *v += 3.7;
        }
        let after = temporal_saliency(&shifted, &x, &bg, &grid, 8.0, variant).unwrap();
        for (a, b) in before.scores.iter().zip(&after.scores) {
            worst_shift = worst_shift.max((a - b).abs());
        }
        draws += 1;
    }

    let secs = started.elapsed().as_secs_f64();
    let pass = draws >= 200 && worst_shift <= 1e-9 && worst_flat < 1e-6 && secs < 60.0;
    verdict(
        2,
        "saliency invariants",
        pass,
        format!(
            "{draws} draws, zero-background exact, scores nonnegative, \
             logit-shift dev {worst_shift:.2e} <= 1e-9, tau=1e6 max {worst_flat:.2e} < 1e-6, \
             {secs:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 3: profile-loss scale invariance
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_scale_invariance() {
    let mut r = stream(2024, "acceptance/scale");
    let mut worst = 0.0f64;
    for _ in 0..60 {
        let n = r.random_range(3..=10);
        let scores: Vec<f64> = (0..n).map(|_| 0.1 + 1.9 * r.random::<f64>()).collect();
        for k in [0.01, 1.0, 37.0] {
            let scaled: Vec<f64> = scores.iter().map(|v| k * v).collect();
            let teacher = SaliencyProfile {
                mean: mean(&scores),
                scores: scores.clone(),
                variant: SaliencyVariant::Whole,
                tau: 8.0,
            };
            let student = SaliencyProfile {
                mean: mean(&scaled),
                scores: scaled,
                variant: SaliencyVariant::Whole,
                tau: 8.0,
            };
            worst = worst.max(tsd_loss(&teacher, &student).unwrap());
        }
    }
    let pass = worst < 1e-12;
    verdict(
        3,
        "profile loss scale invariance",
        pass,
        format!("60 profiles x k in {{0.01, 1, 37}}, max loss {worst:.2e} < 1e-12"),
    );
}

// ---------------------------------------------------------------------------
// criterion 4: ranking-metric oracles
// ---------------------------------------------------------------------------

/// Average precision by brute force: walk every distinct threshold in
/// descending order, recount tp/fp from scratch each time.
fn ap_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &th in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (s, &pos) in scores.iter().zip(positive) {
            if *s >= th {
                if pos {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// ROC AUC by brute force over every (positive, negative) pair, ties at 0.5.
fn roc_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0usize;
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs as f64
}

#[test]
fn criterion_04_metric_oracles() {
    let mut r = stream(2024, "acceptance/metrics");
    let mut cases = 0usize;
    while cases < 600 {
        let n = r.random_range(2..=20);
        let grid_scores = r.random::<f64>() < 0.5;
        let probs: Vec<f64> = (0..n)
            .flat_map(|_| {
                let p = if grid_scores {
                    r.random_range(0..=10) as f64 / 10.0
                } else {
                    r.random::<f64>()
                };
                [1.0 - p, p]
            })
            .collect();
        let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;

        let mut want_ap = 0.0;
        let mut want_roc = 0.0;
        for c in 0..2 {
            let scores: Vec<f64> = probs.chunks(2).map(|row| row[c]).collect();
            let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            want_ap += ap_oracle(&scores, &positive);
            want_roc += roc_oracle(&scores, &positive);
        }
        want_ap /= 2.0;
        want_roc /= 2.0;

        let got_ap = auc_prc(&probs, 2, &labels).unwrap();
        let got_roc = auc_roc(&probs, 2, &labels).unwrap();
        assert_eq!(got_ap.to_bits(), want_ap.to_bits(), "average precision diverged");
        assert_eq!(got_roc.to_bits(), want_roc.to_bits(), "roc auc diverged");
        cases += 1;
    }
    verdict(
        4,
        "metric oracles",
        cases >= 600,
        format!("{cases} binary cases <= 20 points, exact threshold and pair-count agreement"),
    );
}

// ---------------------------------------------------------------------------
// criterion 5: attribution exactness on linear models
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_attribution_exactness() {
    let mut r = stream(2024, "acceptance/attribution");
    let mut worst_lin = 0.0f64;
    for draw in 0..25 {
        let t_len = r.random_range(4..=12);
        let classes = r.random_range(2..=4);
        let spec = ModelSpec::linear(classes, t_len, 1);
        let params = build_model(&spec, 40 + draw).unwrap();
        let x = random_instance(&mut r, t_len, classes);
        let baseline = random_instance(&mut r, t_len, classes);
        let logits =
            forward(&params, &Tensor::new(vec![1, 1, t_len], x.values.clone()).unwrap()).unwrap();
        let pred = argmax(logits.values());
        let w = &params.tensors()["head.weight"].values()[pred * t_len..(pred + 1) * t_len];

        let gs = gradient_saliency(&params, &x).unwrap();
        for (g, wi) in gs.iter().zip(w) {
            worst_lin = worst_lin.max((g - wi.abs()).abs());
        }
        let ig = integrated_gradients(&params, &x, &baseline, 16).unwrap();
        for ((a, xv), (bv, wi)) in
            ig.iter().zip(&x.values).zip(baseline.values.iter().zip(w))
        {
            worst_lin = worst_lin.max((a - (xv - bv) * wi).abs());
        }
    }

    let mut worst_gap = 0.0f64;
    let spec = ModelSpec::fcn(1, 4, 3, 16, 1);
    for draw in 0..10 {
        let params = build_model(&spec, 70 + draw).unwrap();
        let x = random_instance(&mut r, 16, 3);
        let baseline =
            Instance { values: vec![0.0; 16], label: 0, prepared: true };
        let pred = {
            let logits =
                forward(&params, &Tensor::new(vec![1, 1, 16], x.values.clone()).unwrap()).unwrap();
            argmax(logits.values())
        };
        let at = |vals: &[f64]| {
            forward(&params, &Tensor::new(vec![1, 1, 16], vals.to_vec()).unwrap()).unwrap()
                .values()[pred]
        };
        let ig = integrated_gradients(&params, &x, &baseline, 64).unwrap();
        let gap = (ig.iter().sum::<f64>() - (at(&x.values) - at(&baseline.values))).abs();
        worst_gap = worst_gap.max(gap);
    }

    let pass = worst_lin < 1e-10 && worst_gap < 1e-3;
    verdict(
        5,
        "attribution exactness",
        pass,
        format!(
            "linear |w| and (x-baseline).w dev {worst_lin:.2e} < 1e-10, \
             completeness gap {worst_gap:.2e} < 1e-3 at 64 steps"
        ),
    );
}

// ---------------------------------------------------------------------------
// shared desk-scale study for criteria 6 through 10
// ---------------------------------------------------------------------------

struct MethodEval {
    auc: Vec<f64>,
    agreement: Vec<f64>,
    kl: Vec<f64>,
    occlusion: Vec<f64>,
}

struct DeskScale {
    train: TimeSeriesDataset,
    val: TimeSeriesDataset,
    test: TimeSeriesDataset,
    teacher: TrainedArtifact,
    teacher_vals: Vec<f64>,
    teacher_sel: usize,
    runs: BTreeMap<&'static str, Vec<TrainedArtifact>>,
    eval: BTreeMap<&'static str, MethodEval>,
    core_secs: f64,
}

fn test_probs(params: &ModelParams, test: &TimeSeriesDataset, tau: f64) -> Vec<f64> {
    let batch =
        Tensor::new(vec![test.len(), 1, test.series_length], test.flat_values()).unwrap();
    let logits = forward(params, &batch).unwrap();
    let mut probs = Vec::with_capacity(logits.values().len());
    for row in logits.values().chunks(test.num_classes) {
        probs.extend(softmax_temperature(row, tau).unwrap());
    }
    probs
}

fn preds_of(probs: &[f64], classes: usize) -> Vec<usize> {
    probs.chunks(classes).map(argmax).collect()
}

fn occlusion_maps(params: &ModelParams, test: &TimeSeriesDataset) -> Vec<Vec<f64>> {
    test.instances.iter().map(|x| occlusion_map(params, x, 1, 0.0).unwrap()).collect()
}

fn desk() -> &'static DeskScale {
    static CELL: OnceLock<DeskScale> = OnceLock::new();
    CELL.get_or_init(build_desk)
}

fn build_desk() -> DeskScale {
    let g = DESK_SEED;
    let pool = prepare(&generate_cbf(10, 100, g).unwrap(), 100).unwrap();
    let test = prepare(&generate_cbf(300, 100, g ^ TEST_POOL_SEED_FLIP).unwrap(), 100).unwrap();
    let split = split_train_val(&pool, DESK_VAL_FRACTION, g).unwrap();
    let (train, val) = (split.train, split.val);

    let teacher_spec = ModelSpec::fcn(3, 32, 3, 100, 1);
    let student_spec = ModelSpec::fcn(2, 4, 3, 100, 1);
    let mut config = DistillConfig::default();
    config.seed = g;
    config.beta = DESK_BETA;

    let core_start = Instant::now();
    let teacher_runs = train_teacher_runs(&teacher_spec, &train, &val, &config, 5).unwrap();
    let teacher_vals: Vec<f64> =
        teacher_runs.iter().map(TrainedArtifact::best_val_auc).collect();
    let teacher_sel = select_teacher(&teacher_runs);
    let teacher = teacher_runs[teacher_sel].clone();

    let methods: [(&'static str, Objective, SaliencyVariant, f64); 4] = [
        ("base", Objective::Base, SaliencyVariant::Whole, 0.0),
        ("base_kd", Objective::BaseKd, SaliencyVariant::Whole, 1.0),
        ("tsd", Objective::Tsd, SaliencyVariant::Whole, DESK_BETA),
        ("tsd_scalar", Objective::Tsd, SaliencyVariant::TargetScalar, DESK_BETA),
    ];
    let mut runs = BTreeMap::new();
    let mut core_secs = 0.0;
    for (name, objective, variant, beta) in methods {
        let mut per_seed = Vec::with_capacity(5);
        for s in 0..5u64 {
            let mut c = config.clone();
            c.seed = g + s;
            c.objective = objective;
            c.variant = variant;
            c.beta = beta;
            let run = if objective == Objective::Base {
                train_base(&student_spec, &train, &val, &c).unwrap()
            } else {
                distill(&teacher, &student_spec, &train, &val, &c).unwrap()
            };
            per_seed.push(run);
        }
        runs.insert(name, per_seed);
        if name != "tsd_scalar" {
            core_secs = core_start.elapsed().as_secs_f64();
        }
    }

    let labels = test.labels();
    let classes = test.num_classes;
    let teacher_probs1 = test_probs(&teacher.params, &test, 1.0);
    let teacher_probs_kd = test_probs(&teacher.params, &test, config.tau_kd);
    let teacher_preds = preds_of(&teacher_probs1, classes);
    let teacher_occ = occlusion_maps(&teacher.params, &test);

    let mut eval = BTreeMap::new();
    for (name, per_seed) in &runs {
        let mut m = MethodEval {
            auc: Vec::new(),
            agreement: Vec::new(),
            kl: Vec::new(),
            occlusion: Vec::new(),
        };
        for run in per_seed {
            let probs1 = test_probs(&run.params, &test, 1.0);
            let probs_kd = test_probs(&run.params, &test, config.tau_kd);
            let preds = preds_of(&probs1, classes);
            m.auc.push(auc_prc(&probs1, classes, &labels).unwrap());
            m.agreement.push(top1_agreement(&teacher_preds, &preds).unwrap());
            m.kl.push(predictive_kl(&teacher_probs_kd, &probs_kd, classes).unwrap());
            if matches!(*name, "base_kd" | "tsd") {
                let maps = occlusion_maps(&run.params, &test);
                let per_instance: Vec<f64> = teacher_occ
                    .iter()
                    .zip(&maps)
                    .map(|(t, s)| saliency_mse(t, s).unwrap())
                    .collect();
                m.occlusion.push(mean(&per_instance));
            }
        }
        eval.insert(*name, m);
    }

    DeskScale {
        train,
        val,
        test,
        teacher,
        teacher_vals,
        teacher_sel,
        runs,
        eval,
        core_secs,
    }
}

// ---------------------------------------------------------------------------
// criteria 6 through 9: desk-scale directional reproductions
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_generalization() {
    let d = desk();
    let base = mean(&d.eval["base"].auc);
    let kd = mean(&d.eval["base_kd"].auc);
    let tsd = mean(&d.eval["tsd"].auc);
    let pass = tsd >= base + 0.02 && tsd >= kd - 0.01 && d.core_secs < 900.0;
    verdict(
        6,
        "desk-scale generalization",
        pass,
        format!(
            "mean test AUC-PRC tsd {tsd:.4} vs base {base:.4} + 0.02 and \
             base_kd {kd:.4} - 0.01, core {:.0}s < 900s",
            d.core_secs
        ),
    );
}

#[test]
fn criterion_07_fidelity() {
    let d = desk();
    let agree_tsd = mean(&d.eval["tsd"].agreement);
    let agree_base = mean(&d.eval["base"].agreement);
    let kl_tsd = mean(&d.eval["tsd"].kl);
    let kl_kd = mean(&d.eval["base_kd"].kl);
    let pass = agree_tsd >= agree_base && kl_tsd <= kl_kd + 0.05;
    verdict(
        7,
        "fidelity",
        pass,
        format!(
            "top-1 agreement tsd {agree_tsd:.4} >= base {agree_base:.4}, \
             predictive KL tsd {kl_tsd:.4} <= base_kd {kl_kd:.4} + 0.05"
        ),
    );
}

#[test]
fn criterion_08_interpretability_transfer() {
    let d = desk();
    let mse_tsd = mean(&d.eval["tsd"].occlusion);
    let mse_kd = mean(&d.eval["base_kd"].occlusion);
    let pass = mse_tsd <= mse_kd;
    verdict(
        8,
        "interpretability transfer",
        pass,
        format!("occlusion-map MSE to teacher: tsd {mse_tsd:.6} <= base_kd {mse_kd:.6}"),
    );
}

#[test]
fn criterion_09_variant_ablation() {
    let d = desk();
    let whole = mean(&d.eval["tsd"].auc);
    let scalar = mean(&d.eval["tsd_scalar"].auc);
    let pass = whole >= scalar;
    verdict(
        9,
        "variant ablation",
        pass,
        format!("mean test AUC-PRC whole {whole:.4} >= target-scalar {scalar:.4}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 10: determinism
// ---------------------------------------------------------------------------

fn param_bits(params: &ModelParams) -> Vec<u64> {
    params.tensors().values().flat_map(|t| t.values().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn criterion_10_determinism() {
    let d = desk();
    let first = &d.runs["tsd"][0];
    let again =
        distill(&d.teacher, first.params.spec(), &d.train, &d.val, &first.config).unwrap();

    let params_equal = param_bits(&first.params) == param_bits(&again.params);
    let history_equal = first.history == again.history;
    let auc_first = mean(&d.eval["tsd"].auc[..1]);
    let probs = test_probs(&again.params, &d.test, 1.0);
    let auc_again = auc_prc(&probs, d.test.num_classes, &d.test.labels()).unwrap();
    let metric_dev = (auc_first - auc_again).abs();

    let dir = tempfile::tempdir().unwrap();
    let path_a = dir.path().join("a.json");
    let path_b = dir.path().join("b.json");
    first.save(&path_a).unwrap();
    again.save(&path_b).unwrap();
    let bytes_equal = std::fs::read(&path_a).unwrap() == std::fs::read(&path_b).unwrap();

    let pass = params_equal && history_equal && metric_dev <= 1e-12 && bytes_equal;
    verdict(
        10,
        "determinism",
        pass,
        format!(
            "repeated distillation: params bitwise equal {params_equal}, \
             history equal {history_equal}, AUC dev {metric_dev:.1e} <= 1e-12, \
             checkpoint bytes equal {bytes_equal}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 11: protocol conformance
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_protocol_conformance() {
    let d = desk();

    let history = &d.runs["base"][0].history;
    let lr0 = d.runs["base"][0].config.optimizer.initial_lr;
    let schedule_len = history.len() >= 36;
    let mut schedule_ok = schedule_len;
    if schedule_len {
        for (idx, want) in [
            (0, lr0),
            (23, lr0),
            (24, lr0 * 0.5),
            (28, lr0 * 0.5),
            (29, lr0 * 0.25),
            (33, lr0 * 0.25),
            (34, lr0 * 0.125),
            (35, lr0 * 0.125),
        ] {
            schedule_ok &= history[idx].lr == want;
        }
    }

    let mut stop_ok = true;
    let mut checked = 0usize;
    for runs in d.runs.values() {
        for run in runs {
            let last = run.history.last().unwrap().epoch;
            let patience = run.config.optimizer.patience;
            let max_epochs = run.config.optimizer.max_epochs;
            stop_ok &= last == (run.best_epoch + patience).min(max_epochs);
            checked += 1;
        }
    }

    let max_val = d.teacher_vals.iter().cloned().fold(f64::MIN, f64::max);
    let teacher_ok = d.teacher_vals.len() == 5
        && d.teacher.best_val_auc() == max_val
        && d.teacher_sel == d.teacher_vals.iter().position(|&v| v == max_val).unwrap();

    let pool = prepare(&generate_cbf(4, 16, 11).unwrap(), 16).unwrap();
    let split = split_train_val(&pool, 0.25, 11).unwrap();
    let lin = ModelSpec::linear(3, 16, 1);
    let mut tiny = DistillConfig::default();
    tiny.seed = 11;
    tiny.optimizer.max_epochs = 3;
    tiny.optimizer.patience = 3;
    tiny.grid.num_subsequences = 6;
    tiny.grid.width = 3;
    let tiny_teacher = train_base(&lin, &split.train, &split.val, &tiny).unwrap();
    let grid_runs =
        grid_search_runs(&tiny_teacher, &lin, &split.train, &split.val, &tiny).unwrap();
    let betas: Vec<f64> = grid_runs.iter().map(|(b, _)| *b).collect();
    let grid_ok = betas == vec![0.1, 0.5, 1.0, 10.0, 100.0, 200.0]
        && grid_runs.iter().all(|(b, a)| a.config.beta == *b && a.config.seed == tiny.seed);

    let pass = schedule_ok && stop_ok && teacher_ok && grid_ok;
    verdict(
        11,
        "protocol conformance",
        pass,
        format!(
            "lr halves exactly at epochs 25/30/35 ({schedule_ok}), \
             {checked} runs stop at min(best+patience, max) ({stop_ok}), \
             teacher picked by max val AUC-PRC over 5 seeds ({teacher_ok}), \
             6-value beta grid executed ({grid_ok})"
        ),
    );
}
