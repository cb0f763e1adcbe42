//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

use common::*;
use derl::config::{ModelConfig, Switches, TrainConfig};
use derl::data::{corrupt_split, generate_synthetic, MissingSpec, ModalityBundle, ModalityFeatures, SyntheticSpec};
use derl::hed::{DisentangledPair, Hed};
use derl::mlcr::Targets;
use derl::model::{count_params, write_model, Batch, Derl, ModelError};
use derl::nn::normal;
use derl::tensor::{grad_check, Graph, Temperature, Tensor, TensorError, Var};
use derl::train_eval::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;
const TREND_MASK_SEEDS: u64 = 32;

struct Outcome {
    pass: bool,
    detail: String,
    secs: f64,
}

fn timed(f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    Outcome {
        pass,
        detail,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::toy([5, 4, 3], [4, 4, 4]);
    c.dim = 8;
    c.bottleneck_tokens = 2;
    c.private_experts = 1;
    c.shared_experts = 2;
    c.expert_hidden = 8;
    c.router_hidden = 8;
    c.fusion_router_hidden = 8;
    c.recon_hidden = 8;
    c.head_hidden = 8;
    c.mlp_ratio = 2;
    c.fusion_depth = 1;
    c
}

fn randomize(model: &mut Derl<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.store.ids().collect::<Vec<_>>() {
        let scale = if model.store.name(id).ends_with("log_tau") { 0.2 } else { 0.3 };
        let cur = model.store.get(id).clone();
        let noise: Tensor<f64> = normal(&mut rng, cur.shape(), 0.3).unwrap();
        let mut v = cur;
        for (x, n) in v.data_mut().iter_mut().zip(noise.data()) {
            *x += scale * n;
        }
        model.store.set(id, v).unwrap();
    }
}

fn tiny_pair(seed: u64) -> (Batch<f64>, Batch<f64>) {
    let spec = SyntheticSpec {
        samples: 2,
        lens: [4, 4, 4],
        dims: [5, 4, 3],
        split: (1.0, 0.0),
        seed,
        ..Default::default()
    };
    let clean = generate_synthetic(&spec).unwrap().0.train;
    let corrupted = corrupt_split(&clean, &MissingSpec::intra(0.5, seed + 1)).unwrap();
    (Batch::from_slice(&corrupted).unwrap(), Batch::from_slice(&clean).unwrap())
}

fn lift(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

/// Full objective gradients against central differences, with targets both
/// differentiated through and detached (frozen in the finite differences).
fn criterion_1() -> (bool, String) {
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for detach in [false, true] {
        let mut cfg = tiny_config();
        cfg.detach_targets = detach;
        cfg.learned_text_unk = true;
        let (model, c, p) = (0..50)
            .map(|s| {
                let mut m = Derl::<f64>::new(cfg.clone(), 100 + s).unwrap();
                randomize(&mut m, 200 + s);
                let (c, p) = tiny_pair(300 + s);
                (m, c, p)
            })
            .find(|(m, c, p)| m.kink_margin(c, p).unwrap() > 1e-3)
            .unwrap();
        let frozen: Vec<Tensor<f64>> = {
            let mut h = Graph::inference_with_params(&model.store);
            let b = model.encode(&mut h, &p).unwrap();
            let mut out: Vec<Tensor<f64>> = b.unified.iter().map(|u| h.value(*u).clone()).collect();
            for q in b.pairs {
                out.push(h.value(q.private).clone());
                out.push(h.value(q.shared).clone());
            }
            out
        };
        let report = grad_check(
            &model.store,
            |g| {
                let l = if detach {
                    let fwd = model.forward(g, &c).map_err(lift)?;
                    let k: Vec<Var> = frozen.iter().map(|v| g.constant(v.clone())).collect();
                    let pair = |i: usize| DisentangledPair {
                        private: k[3 + 2 * i],
                        shared: k[4 + 2 * i],
                        routing: None,
                    };
                    let t = Targets {
                        unified: [k[0], k[1], k[2]],
                        pairs: [pair(0), pair(1), pair(2)],
                    };
                    model.objective(g, &fwd, &c.labels, Some(&t)).map_err(lift)?
                } else {
                    model.loss(g, &c, &p).map_err(lift)?.1
                };
                Ok(l.total)
            },
            1e-5,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
        entries += report.entries_checked;
    }
    (worst <= 1e-4, format!("max rel error {worst:.2e} over {entries} entries"))
}

fn random_bundle(rng: &mut ChaCha8Rng, cfg: &ModelConfig, scale: f64) -> ModalityBundle {
    let feats = |m: usize, rng: &mut ChaCha8Rng| {
        let (t, d) = (cfg.seq_lens[m], cfg.input_dims[m]);
        let data: Tensor<f64> = normal(rng, &[t * d], scale).unwrap();
        ModalityFeatures::new(t, d, data.into_data()).unwrap()
    };
    ModalityBundle {
        modalities: [feats(0, rng), feats(1, rng), feats(2, rng)],
        label: 0.0,
    }
}

fn row_error(values: &[f64], width: usize) -> f64 {
    values
        .chunks(width)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Routing rows of both routers sum to one; the tempered softmax is
/// invariant to scaling logits and temperature together.
fn criterion_2() -> (bool, String) {
    let cfg = ModelConfig::toy([16, 12, 8], [8, 8, 8]);
    let mut model = Derl::<f64>::new(cfg.clone(), 0).unwrap();
    randomize(&mut model, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut expert_err, mut fusion_err): (f64, f64) = (0.0, 0.0);
    let mut rows = 0;
    for chunk in 0..10 {
        let inputs: Vec<ModalityBundle> =
            (0..100).map(|i| random_bundle(&mut rng, &cfg, 0.5 + (chunk * 100 + i) as f64 % 7.0)).collect();
        let batch = Batch::from_slice(&inputs).unwrap();
        let mut g = Graph::inference_with_params(&model.store);
        let f = model.forward(&mut g, &batch).unwrap();
        for p in f.branch.pairs {
            let w = g.value(p.routing.unwrap()).data().to_vec();
            expert_err = expert_err.max(row_error(&w, cfg.experts()));
            rows += w.len() / cfg.experts();
        }
        let w = g.value(f.fusion_weights.unwrap()).data().to_vec();
        fusion_err = fusion_err.max(row_error(&w, 6));
        rows += w.len() / 6;
    }
    assert!(matches!(model.hed, Hed::Experts(_)));

    let mut homogeneity: f64 = 0.0;
    let mut g = Graph::<f64>::new();
    for _ in 0..1000 {
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-20.0..20.0)).collect();
        let tau = rng.random_range(0.05..5.0);
        let c = rng.random_range(0.1..10.0);
        let a = g.constant(Tensor::from_f64([6], &z).unwrap());
        let b = g.constant(Tensor::from_f64([6], &z.iter().map(|x| c * x).collect::<Vec<_>>()).unwrap());
        let sa = g.softmax(a, Temperature::Fixed(tau)).unwrap();
        let sb = g.softmax(b, Temperature::Fixed(c * tau)).unwrap();
        // direct oracle: exp((z - max) / tau) normalized
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| ((x - m) / tau).exp()).collect();
        let s: f64 = e.iter().sum();
        for k in 0..6 {
            let (x, y) = (g.value(sa).data()[k], g.value(sb).data()[k]);
            homogeneity = homogeneity.max((x - y).abs()).max((x - e[k] / s).abs());
        }
    }
    let pass = expert_err <= 1e-9 && fusion_err <= 1e-9 && homogeneity <= 1e-12;
    (
        pass,
        format!(
            "{rows} rows, expert row error {expert_err:.1e}, fusion row error {fusion_err:.1e}, temperature identity {homogeneity:.1e}"
        ),
    )
}

/// Logged loss terms against a plain-loop recomputation on every step.
fn criterion_3() -> (bool, String) {
    let data = toy_data(1);
    let (mc, mut tc) = toy_configs(&data, 1);
    tc.epochs = 5;
    let (mut steps, mut worst) = (0, 0.0f64);
    train_observed(&data, &mc, &tc, &mut |v| {
        steps += 1;
        worst = worst.max(step_deviation(v));
    })
    .unwrap();
    (steps >= 50 && worst <= 1e-12, format!("{steps} steps, max deviation {worst:.1e}"))
}

struct SeedRun {
    seed: u64,
    cos_init: f64,
    cos_final: f64,
    augmented: TrainOutcome,
    aug_mae: f64,
    clean_mae: f64,
    train_secs: f64,
    clean_secs: f64,
}

fn mae_at(model: &Derl<f64>, test: &[ModalityBundle], rate: f64, seed: u64) -> f64 {
    eval_condition(model, test, Condition::Intra(rate), seed).unwrap().row.mae
}

fn seed_run(seed: u64) -> SeedRun {
    let data = toy_data(seed);
    let (mc, tc) = toy_configs(&data, seed);
    let t = Instant::now();
    let init = Derl::<f64>::new(mc.clone(), seed).unwrap();
    let cos_init = disentanglement_cosine(&init, &data.test).unwrap();
    let augmented = train(&data, &mc, &tc).unwrap();
    let cos_final = disentanglement_cosine(&augmented.model, &data.test).unwrap();
    let train_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let clean_cfg = TrainConfig {
        augment_fraction: 0.0,
        ..tc
    };
    let clean = train(&data, &mc, &clean_cfg).unwrap();
    let clean_secs = t.elapsed().as_secs_f64();
    SeedRun {
        seed,
        cos_init,
        cos_final,
        aug_mae: mae_at(&augmented.model, &data.test, 0.5, seed),
        clean_mae: mae_at(&clean.model, &data.test, 0.5, seed),
        augmented,
        train_secs,
        clean_secs,
    }
}

fn criterion_4(runs: &[SeedRun]) -> (bool, String) {
    let ok = runs.iter().filter(|r| r.cos_final <= 0.5 * r.cos_init).count();
    let slowest = runs.iter().map(|r| r.train_secs).fold(0.0, f64::max);
    let ratios: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.cos_final / r.cos_init)).collect();
    (
        ok >= 8 && slowest < 120.0,
        format!("{ok}/{} seeds halve |cos| (ratios {}), slowest seed {slowest:.1} s", runs.len(), ratios.join(" ")),
    )
}

/// Intra MAE per rate averaged over many mask draws, so the trend is not
/// dominated by which tokens a single mask happens to hit.
fn mean_intra_mae(model: &Derl<f64>, test: &[ModalityBundle]) -> Vec<f64> {
    let mut sums = vec![0.0; INTRA_RATES.len()];
    for k in 0..TREND_MASK_SEEDS {
        let rep = eval_intra(model, test, 1000 + k, 1).unwrap();
        for (s, r) in sums.iter_mut().zip(&rep.rows) {
            *s += r.metrics.row.mae;
        }
    }
    sums.iter().map(|s| s / TREND_MASK_SEEDS as f64).collect()
}

fn criterion_5(runs: &[SeedRun]) -> (bool, String, f64) {
    let t = Instant::now();
    let data = toy_data(runs[0].seed);
    let mae = mean_intra_mae(&runs[0].augmented.model, &data.test);
    // each rate from 0.1 on stays within 5% of the worst MAE seen before it
    let mut running = mae[1];
    let mut trend_ok = true;
    for &m in &mae[2..] {
        trend_ok &= m >= 0.95 * running;
        running = running.max(m);
    }
    let trend_secs = t.elapsed().as_secs_f64();
    let wins = runs.iter().filter(|r| r.aug_mae < r.clean_mae).count();
    let curve: Vec<String> = mae[1..].iter().map(|m| format!("{m:.3}")).collect();
    (
        trend_ok && wins >= 8,
        format!(
            "MAE r=0.1..0.9 [{}] trend {}, augmented beats clean at r=0.5 on {wins}/{} seeds",
            curve.join(" "),
            if trend_ok { "holds" } else { "broken" },
            runs.len()
        ),
        trend_secs,
    )
}

fn criterion_6() -> (bool, String) {
    let worst = metric_oracle_sweep(100, 42);
    // labels at exactly zero are dropped from the neg-vs-pos metrics only
    let y = [-1.0, 0.0, 0.0, 2.0];
    let p = [-0.5, 1.0, -1.0, 0.1];
    let m = compute_metrics(&p, &y).unwrap();
    let zero_ok = m.nonzero_samples == 2
        && m.row.acc2_pos == 1.0
        && (m.row.acc2_nonneg - 0.75).abs() < 1e-15
        && oracle_metrics(&p, &y).nonzero == 2;
    (worst <= 1e-10 && zero_ok, format!("max deviation {worst:.1e} over 100 pairs, zero-label exclusion {zero_ok}"))
}

fn criterion_7() -> (bool, String) {
    let mut data = toy_data(7);
    data.train.truncate(96);
    let (mc, mut tc) = toy_configs(&data, 0);
    tc.epochs = 2;
    let model = train(&data, &mc, &tc).unwrap().model;
    let intra = eval_intra(&model, &data.test, 0, 1).unwrap();
    let inter = eval_inter(&model, &data.test, 0, 1).unwrap();
    let intra_labels: Vec<String> = intra.rows.iter().map(|r| r.condition.label()).collect();
    let want: Vec<String> = (0..10).map(|k| format!("r=0.{k}")).collect();
    let mean_of = |rows: &[ConditionResult]| MetricRow::mean(rows.iter().map(|r| &r.metrics.row));
    let close = |a: &MetricRow, b: &MetricRow| a.values().iter().zip(b.values()).all(|(x, y)| (x - y).abs() < 1e-12);
    let intra_ok = intra_labels == want && close(&intra.average, &mean_of(&intra.rows));
    let inter_labels: Vec<String> = inter.rows.iter().map(|r| r.condition.label()).collect();
    let inter_ok = inter_labels == ["t", "v", "a", "t+v", "t+a", "v+a", "t+v+a"]
        && close(&inter.average, &mean_of(&inter.rows[..6]));
    let csv_ok = report_csv(&intra).lines().count() == 12 && report_csv(&inter).lines().count() == 9;

    let variants = ablation_variants();
    let names: Vec<&str> = variants.iter().map(|(n, _)| *n).collect();
    let on = Switches::default();
    let switches_ok = names == ["wo_hed", "wo_mlcr", "rec_l1", "rec_l2", "rec_l3", "wo_mrf", "full"]
        && variants[0].1 == Switches { hed: false, ..on }
        && variants[1].1.recon_levels == [false; 3]
        && (0..3).all(|k| variants[2 + k].1.recon_levels == std::array::from_fn(|i| i == k))
        && variants[5].1 == Switches { mrf: false, ..on };
    let mut small = data.clone();
    small.train.truncate(48);
    small.test.truncate(40);
    tc.epochs = 1;
    let results = run_ablation(&small, &mc, &tc, &variants, 0, 1).unwrap();
    let reports_ok = results.iter().zip(&names).all(|(r, n)| r.variant == *n && r.intra.rows.len() == 10 && r.inter.rows.len() == 7)
        && ablation_intra_csv(&results).lines().count() == 8
        && ablation_inter_csv(&results).lines().count() == 8;
    let pass = intra_ok && inter_ok && csv_ok && switches_ok && reports_ok;
    (
        pass,
        format!(
            "intra grid {intra_ok}, inter subsets {inter_ok}, csv rows {csv_ok}, ablation switches {switches_ok}, ablation reports {reports_ok}"
        ),
    )
}

fn criterion_8(first: &SeedRun) -> (bool, String) {
    let data = toy_data(first.seed);
    let (mc, tc) = toy_configs(&data, first.seed);
    let again = train(&data, &mc, &tc).unwrap();
    let files = |o: &TrainOutcome| {
        let intra = eval_intra(&o.model, &data.test, 0, 1).unwrap();
        let inter = eval_inter(&o.model, &data.test, 0, 1).unwrap();
        (write_model(&o.model, &[]), history_csv(&o.history), report_csv(&intra), report_csv(&inter), summary(&intra))
    };
    let (a, b) = (files(&first.augmented), files(&again));
    let model_same = a.0 == b.0;
    let csv_same = a.1 == b.1 && a.2 == b.2 && a.3 == b.3 && a.4 == b.4;
    (
        model_same && csv_same,
        format!("model file identical {model_same} ({} bytes), reports identical {csv_same}", a.0.len()),
    )
}

fn lin(i: usize, o: usize) -> usize {
    i * o + o
}

fn mlp(i: usize, h: usize, o: usize) -> usize {
    lin(i, h) + lin(h, o)
}

fn block(d: usize, ratio: usize) -> usize {
    // two layer norms, q/v/o with bias and k without, MLP
    4 * d + 4 * d * d + 3 * d + mlp(d, ratio * d, d)
}

fn toy_layer_sum() -> usize {
    let (d, n, h) = (16, 4, 16);
    let enc = n * d + [(16, 8), (12, 8), (8, 8)].iter().map(|&(i, t)| lin(i, d) + t * d + block(d, 4)).sum::<usize>();
    let hed = 3 * mlp(d, h, d) + 3 * mlp(d, h, d) + 3 * mlp(d, h, 4) + 1;
    let rec = 9 * mlp(d, h, d) + 3 * mlp(2 * d, h, d);
    let mrf = mlp(6 * d, h, 6) + 1 + 2 * block(d, 4) + mlp(d, h, 1);
    enc + hed + rec + mrf
}

fn main() {
    let start = Instant::now();
    let mut c1 = timed(criterion_1);
    c1.pass &= c1.secs < 30.0;
    let c2 = timed(criterion_2);
    let c3 = timed(criterion_3);
    let runs: Vec<SeedRun> = (0..SEEDS).map(seed_run).collect();
    let c4 = {
        let (pass, detail) = criterion_4(&runs);
        Outcome { pass, detail, secs: runs[0].train_secs }
    };
    let c5 = {
        let (pass, detail, trend_secs) = criterion_5(&runs);
        Outcome { pass, detail, secs: trend_secs + runs[0].clean_secs }
    };
    let c6 = timed(criterion_6);
    let c7 = timed(criterion_7);
    let c8 = timed(|| criterion_8(&runs[0]));

    let one_seed: f64 = [&c1, &c2, &c3, &c4, &c5, &c6, &c7, &c8].iter().map(|c| c.secs).sum();
    let model = Derl::<f64>::new(ModelConfig::toy([16, 12, 8], [8, 8, 8]), 0).unwrap();
    let counted = count_params(&model).total;
    let expected = toy_layer_sum();
    let c9 = Outcome {
        pass: one_seed < 600.0 && counted == expected,
        detail: format!(
            "suite at one seed {one_seed:.1} s on {} worker, toy params {counted} vs layer sum {expected}",
            worker_count()
        ),
        secs: 0.0,
    };

    let all = [c1, c2, c3, c4, c5, c6, c7, c8, c9];
    let names = [
        "gradient oracle",
        "routing stochasticity",
        "loss composition",
        "disentanglement effect",
        "robustness trend",
        "metric oracle",
        "protocol fidelity",
        "reproducibility",
        "efficiency envelope",
    ];
    for (k, (c, name)) in all.iter().zip(names).enumerate() {
        let verdict = if c.pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {} {name}: {} [{:.1} s]", k + 1, c.detail, c.secs);
    }
    println!("total {:.1} s", start.elapsed().as_secs_f64());
    if all.iter().any(|c| !c.pass) {
        std::process::exit(1);
    }
}
