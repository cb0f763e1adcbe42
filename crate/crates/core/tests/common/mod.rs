//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use derl::config::{CosineMode, ModelConfig, TrainConfig};
use derl::data::{generate_synthetic, Dataset, Modality, SyntheticSpec};
use derl::model::{Batch, Derl, LossTerms};
use derl::tensor::{Graph, Var};
use derl::train_eval::{compute_metrics, Metrics, StepView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_data(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        seed,
        ..Default::default()
    })
    .unwrap()
    .0
}

pub fn toy_configs(data: &Dataset, seed: u64) -> (ModelConfig, TrainConfig) {
    let mc = ModelConfig::toy(data.dims, data.lens);
    let tc = TrainConfig {
        seed,
        ..TrainConfig::toy()
    };
    (mc, tc)
}

/// Metrics recomputed from their definitions with no shared code.
pub struct OracleMetrics {
    pub mae: f64,
    pub corr: f64,
    pub acc2_nonneg: f64,
    pub acc2_pos: f64,
    pub f1_nonneg: f64,
    pub f1_pos: f64,
    pub acc5: f64,
    pub acc7: f64,
    pub confusion: Vec<Vec<usize>>,
    pub nonzero: usize,
}

fn half_away(x: f64) -> i64 {
    let mag = (x.abs() + 0.5).floor();
    if x < 0.0 {
        -(mag as i64)
    } else {
        mag as i64
    }
}

fn f1(pairs: &[(bool, bool)]) -> f64 {
    let tp = pairs.iter().filter(|&&(p, t)| p && t).count() as f64;
    let pred_pos = pairs.iter().filter(|&&(p, _)| p).count() as f64;
    let true_pos = pairs.iter().filter(|&&(_, t)| t).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / pred_pos;
    let recall = tp / true_pos;
    2.0 * precision * recall / (precision + recall)
}

fn accuracy(pairs: &[(bool, bool)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|&&(p, t)| p == t).count() as f64 / pairs.len() as f64
}

pub fn oracle_metrics(p: &[f64], y: &[f64]) -> OracleMetrics {
    let n = p.len() as f64;
    let mut mae = 0.0;
    for i in 0..p.len() {
        mae += (p[i] - y[i]).abs();
    }
    mae /= n;
    // single-pass moment formula, unlike the two-pass implementation
    let (sx, sy) = (p.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = p.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|a| a * a).sum();
    let sxy: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let cov = n * sxy - sx * sy;
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    let corr = cov / (vx * vy).sqrt();

    let nonneg: Vec<(bool, bool)> = p.iter().zip(y).map(|(a, b)| (*a >= 0.0, *b >= 0.0)).collect();
    let pos: Vec<(bool, bool)> = p
        .iter()
        .zip(y)
        .filter(|(_, b)| **b != 0.0)
        .map(|(a, b)| (*a > 0.0, *b > 0.0))
        .collect();
    let cls = |x: f64, k: i64| half_away(x).max(-k).min(k);
    let acc = |k: i64| p.iter().zip(y).filter(|(a, b)| cls(**a, k) == cls(**b, k)).count() as f64 / n;
    let mut confusion = vec![vec![0usize; 7]; 7];
    for (a, b) in p.iter().zip(y) {
        confusion[(cls(*b, 3) + 3) as usize][(cls(*a, 3) + 3) as usize] += 1;
    }
    OracleMetrics {
        mae,
        corr,
        acc2_nonneg: accuracy(&nonneg),
        acc2_pos: accuracy(&pos),
        f1_nonneg: f1(&nonneg),
        f1_pos: f1(&pos),
        acc5: acc(2),
        acc7: acc(3),
        confusion,
        nonzero: pos.len(),
    }
}

/// Random prediction/label vectors that exercise exact zeros and ties.
pub fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for _ in 0..n {
        let label = match rng.random_range(0..6) {
            0 => 0.0,
            1 => rng.random_range(-3..=3) as f64 + 0.5 * (rng.random_range(0..2) as f64 * 2.0 - 1.0),
            _ => (rng.random_range(-3.0..3.0f64) * 10.0).round() / 10.0,
        };
        let pred = match rng.random_range(0..8) {
            0 => 0.0,
            1 => rng.random_range(-4..=4) as f64 * 0.5,
            _ => label + rng.random_range(-2.0..2.0),
        };
        y.push(label.clamp(-3.0, 3.0));
        p.push(pred);
    }
    (p, y)
}

/// Largest deviation between the library metrics and the oracle.
pub fn metric_deviation(m: &Metrics, o: &OracleMetrics) -> f64 {
    let r = &m.row;
    let pairs = [
        (r.mae, o.mae),
        (r.corr, o.corr),
        (r.acc2_nonneg, o.acc2_nonneg),
        (r.acc2_pos, o.acc2_pos),
        (r.f1_nonneg, o.f1_nonneg),
        (r.f1_pos, o.f1_pos),
        (r.acc5, o.acc5),
        (r.acc7, o.acc7),
    ];
    let mut worst = pairs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    for i in 0..7 {
        for j in 0..7 {
            if m.confusion[i][j] != o.confusion[i][j] {
                worst = f64::INFINITY;
            }
        }
    }
    if m.nonzero_samples != o.nonzero {
        worst = f64::INFINITY;
    }
    worst
}

/// Largest metric deviation over `trials` random 200-sample pairs.
pub fn metric_oracle_sweep(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (p, y) = random_pair(&mut rng, 200);
        let m = compute_metrics(&p, &y).unwrap();
        worst = worst.max(metric_deviation(&m, &oracle_metrics(&p, &y)));
    }
    worst
}

fn values(g: &Graph<f64>, v: Var) -> Vec<f64> {
    g.value(v).to_f64_vec()
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn mean_abs_cos(a: &[f64], b: &[f64], d: usize) -> f64 {
    let rows = a.len() / d;
    let mut s = 0.0;
    for r in 0..rows {
        let (x, y) = (&a[r * d..(r + 1) * d], &b[r * d..(r + 1) * d]);
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt().max(1e-12);
        let ny = y.iter().map(|p| p * p).sum::<f64>().sqrt().max(1e-12);
        s += (dot / (nx * ny)).abs();
    }
    s / rows as f64
}

/// Objective terms recomputed in plain loops from a fresh forward pass.
pub struct Recomputed {
    pub task: f64,
    pub dec: f64,
    pub levels: [Option<f64>; 3],
    pub rec: f64,
    pub total: f64,
}

pub fn recompute_objective(model: &Derl<f64>, batch: &Batch<f64>, complete: &Batch<f64>) -> Recomputed {
    assert_eq!(model.config.cosine_mode, CosineMode::Abs);
    let mut g = Graph::inference_with_params(&model.store);
    let fwd = model.forward(&mut g, batch).unwrap();
    let tgt = model.encode(&mut g, complete).unwrap();
    let pred = values(&g, fwd.prediction);
    let y = batch.labels.to_f64_vec();
    let task = pred.iter().zip(&y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64;
    let d = model.config.dim;
    let mut dec = 0.0;
    let mut levels = [None::<f64>; 3];
    let mut add = |k: usize, x: f64| levels[k] = Some(levels[k].unwrap_or(0.0) + x);
    for m in Modality::ALL {
        let i = m.index();
        let pair = fwd.branch.pairs[i];
        dec += mean_abs_cos(&values(&g, pair.private), &values(&g, pair.shared), d);
        let u = values(&g, tgt.unified[i]);
        if let Some(r) = model.recon.recon_input(&mut g, fwd.branch.unified[i], m) {
            let r = r.unwrap();
            add(0, mean_abs_diff(&values(&g, r), &u));
        }
        if let Some(r) = model.recon.recon_disentangled(&mut g, &pair, m) {
            let (p, s) = r.unwrap();
            let lp = mean_abs_diff(&values(&g, p), &values(&g, tgt.pairs[i].private));
            let ls = mean_abs_diff(&values(&g, s), &values(&g, tgt.pairs[i].shared));
            add(1, lp + ls);
        }
        if let Some(r) = model.recon.recon_joint(&mut g, &pair, m) {
            let r = r.unwrap();
            add(2, mean_abs_diff(&values(&g, r), &u));
        }
    }
    let on: Vec<f64> = levels.iter().flatten().copied().collect();
    let rec = if on.is_empty() { 0.0 } else { on.iter().sum::<f64>() / on.len() as f64 };
    let w = model.config.loss_weights;
    Recomputed {
        task,
        dec,
        levels,
        rec,
        total: w[0] * task + w[1] * dec + w[2] * rec,
    }
}

/// Worst deviation of a step's logged terms from the recomputation and of
/// the logged total from the logged terms.
pub fn step_deviation(view: &StepView<'_>) -> f64 {
    let g = view.graph;
    let v = |x: Var| g.value(x).item().unwrap();
    let t: &LossTerms = view.terms;
    let r = recompute_objective(view.model, view.batch, view.complete);
    let mut dev: Vec<f64> = Vec::new();
    let mut check = |a: f64, b: f64| dev.push((a - b).abs());
    check(v(t.task), r.task);
    check(v(t.dec), r.dec);
    check(v(t.rec), r.rec);
    check(v(t.total), r.total);
    for k in 0..3 {
        match (t.rec_levels[k], r.levels[k]) {
            (Some(a), Some(b)) => check(v(a), b),
            (None, None) => {}
            _ => check(f64::INFINITY, 0.0),
        }
    }
    // logged mean of levels and weighted sum of logged terms
    let lv: Vec<f64> = t.rec_levels.iter().flatten().map(|&x| v(x)).collect();
    if !lv.is_empty() {
        check(v(t.rec), lv.iter().sum::<f64>() / lv.len() as f64);
    }
    let w = view.weights;
    check(v(t.total), w[0] * v(t.task) + w[1] * v(t.dec) + w[2] * v(t.rec));
    dev.into_iter().fold(0.0, f64::max)
}
