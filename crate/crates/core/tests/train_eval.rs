mod common;

use common::*;
use derl::config::TrainConfig;
use derl::data::{Dataset, ModalitySet};
use derl::model::write_model;
use derl::train_eval::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_match_bruteforce_oracle() {
    assert!(metric_oracle_sweep(100, 42) <= 1e-10);
}

#[test]
fn neg_vs_pos_uses_only_nonzero_labels() {
    let y = [-1.0, 0.0, 1.0];
    let m = compute_metrics(&y, &y).unwrap();
    assert_eq!(m.nonzero_samples, 2);
    assert_eq!(oracle_metrics(&y, &y).nonzero, 2);
}

#[test]
fn noise_never_raises_accuracy_of_perfect_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, y) = random_pair(&mut rng, 200);
    let perfect = compute_metrics(&y, &y).unwrap().row;
    for _ in 0..100 {
        let noisy: Vec<f64> = y.iter().map(|v| v + rng.random_range(-1.5..1.5)).collect();
        let m = compute_metrics(&noisy, &y).unwrap().row;
        for (a, b) in [
            (m.acc2_nonneg, perfect.acc2_nonneg),
            (m.acc2_pos, perfect.acc2_pos),
            (m.f1_nonneg, perfect.f1_nonneg),
            (m.f1_pos, perfect.f1_pos),
            (m.acc5, perfect.acc5),
            (m.acc7, perfect.acc7),
        ] {
            assert!(a <= b);
        }
    }
}

#[test]
fn toy_run_learns_and_reports_follow_protocol_layout() {
    let data = toy_data(0);
    let (mc, tc) = toy_configs(&data, 0);
    let out = train(&data, &mc, &tc).unwrap();
    assert_eq!(out.history.len(), tc.epochs);
    assert_eq!(select_epoch(&out.history), Some(out.best_epoch));

    let mean = data.train.iter().map(|s| s.label).sum::<f64>() / data.train.len() as f64;
    let baseline = data.test.iter().map(|s| (s.label - mean).abs()).sum::<f64>() / data.test.len() as f64;
    let intra = eval_intra(&out.model, &data.test, 11, 2).unwrap();
    assert!(intra.rows[0].metrics.row.mae < baseline);
    assert!(intra.rows[9].metrics.row.mae >= intra.rows[1].metrics.row.mae);

    let labels: Vec<String> = intra.rows.iter().map(|r| r.condition.label()).collect();
    let want: Vec<String> = (0..10).map(|k| format!("r=0.{k}")).collect();
    assert_eq!(labels, want);
    let pred = predict_samples(&out.model, &data.test).unwrap();
    let y: Vec<f64> = data.test.iter().map(|s| s.label).collect();
    let clean = compute_metrics(&pred, &y).unwrap();
    assert_eq!(intra.rows[0].metrics, clean);

    let inter = eval_inter(&out.model, &data.test, 11, 1).unwrap();
    assert_eq!(inter.rows.len(), 7);
    assert_eq!(inter.row("t+v+a").unwrap().metrics, clean);
    let six: Vec<f64> = inter.rows[..6].iter().map(|r| r.metrics.row.f1_pos).collect();
    assert!((inter.average.f1_pos - six.iter().sum::<f64>() / 6.0).abs() < 1e-15);

    let csv = report_csv(&intra);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], REPORT_HEADER);
    assert_eq!(lines.len(), 12);
    assert!(lines[11].starts_with("avg,"));
    assert_eq!(report_csv(&inter).lines().count(), 9);

    // selection replayed from the written history
    let hist = history_csv(&out.history);
    let parsed: Vec<EpochRecord> = hist
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            EpochRecord {
                epoch: f[0] as usize,
                task: f[1],
                dec: f[2],
                rec: f[3],
                total: f[4],
                valid_mae: f[5],
                lr: f[6],
            }
        })
        .collect();
    assert_eq!(select_epoch(&parsed), select_epoch(&out.history));
}

#[test]
fn logged_losses_match_recomputation_on_every_step() {
    let data = toy_data(1);
    let (mc, mut tc) = toy_configs(&data, 1);
    tc.epochs = 5;
    let mut steps = 0;
    let mut worst: f64 = 0.0;
    train_observed(&data, &mc, &tc, &mut |v| {
        steps += 1;
        worst = worst.max(step_deviation(v));
    })
    .unwrap();
    assert!(steps >= 50, "{steps}");
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn equal_seeds_give_identical_models() {
    let data = toy_data(2);
    let (mc, mut tc) = toy_configs(&data, 5);
    tc.epochs = 3;
    let a = train(&data, &mc, &tc).unwrap();
    let b = train(&data, &mc, &tc).unwrap();
    assert_eq!(write_model(&a.model, &[]), write_model(&b.model, &[]));
    assert_eq!(a.history, b.history);
    tc.seed = 6;
    let c = train(&data, &mc, &tc).unwrap();
    assert_ne!(write_model(&a.model, &[]), write_model(&c.model, &[]));
}

#[test]
fn non_finite_input_aborts_with_step_index() {
    let mut data: Dataset = toy_data(3);
    for s in data.train.iter_mut() {
        s.modalities[1].data[0] = f64::NAN;
    }
    let (mc, mut tc) = toy_configs(&data, 0);
    tc.epochs = 1;
    match train(&data, &mc, &tc) {
        Err(TrainError::Diverged { step, last_finite, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(last_finite, None);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn training_preconditions() {
    let mut data = toy_data(4);
    let (mc, tc) = toy_configs(&data, 0);
    let bad = TrainConfig { lr: 0.0, ..tc.clone() };
    assert!(train(&data, &mc, &bad).is_err());
    data.valid.clear();
    assert!(matches!(train(&data, &mc, &tc), Err(TrainError::Contract(_))));
}

#[test]
fn ablation_emits_one_report_pair_per_variant() {
    let mut data = toy_data(5);
    data.train.truncate(64);
    data.test.truncate(40);
    let (mc, mut tc) = toy_configs(&data, 0);
    tc.epochs = 1;
    let variants = ablation_variants();
    let results = run_ablation(&data, &mc, &tc, &variants, 0, 2).unwrap();
    let names: Vec<&str> = results.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["wo_hed", "wo_mlcr", "rec_l1", "rec_l2", "rec_l3", "wo_mrf", "full"]);
    for r in &results {
        assert_eq!(r.intra.rows.len(), 10);
        assert_eq!(r.inter.rows.len(), 7);
    }
    let intra = ablation_intra_csv(&results);
    assert_eq!(intra.lines().next(), Some(ABLATION_INTRA_HEADER));
    assert_eq!(intra.lines().count(), 8);
    let inter = ablation_inter_csv(&results);
    assert_eq!(inter.lines().next(), Some(ABLATION_INTER_HEADER));
    assert_eq!(inter.lines().nth(1).unwrap().split(',').count(), 9);
    let labels: Vec<String> = ModalitySet::all_nonempty().iter().map(|s| s.label()).collect();
    assert_eq!(ABLATION_INTER_HEADER, format!("variant,{},avg", labels.join(",")));
}

#[test]
fn summary_lists_every_condition() {
    let mut data = toy_data(6);
    data.test.truncate(30);
    let model = derl::Model::new(derl::config::ModelConfig::toy(data.dims, data.lens), 0).unwrap();
    let rep = eval_intra(&model, &data.test, 0, 1).unwrap();
    let s = summary(&rep);
    assert!(s.starts_with("protocol=intra\nconditions=10\n"));
    assert!(s.contains("r=0.9.confusion="));
    assert!(s.contains("avg.acc7="));
    let conf = confusion_csv(&rep.rows[5].metrics);
    assert_eq!(conf.lines().next(), Some("true\\pred,-3,-2,-1,0,1,2,3"));
    let total: usize = conf
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|x| x.parse::<usize>().unwrap()).collect::<Vec<_>>())
        .sum();
    assert_eq!(total, 30);
}
