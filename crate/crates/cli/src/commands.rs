use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use derl::config::TrainConfig;
use derl::data::{generate_synthetic, save_dataset, Dataset, MANIFEST_FILE};
use derl::model::{count_params, load_model, save_model};
use derl::train_eval::{
    ablation_inter_csv, ablation_intra_csv, ablation_variants, confusion_csv, eval_inter, eval_intra, history_csv,
    par_map, report_csv, run_ablation, summary, train, train_from, worker_count, EvalReport, MetricRow,
    TrainOutcome,
};
use derl::Model;

use crate::config::RunConfig;
use crate::svg;

pub const MODEL_FILE: &str = "model.bin";
pub const PLANTED_HEADER: &str = "vector,index,value";
/// Rates whose confusion matrices are written by intra evaluation.
pub const CONFUSION_RATES: [&str; 3] = ["r=0.1", "r=0.5", "r=0.9"];

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    if !cfg.data.path.is_empty() {
        bail!("gen-data writes synthetic data; unset data.path");
    }
    let out = cfg.out_dir();
    let (dataset, planted) = generate_synthetic(&cfg.data.synthetic())?;
    let dir = out.join("data");
    save_dataset(&dataset, &dir)?;
    let mut csv = format!("{PLANTED_HEADER}\n");
    let named = [("shared", &planted.shared)]
        .into_iter()
        .chain(["t", "v", "a"].into_iter().zip(planted.directions.iter()));
    for (name, v) in named {
        for (i, x) in v.iter().enumerate() {
            writeln!(csv, "{name},{i},{x:e}").unwrap();
        }
    }
    write(&out.join("planted.csv"), &csv)?;
    cfg.write_snapshot()?;
    print!("{}", read(&dir.join(MANIFEST_FILE))?);
    Ok(())
}

fn metadata(outcome: &TrainOutcome, cfg: &TrainConfig) -> Vec<(String, String)> {
    vec![
        ("best_epoch".into(), outcome.best_epoch.to_string()),
        ("best_valid_mae".into(), outcome.best_valid_mae.to_string()),
        ("train_seed".into(), cfg.seed.to_string()),
        ("selection_rate".into(), cfg.selection_rate.to_string()),
    ]
}

fn save_outcome(dir: &Path, outcome: &TrainOutcome, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    save_model(&outcome.model, &metadata(outcome, cfg), &dir.join(MODEL_FILE))?;
    write(&dir.join("history.csv"), &history_csv(&outcome.history))
}

pub fn train_cmd(cfg: &RunConfig, data: &Dataset, resume: Option<&Path>) -> Result<()> {
    let start = match resume {
        Some(path) => Some(load_model::<f64>(path, Some(&cfg.model)).with_context(|| {
            format!(
                "cannot resume from {}: it was saved with a different model configuration",
                path.display()
            )
        })?),
        None => None,
    };
    cfg.write_snapshot()?;
    let outcome = match start {
        Some((model, _)) => train_from(data, model, &cfg.train, &mut |_| {})?,
        None => train(data, &cfg.model, &cfg.train)?,
    };
    save_outcome(&cfg.out_dir(), &outcome, &cfg.train)?;
    let params = count_params(&outcome.model);
    println!(
        "epochs={} best_epoch={} best_valid_mae={:.6} params={} inference_params={}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_valid_mae,
        params.total,
        params.inference
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Protocol {
    Intra,
    Inter,
    Ablation,
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let p = report.protocol;
    write(&dir.join(format!("{p}.csv")), &report_csv(report))?;
    write(&dir.join(format!("{p}_summary.txt")), &summary(report))?;
    if p == "intra" {
        for label in CONFUSION_RATES {
            let row = report.row(label).ok_or_else(|| anyhow!("report lacks {label}"))?;
            write(&dir.join(confusion_name(label)), &confusion_csv(&row.metrics))?;
        }
    }
    Ok(())
}

fn confusion_name(label: &str) -> String {
    format!("confusion_{}.csv", label.replace('=', ""))
}

pub fn eval_cmd(cfg: &RunConfig, data: &Dataset, protocol: Protocol, model: Option<&Path>) -> Result<()> {
    let out = cfg.out_dir();
    let workers = worker_count();
    let seed = cfg.eval.seed;
    let load = || -> Result<Model> {
        let path = model.map(PathBuf::from).unwrap_or_else(|| out.join(MODEL_FILE));
        let model = load_model::<f64>(&path, Some(&cfg.model))?.0;
        cfg.write_snapshot()?;
        Ok(model)
    };
    match protocol {
        Protocol::Intra => {
            let report = eval_intra(&load()?, &data.test, seed, workers)?;
            write_report(&out, &report)?;
            print!("{}", report_csv(&report));
        }
        Protocol::Inter => {
            let report = eval_inter(&load()?, &data.test, seed, workers)?;
            write_report(&out, &report)?;
            print!("{}", report_csv(&report));
        }
        Protocol::Ablation => {
            let all = ablation_variants();
            let variants = if cfg.eval.variants.is_empty() {
                all
            } else {
                cfg.eval
                    .variants
                    .iter()
                    .map(|v| {
                        all.iter()
                            .find(|(n, _)| n == v)
                            .copied()
                            .ok_or_else(|| anyhow!("unknown ablation variant {v:?}"))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            cfg.write_snapshot()?;
            let results = run_ablation(data, &cfg.model, &cfg.train, &variants, seed, workers)?;
            for r in &results {
                let dir = out.join("ablation").join(&r.variant);
                save_outcome(&dir, &r.outcome, &cfg.train)?;
                write_report(&dir, &r.intra)?;
                write_report(&dir, &r.inter)?;
            }
            write(&out.join("ablation_intra.csv"), &ablation_intra_csv(&results))?;
            write(&out.join("ablation_inter.csv"), &ablation_inter_csv(&results))?;
            print!("{}", ablation_intra_csv(&results));
        }
    }
    plot(&out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Experts,
    Rate,
    Seeds,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Experts => "experts",
            Axis::Rate => "rate",
            Axis::Seeds => "seeds",
        }
    }
}

pub fn sweep_header() -> String {
    format!("axis,cell,status,{}", MetricRow::FIELDS.join(","))
}

#[derive(Clone, Debug)]
enum Cell {
    Experts { private: usize, shared: usize, label: String },
    Rate(f64),
    Seed(u64),
}

impl Cell {
    fn label(&self) -> String {
        match self {
            Cell::Experts { label, .. } => label.clone(),
            Cell::Rate(r) => format!("{r}"),
            Cell::Seed(s) => s.to_string(),
        }
    }
}

fn cells(cfg: &RunConfig, axis: Axis) -> Vec<Cell> {
    let s = &cfg.sweep;
    match axis {
        Axis::Experts => {
            let (kp, ks) = (cfg.model.private_experts, cfg.model.shared_experts);
            let vary_private = s.experts.iter().map(|&k| Cell::Experts {
                private: k,
                shared: ks,
                label: format!("kp={k}"),
            });
            let vary_shared = s.experts.iter().map(|&k| Cell::Experts {
                private: kp,
                shared: k,
                label: format!("ks={k}"),
            });
            vary_private.chain(vary_shared).collect()
        }
        Axis::Rate => s.rates.iter().map(|&r| Cell::Rate(r)).collect(),
        Axis::Seeds => s.seeds.iter().map(|&x| Cell::Seed(x)).collect(),
    }
}

fn run_cell(cfg: &RunConfig, data: &Dataset, cell: &Cell, dir: &Path) -> Result<MetricRow> {
    let (mut mc, mut tc) = (cfg.model.clone(), cfg.train.clone());
    match *cell {
        Cell::Experts { private, shared, .. } => {
            mc.private_experts = private;
            mc.shared_experts = shared;
        }
        Cell::Rate(r) => tc.selection_rate = r,
        Cell::Seed(s) => tc.seed = s,
    }
    mc.validate()?;
    tc.validate()?;
    let outcome = train(data, &mc, &tc)?;
    let report = eval_intra(&outcome.model, &data.test, cfg.eval.seed, 1)?;
    save_outcome(dir, &outcome, &tc)?;
    write_report(dir, &report)?;
    Ok(report.average)
}

fn clean_message(e: &anyhow::Error) -> String {
    format!("{e:#}").replace([',', '\n', '\r'], ";")
}

fn push_metrics(out: &mut String, axis: &str, cell: &str, status: &str, row: Option<&MetricRow>) {
    write!(out, "{axis},{cell},{status}").unwrap();
    for k in 0..MetricRow::FIELDS.len() {
        match row {
            Some(r) => write!(out, ",{:.6}", r.values()[k]).unwrap(),
            None => out.push(','),
        }
    }
    out.push('\n');
}

/// Sample standard deviation of each field; NaN with fewer than two rows.
fn sample_std(rows: &[MetricRow], mean: &MetricRow) -> MetricRow {
    let n = rows.len() as f64;
    let m = mean.values();
    let mut acc = [0.0; 8];
    for r in rows {
        for (a, (v, mu)) in acc.iter_mut().zip(r.values().iter().zip(&m)) {
            *a += (v - mu) * (v - mu);
        }
    }
    let s = acc.map(|a| if rows.len() < 2 { f64::NAN } else { (a / (n - 1.0)).sqrt() });
    MetricRow {
        mae: s[0],
        corr: s[1],
        acc2_nonneg: s[2],
        acc2_pos: s[3],
        f1_nonneg: s[4],
        f1_pos: s[5],
        acc5: s[6],
        acc7: s[7],
    }
}

/// Trains and evaluates one cell per axis value; failed cells are recorded
/// and the sweep continues.
pub fn sweep_cmd(cfg: &RunConfig, data: &Dataset, axis: Axis) -> Result<()> {
    cfg.write_snapshot()?;
    let out = cfg.out_dir();
    let list = cells(cfg, axis);
    if list.is_empty() {
        bail!("sweep axis {} has no values", axis.name());
    }
    let root = out.join(format!("sweep_{}", axis.name()));
    let results = par_map(&list, worker_count(), |c| run_cell(cfg, data, c, &root.join(c.label())));

    let mut csv = format!("{}\n", sweep_header());
    let mut ok = Vec::new();
    for (c, r) in list.iter().zip(&results) {
        match r {
            Ok(row) => {
                push_metrics(&mut csv, axis.name(), &c.label(), "ok", Some(row));
                ok.push(*row);
            }
            Err(e) => push_metrics(&mut csv, axis.name(), &c.label(), &format!("failed: {}", clean_message(e)), None),
        }
    }
    if axis == Axis::Seeds && !ok.is_empty() {
        let mean = MetricRow::mean(ok.iter());
        push_metrics(&mut csv, axis.name(), "mean", "agg", Some(&mean));
        push_metrics(&mut csv, axis.name(), "std", "agg", Some(&sample_std(&ok, &mean)));
    }
    write(&out.join(format!("sweep_{}.csv", axis.name())), &csv)?;
    print!("{csv}");
    plot(&out)
}

/// Parsed CSV: header fields and rows of (key, values).
struct Table {
    header: Vec<String>,
    rows: Vec<(String, Vec<f64>)>,
}

fn parse_csv(text: &str, skip: usize) -> Table {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().split(',').skip(skip).map(String::from).collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let key = f[..skip].join(" ");
            (key, f[skip..].iter().map(|x| x.parse().unwrap_or(f64::NAN)).collect())
        })
        .collect();
    Table { header, rows }
}

impl Table {
    fn column(&self, name: &str, rows: &[&(String, Vec<f64>)]) -> Vec<f64> {
        let k = self.header.iter().position(|h| h == name);
        rows.iter().map(|(_, v)| k.and_then(|k| v.get(k).copied()).unwrap_or(f64::NAN)).collect()
    }
}

/// Regenerates every chart from the CSVs present in `dir`.
pub fn plot(dir: &Path) -> Result<()> {
    let mut wrote = 0;
    let mut emit = |name: &str, svg: String| -> Result<()> {
        wrote += 1;
        write(&dir.join(name), &svg)
    };
    let intra = dir.join("intra.csv");
    if intra.exists() {
        let t = parse_csv(&read(&intra)?, 1);
        let rows: Vec<_> = t.rows.iter().filter(|(k, _)| k != "avg").collect();
        let x: Vec<String> = rows.iter().map(|(k, _)| k.trim_start_matches("r=").to_string()).collect();
        emit(
            "intra_mae.svg",
            svg::line_chart("MAE vs missing rate", &x, &[("mae".into(), t.column("mae", &rows))], "MAE"),
        )?;
        let series: Vec<(String, Vec<f64>)> = ["acc2_nonneg", "acc2_pos", "f1_pos", "acc7"]
            .iter()
            .map(|f| (f.to_string(), t.column(f, &rows)))
            .collect();
        emit("intra_acc.svg", svg::line_chart("Accuracy vs missing rate", &x, &series, "score"))?;
    }
    for label in CONFUSION_RATES {
        let path = dir.join(confusion_name(label));
        if path.exists() {
            let text = read(&path)?;
            let mut lines = text.lines();
            let labels: Vec<String> = lines.next().unwrap_or_default().split(',').skip(1).map(String::from).collect();
            let counts: Vec<Vec<usize>> = lines
                .map(|l| l.split(',').skip(1).map(|x| x.parse().unwrap_or(0)).collect())
                .collect();
            let name = confusion_name(label).replace(".csv", ".svg");
            emit(&name, svg::heatmap(&format!("Confusion at {label}"), &labels, &counts))?;
        }
    }
    let inter = dir.join("inter.csv");
    if inter.exists() {
        let t = parse_csv(&read(&inter)?, 1);
        let rows: Vec<_> = t.rows.iter().collect();
        let x: Vec<String> = rows.iter().map(|(k, _)| k.clone()).collect();
        emit(
            "inter_f1.svg",
            svg::bar_chart("F1 (neg vs pos) by available modalities", &x, &t.column("f1_pos", &rows), "F1"),
        )?;
    }
    let abl = dir.join("ablation_intra.csv");
    if abl.exists() {
        let t = parse_csv(&read(&abl)?, 1);
        let rows: Vec<_> = t.rows.iter().collect();
        let x: Vec<String> = rows.iter().map(|(k, _)| k.clone()).collect();
        emit("ablation_mae.svg", svg::bar_chart("Average intra MAE by variant", &x, &t.column("mae", &rows), "MAE"))?;
    }
    for axis in [Axis::Experts, Axis::Rate, Axis::Seeds] {
        let path = dir.join(format!("sweep_{}.csv", axis.name()));
        if path.exists() {
            let t = parse_csv(&read(&path)?, 3);
            let rows: Vec<_> = t.rows.iter().filter(|(k, _)| k.ends_with(" ok")).collect();
            let x: Vec<String> = rows.iter().map(|(k, _)| k.split(' ').nth(1).unwrap_or_default().to_string()).collect();
            let mae = t.column("mae", &rows);
            let svg = svg::line_chart(
                &format!("Average intra MAE over the {} sweep", axis.name()),
                &x,
                &[("mae".into(), mae)],
                "MAE",
            );
            emit(&format!("sweep_{}.svg", axis.name()), svg)?;
        }
    }
    if wrote == 0 {
        eprintln!("no reports found in {}", dir.display());
    }
    Ok(())
}
