use super::metrics::{compute_metrics, MetricRow, Metrics};
use super::pool::par_map;
use super::train::{train, TrainOutcome};
use super::Result;
use crate::config::{CosineMode, ModelConfig, Switches, TrainConfig};
use crate::data::{corrupt_split, Dataset, MissingSpec, ModalityBundle, ModalitySet};
use crate::hed::decoupling_loss;
use crate::model::{Batch, Derl};
use crate::tensor::Graph;
use crate::Scalar;

/// The intra-modal rate grid, 0.0 to 0.9 in steps of 0.1.
pub const INTRA_RATES: [f64; 10] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

const EVAL_CHUNK: usize = 128;

/// Predictions for `samples` in fixed-size chunks.
pub fn predict_samples<T: Scalar>(model: &Derl<T>, samples: &[ModalityBundle]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        out.extend(model.predict(&Batch::from_slice(chunk)?)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Condition {
    Intra(f64),
    Inter(ModalitySet),
}

impl Condition {
    /// Row key, e.g. `r=0.3` or `t+v`.
    pub fn label(&self) -> String {
        match self {
            Condition::Intra(r) => format!("r={r:.1}"),
            Condition::Inter(s) => s.label(),
        }
    }

    /// Corruption applied to a pristine split for this condition.
    pub fn spec(&self, seed: u64) -> MissingSpec {
        match *self {
            Condition::Intra(r) => {
                let k = (r * 10.0).round() as u64;
                MissingSpec::intra(r, seed.wrapping_add(k.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
            }
            Condition::Inter(s) => MissingSpec::inter(s, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionResult {
    pub condition: Condition,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `intra` or `inter`.
    pub protocol: &'static str,
    pub rows: Vec<ConditionResult>,
    /// Mean over every intra row, or over the six incomplete inter subsets.
    pub average: MetricRow,
}

impl EvalReport {
    pub fn row(&self, label: &str) -> Option<&ConditionResult> {
        self.rows.iter().find(|r| r.condition.label() == label)
    }
}

pub fn eval_condition<T: Scalar>(
    model: &Derl<T>,
    samples: &[ModalityBundle],
    condition: Condition,
    seed: u64,
) -> Result<Metrics> {
    let corrupted = corrupt_split(samples, &condition.spec(seed))?;
    let pred = predict_samples(model, &corrupted)?;
    let y: Vec<f64> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&pred, &y)
}

fn eval_all<T: Scalar>(
    model: &Derl<T>,
    samples: &[ModalityBundle],
    conditions: &[Condition],
    seed: u64,
    workers: usize,
) -> Result<Vec<ConditionResult>> {
    par_map(conditions, workers, |&c| {
        eval_condition(model, samples, c, seed).map(|metrics| ConditionResult { condition: c, metrics })
    })
    .into_iter()
    .collect()
}

/// Token masking at every rate of [`INTRA_RATES`], masks fixed per
/// `(seed, rate)`; the average includes the clean row.
pub fn eval_intra<T: Scalar>(model: &Derl<T>, test: &[ModalityBundle], seed: u64, workers: usize) -> Result<EvalReport> {
    let conditions: Vec<Condition> = INTRA_RATES.iter().map(|&r| Condition::Intra(r)).collect();
    let rows = eval_all(model, test, &conditions, seed, workers)?;
    let average = MetricRow::mean(rows.iter().map(|r| &r.metrics.row));
    Ok(EvalReport {
        protocol: "intra",
        rows,
        average,
    })
}

/// Whole-modality removal for all seven non-empty subsets; the average
/// skips the complete subset.
pub fn eval_inter<T: Scalar>(model: &Derl<T>, test: &[ModalityBundle], seed: u64, workers: usize) -> Result<EvalReport> {
    let conditions: Vec<Condition> = ModalitySet::all_nonempty().into_iter().map(Condition::Inter).collect();
    let rows = eval_all(model, test, &conditions, seed, workers)?;
    let average = MetricRow::mean(
        rows.iter()
            .filter(|r| !matches!(r.condition, Condition::Inter(s) if s.is_full()))
            .map(|r| &r.metrics.row),
    );
    Ok(EvalReport {
        protocol: "inter",
        rows,
        average,
    })
}

/// Mean over modalities and tokens of `|cos(H^p, H^s)|` on pristine samples.
pub fn disentanglement_cosine<T: Scalar>(model: &Derl<T>, samples: &[ModalityBundle]) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut g = Graph::inference_with_params(&model.store);
        let b = model.encode(&mut g, &Batch::from_slice(chunk)?)?;
        let l = decoupling_loss(&mut g, &b.pairs, CosineMode::Abs)?;
        sum += g.value(l).item().map(Scalar::to_f64_lossy).unwrap_or(f64::NAN) * chunk.len() as f64;
    }
    Ok(sum / (3.0 * samples.len() as f64))
}

/// Ablation rows: full model, HED replaced by a linear split, no
/// reconstruction, each reconstruction level alone, and uniform fusion.
pub fn ablation_variants() -> Vec<(&'static str, Switches)> {
    let on = Switches::default();
    vec![
        ("wo_hed", Switches { hed: false, ..on }),
        ("wo_mlcr", Switches { recon_levels: [false; 3], ..on }),
        ("rec_l1", Switches { recon_levels: [true, false, false], ..on }),
        ("rec_l2", Switches { recon_levels: [false, true, false], ..on }),
        ("rec_l3", Switches { recon_levels: [false, false, true], ..on }),
        ("wo_mrf", Switches { mrf: false, ..on }),
        ("full", on),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub variant: String,
    pub outcome: TrainOutcome,
    pub intra: EvalReport,
    pub inter: EvalReport,
}

/// Retrains and evaluates each named variant of [`ablation_variants`];
/// variants train in parallel on up to `workers` threads.
pub fn run_ablation(
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    variants: &[(&str, Switches)],
    eval_seed: u64,
    workers: usize,
) -> Result<Vec<AblationResult>> {
    par_map(variants, workers, |&(name, switches)| {
        let mut mc = model_cfg.clone();
        mc.switches = switches;
        let outcome = train(data, &mc, cfg)?;
        let intra = eval_intra(&outcome.model, &data.test, eval_seed, 1)?;
        let inter = eval_inter(&outcome.model, &data.test, eval_seed, 1)?;
        Ok(AblationResult {
            variant: name.to_string(),
            outcome,
            intra,
            inter,
        })
    })
    .into_iter()
    .collect()
}
