use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::predict_samples;
use super::optim::{cosine_lr, AdamW};
use super::{Result, TrainError};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{corrupt_split, random_missing, Dataset, MissingSpec, ModalityBundle};
use crate::model::{Batch, Derl, Forward, LossTerms, ModelError};
use crate::tensor::{Graph, TensorError, Var};

/// Per-epoch training record; losses are means over the epoch's steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task: f64,
    pub dec: f64,
    pub rec: f64,
    pub total: f64,
    pub valid_mae: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

/// What an observer sees after each step's forward pass.
pub struct StepView<'a> {
    pub epoch: usize,
    pub step: usize,
    /// Parameters before this step's update.
    pub model: &'a Derl<f64>,
    pub batch: &'a Batch<f64>,
    pub complete: &'a Batch<f64>,
    pub graph: &'a Graph<f64>,
    pub forward: &'a Forward,
    pub terms: &'a LossTerms,
    pub weights: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub model: Derl<f64>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_mae: f64,
}

/// Epoch with the lowest validation MAE; the earliest one on ties.
pub fn select_epoch(history: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<&EpochRecord> = None;
    for r in history {
        if best.is_none_or(|b| r.valid_mae < b.valid_mae) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
}

/// The validation split under the fixed selection corruption.
pub fn selection_split(data: &Dataset, cfg: &TrainConfig) -> Result<Vec<ModalityBundle>> {
    Ok(corrupt_split(&data.valid, &MissingSpec::intra(cfg.selection_rate, cfg.seed ^ SELECTION_SALT))?)
}

/// Mean absolute error of `model` on `samples`.
pub fn split_mae(model: &Derl<f64>, samples: &[ModalityBundle]) -> Result<f64> {
    let pred = predict_samples(model, samples)?;
    Ok(pred.iter().zip(samples).map(|(p, s)| (p - s.label).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn train(data: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(data, model_cfg, cfg, &mut |_| {})
}

// stream ids keep shuffling, augmentation and selection masks independent
const SHUFFLE_STREAM: u64 = 1;
const SELECTION_SALT: u64 = 0x5e1e_c7ed;

/// Trains with missing-data augmentation and validation-based selection,
/// calling `observer` after every step's forward pass.
pub fn train_observed(
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<TrainOutcome> {
    let model = Derl::<f64>::new(model_cfg.clone(), cfg.seed)?;
    train_from(data, model, cfg, observer)
}

/// Like [`train_observed`], starting from the parameters of `model`.
pub fn train_from(
    data: &Dataset,
    mut model: Derl<f64>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(TrainError::Contract("training needs non-empty train and valid splits".into()));
    }
    let mut opt = AdamW::new(&model.store, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);

    let valid = selection_split(data, cfg)?;

    let n = data.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let augmented = ((cfg.augment_fraction * n as f64).round() as usize).min(n);
    let weights = model.config.loss_weights;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Derl<f64>)> = None;
    let mut step = 0usize;
    let mut last_finite: Option<[f64; 3]> = None;
    for epoch in 0..cfg.epochs {
        let mut pick: Vec<usize> = (0..n).collect();
        pick.shuffle(&mut rng);
        let mut corrupted: Vec<Option<ModalityBundle>> = vec![None; n];
        for &i in &pick[..augmented] {
            corrupted[i] = Some(random_missing(&data.train[i], &MissingSpec::intra_random(rng.random()))?);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0; 4];
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let clean: Vec<&ModalityBundle> = chunk.iter().map(|&i| &data.train[i]).collect();
            let noisy: Vec<&ModalityBundle> = chunk
                .iter()
                .map(|&i| corrupted[i].as_ref().unwrap_or(&data.train[i]))
                .collect();
            let complete = Batch::from_bundles(&clean)?;
            let batch = Batch::from_bundles(&noisy)?;

            let mut g = Graph::with_params(&model.store);
            let (fwd, terms) = match model.loss(&mut g, &batch, &complete) {
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(TrainError::Diverged { step, epoch, last_finite })
                }
                other => other?,
            };
            let v = |x: Var| g.value(x).item().unwrap_or(f64::NAN);
            let vals = [v(terms.task), v(terms.dec), v(terms.rec), v(terms.total)];
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::Diverged { step, epoch, last_finite });
            }
            observer(&StepView {
                epoch,
                step,
                model: &model,
                batch: &batch,
                complete: &complete,
                graph: &g,
                forward: &fwd,
                terms: &terms,
                weights,
            });
            match g.backward(terms.total) {
                Err(TensorError::NonFinite { .. }) => return Err(TrainError::Diverged { step, epoch, last_finite }),
                other => other?,
            }
            let grads = g.param_grads();
            drop(g);
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(TrainError::Diverged { step, epoch, last_finite });
            }
            lr = cosine_lr(cfg.lr, step, total_steps);
            opt.step(&mut model.store, &grads, lr);
            last_finite = Some([vals[0], vals[1], vals[2]]);
            for (s, x) in sums.iter_mut().zip(vals) {
                *s += x * chunk.len() as f64;
            }
            step += 1;
        }
        let valid_mae = split_mae(&model, &valid)?;
        if !valid_mae.is_finite() {
            return Err(TrainError::Diverged { step, epoch, last_finite });
        }
        let [task, dec, rec, total] = sums.map(|s| s / n as f64);
        history.push(EpochRecord {
            epoch,
            task,
            dec,
            rec,
            total,
            valid_mae,
            lr,
        });
        if best.as_ref().is_none_or(|(_, b, _)| valid_mae < *b) {
            best = Some((epoch, valid_mae, model.clone()));
        }
    }
    let (best_epoch, best_valid_mae, model) = best.ok_or_else(|| TrainError::Contract("zero epochs".into()))?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_valid_mae,
    })
}
