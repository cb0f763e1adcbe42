//! The composed model: shared-weight corrupted and complete branches,
//! disentanglement, reconstruction, fusion and the prediction head.

mod count;
mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use count::{count_params, ParamCount};
pub use io::{config_hash, load_model, read_model, save_model, write_model, ModelFile, MODEL_MAGIC, MODEL_VERSION};

use crate::config::{ConfigError, ModelConfig};
use crate::data::{DataError, Modality, ModalityBundle};
use crate::encoder::Encoder;
use crate::hed::{decoupling_loss, DisentangledPair, Hed};
use crate::mlcr::{total_recon, ReconNets, Targets};
use crate::mrf::{Mrf, FUSION_EXPERTS};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use crate::train_eval::{task_loss, total_loss};
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("batch contract violated: {0}")]
    Batch(String),
    #[error("model file {path}: {reason}")]
    File { path: String, reason: String },
    #[error("config hash mismatch: model file has {found}, current config hashes to {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// A mini-batch laid out for the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// `[B, T_m, D_m]` per modality.
    pub inputs: [Tensor<T>; 3],
    /// `[B, T_m, 1]`, one at masked positions.
    pub missing: [Tensor<T>; 3],
    /// `[B]`
    pub labels: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_bundles(bundles: &[&ModalityBundle]) -> Result<Self> {
        let first = bundles
            .first()
            .ok_or_else(|| ModelError::Batch("empty batch".into()))?;
        let b = bundles.len();
        let mut inputs = Vec::with_capacity(3);
        let mut missing = Vec::with_capacity(3);
        for m in Modality::ALL {
            let (len, dim) = (first.get(m).len, first.get(m).dim);
            let mut data = Vec::with_capacity(b * len * dim);
            let mut miss = Vec::with_capacity(b * len);
            for (i, s) in bundles.iter().enumerate() {
                let f = s.get(m);
                if (f.len, f.dim) != (len, dim) {
                    return Err(ModelError::Batch(format!(
                        "sample {i} modality {m} is {}x{}, expected {len}x{dim}",
                        f.len, f.dim
                    )));
                }
                data.extend(f.data.iter().map(|&x| T::lit(x)));
                miss.extend(f.present.iter().map(|&p| if p { T::zero() } else { T::one() }));
            }
            inputs.push(Tensor::new([b, len, dim], data)?);
            missing.push(Tensor::new([b, len, 1], miss)?);
        }
        let labels = Tensor::new([b], bundles.iter().map(|s| T::lit(s.label)).collect())?;
        Ok(Self {
            inputs: inputs.try_into().unwrap(),
            missing: missing.try_into().unwrap(),
            labels,
        })
    }

    pub fn from_slice(bundles: &[ModalityBundle]) -> Result<Self> {
        Self::from_bundles(&bundles.iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.labels.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unified and disentangled features of one branch.
#[derive(Clone, Copy, Debug)]
pub struct Branch {
    pub unified: [Var; 3],
    pub pairs: [DisentangledPair; 3],
}

impl Branch {
    /// `[p_t, p_v, p_a, s_t, s_v, s_a]`
    pub fn expert_sequence(&self) -> [Var; FUSION_EXPERTS] {
        let p = &self.pairs;
        [p[0].private, p[1].private, p[2].private, p[0].shared, p[1].shared, p[2].shared]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub branch: Branch,
    /// `[B, N, 6]`, absent without the fusion router.
    pub fusion_weights: Option<Var>,
    pub aggregated: Var,
    pub fused: Var,
    /// `[B]`
    pub prediction: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub task: Var,
    pub dec: Var,
    pub rec: Var,
    pub rec_levels: [Option<Var>; 3],
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct Derl<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub hed: Hed,
    pub recon: ReconNets,
    pub mrf: Mrf,
}

impl<T: Scalar> Derl<T> {
    /// Builds and initializes a model; all initial values derive from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng)?;
        let hed = Hed::new(&mut store, &config, &mut rng)?;
        let recon = ReconNets::new(&mut store, &config, &mut rng)?;
        let mrf = Mrf::new(&mut store, &config, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            hed,
            recon,
            mrf,
        })
    }

    /// Encodes and disentangles every modality of `batch` on `g`.
    pub fn encode(&self, g: &mut Graph<T>, batch: &Batch<T>) -> Result<Branch> {
        for m in Modality::ALL {
            let i = m.index();
            let want = [self.config.input_dims[i]];
            if batch.inputs[i].shape().last() != want.last() {
                return Err(TensorError::ShapeMismatch {
                    op: "encode",
                    left: batch.inputs[i].shape().to_vec(),
                    right: want.to_vec(),
                }
                .into());
            }
        }
        let mut unified = Vec::with_capacity(3);
        let mut pairs = Vec::with_capacity(3);
        for m in Modality::ALL {
            let i = m.index();
            let mut x = g.constant(batch.inputs[i].clone());
            if m == Modality::Text && self.encoder.text_unk.is_some() {
                let miss = g.constant(batch.missing[i].clone());
                x = self.encoder.substitute_text(g, x, miss)?;
            }
            let u = self.encoder.encode(g, x, m)?;
            pairs.push(self.hed.forward(g, u, m)?);
            unified.push(u);
        }
        Ok(Branch {
            unified: unified.try_into().unwrap(),
            pairs: pairs.try_into().unwrap(),
        })
    }

    /// Corrupted-branch forward pass through the prediction head.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch<T>) -> Result<Forward> {
        let branch = self.encode(g, batch)?;
        self.fuse_and_predict(g, branch)
    }

    fn fuse_and_predict(&self, g: &mut Graph<T>, branch: Branch) -> Result<Forward> {
        let experts = branch.expert_sequence();
        let fusion_weights = self.mrf.route(g, &experts)?;
        let aggregated = match fusion_weights {
            Some(w) => Mrf::aggregate(g, &experts, w)?,
            None => Mrf::average(g, &experts)?,
        };
        let fused = self.mrf.fuse(g, aggregated)?;
        let prediction = self.mrf.predict(g, fused)?;
        Ok(Forward {
            branch,
            fusion_weights,
            aggregated,
            fused,
            prediction,
        })
    }

    /// Complete-branch reconstruction targets; computed without gradient
    /// when `detach_targets` is set.
    pub fn targets(&self, g: &mut Graph<T>, complete: &Batch<T>) -> Result<Targets> {
        let branch = if self.config.detach_targets {
            g.no_grad(|g| self.encode(g, complete))?
        } else {
            self.encode(g, complete)?
        };
        Ok(Targets {
            unified: branch.unified,
            pairs: branch.pairs,
        })
    }

    /// Full training objective on paired corrupted and complete batches.
    pub fn loss(&self, g: &mut Graph<T>, corrupted: &Batch<T>, complete: &Batch<T>) -> Result<(Forward, LossTerms)> {
        if corrupted.len() != complete.len() || corrupted.labels != complete.labels {
            return Err(ModelError::Batch("corrupted and complete batches are not paired".into()));
        }
        let fwd = self.forward(g, corrupted)?;
        let targets = if self.config.switches.recon_enabled() {
            Some(self.targets(g, complete)?)
        } else {
            None
        };
        let terms = self.objective(g, &fwd, &corrupted.labels, targets.as_ref())?;
        Ok((fwd, terms))
    }

    /// Weighted objective for a finished forward pass; `targets` may be
    /// omitted only when reconstruction is disabled.
    pub fn objective(
        &self,
        g: &mut Graph<T>,
        fwd: &Forward,
        labels: &Tensor<T>,
        targets: Option<&Targets>,
    ) -> Result<LossTerms> {
        let labels = g.constant(labels.clone());
        let task = task_loss(g, fwd.prediction, labels)?;
        let dec = decoupling_loss(g, &fwd.branch.pairs, self.config.cosine_mode)?;
        let (rec, rec_levels) = match (self.config.switches.recon_enabled(), targets) {
            (true, Some(t)) => {
                let r = self.recon.losses(g, &fwd.branch.unified, &fwd.branch.pairs, t)?;
                (r.total, r.levels)
            }
            (true, None) => return Err(ModelError::Batch("reconstruction enabled but no targets given".into())),
            (false, _) => (total_recon(g, &[None; 3])?, [None; 3]),
        };
        let total = total_loss(g, task, dec, rec, self.config.loss_weights)?;
        Ok(LossTerms {
            task,
            dec,
            rec,
            rec_levels,
            total,
        })
    }

    /// Smallest magnitude of any argument to an absolute value in the
    /// objective. Finite differences are only meaningful when this exceeds
    /// the step by a wide margin.
    pub fn kink_margin(&self, corrupted: &Batch<T>, complete: &Batch<T>) -> Result<f64> {
        let mut g = Graph::inference_with_params(&self.store);
        let fwd = self.forward(&mut g, corrupted)?;
        let t = self.targets(&mut g, complete)?;
        let mut args = Vec::new();
        for m in Modality::ALL {
            let i = m.index();
            let pair = &fwd.branch.pairs[i];
            let mut residuals = Vec::new();
            if let Some(r) = self.recon.recon_input(&mut g, fwd.branch.unified[i], m) {
                residuals.push((r?, t.unified[i]));
            }
            if let Some(r) = self.recon.recon_disentangled(&mut g, pair, m) {
                let (p, s) = r?;
                residuals.push((p, t.pairs[i].private));
                residuals.push((s, t.pairs[i].shared));
            }
            if let Some(r) = self.recon.recon_joint(&mut g, pair, m) {
                residuals.push((r?, t.unified[i]));
            }
            for (a, b) in residuals {
                args.push(g.sub(a, b)?);
            }
            if self.config.cosine_mode == crate::config::CosineMode::Abs {
                args.push(g.cosine_similarity(pair.private, pair.shared)?);
            }
        }
        Ok(args
            .into_iter()
            .flat_map(|v| g.value(v).to_f64_vec())
            .map(f64::abs)
            .fold(f64::INFINITY, f64::min))
    }

    /// Predictions for `batch` on a non-recording graph.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Vec<f64>> {
        let mut g = Graph::inference_with_params(&self.store);
        let fwd = self.forward(&mut g, batch)?;
        Ok(g.value(fwd.prediction).to_f64_vec())
    }
}
