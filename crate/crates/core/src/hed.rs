//! Hybrid expert disentanglement: token-wise soft routing over per-modality
//! private experts and cross-modal shared experts.

use rand::Rng;

use crate::config::{CosineMode, ModelConfig};
use crate::data::Modality;
use crate::nn::{weighted_sum, Activation, Linear, Mlp2};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Temperature, Tensor, Var};
use crate::Scalar;

/// Bounds applied to learnable softmax temperatures.
pub const TEMPERATURE_RANGE: (f64, f64) = (1e-3, 10.0);

/// Learnable temperature `clamp(exp(rho), 1e-3, 10)`.
pub fn temperature<T: Scalar>(g: &mut Graph<T>, log_tau: ParamId) -> Result<Var> {
    let e = g.exp(g.param(log_tau))?;
    g.clamp(e, T::lit(TEMPERATURE_RANGE.0), T::lit(TEMPERATURE_RANGE.1))
}

/// Scalar parameter holding `ln(tau0)`.
pub fn add_log_temperature<T: Scalar>(store: &mut ParamStore<T>, name: &str, tau0: f64) -> Result<ParamId> {
    store.add(name, Tensor::scalar(T::lit(tau0.ln())))
}

#[derive(Clone, Debug)]
pub struct ExpertBank {
    /// `private[m][k]`: expert `k` of modality `m`.
    pub private: [Vec<Mlp2>; 3],
    /// One set of shared experts used by every modality.
    pub shared: Vec<Mlp2>,
    /// Per-modality routers `D -> D_h -> k_p + k_s`.
    pub routers: [Mlp2; 3],
    pub log_tau: ParamId,
}

impl ExpertBank {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, h) = (cfg.dim, cfg.expert_hidden);
        let act = cfg.expert_activation;
        let mut private = Vec::new();
        for m in Modality::ALL {
            let experts = (0..cfg.private_experts)
                .map(|k| Mlp2::new(store, &format!("hed.private.{m}.{k}"), (d, h, d), act, rng))
                .collect::<Result<Vec<_>>>()?;
            private.push(experts);
        }
        let shared = (0..cfg.shared_experts)
            .map(|k| Mlp2::new(store, &format!("hed.shared.{k}"), (d, h, d), act, rng))
            .collect::<Result<Vec<_>>>()?;
        let routers = Modality::ALL
            .map(|m| Mlp2::new(store, &format!("hed.router.{m}"), (d, cfg.router_hidden, cfg.experts()), Activation::Gelu, rng));
        let [a, b, c] = routers;
        let log_tau = add_log_temperature(store, "hed.log_tau", 1.0 / cfg.experts() as f64)?;
        Ok(Self {
            private: private.try_into().unwrap(),
            shared,
            routers: [a?, b?, c?],
            log_tau,
        })
    }

    pub fn experts(&self) -> usize {
        self.private[0].len() + self.shared.len()
    }

    /// Routing logits `G^e_m(U)`: `[..., N, k_p + k_s]`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, u: Var, m: Modality) -> Result<Var> {
        self.routers[m.index()].forward(g, u)
    }

    /// Row-stochastic routing weights `softmax(G^e_m(U) / tau_e)`.
    pub fn route<T: Scalar>(&self, g: &mut Graph<T>, u: Var, m: Modality) -> Result<Var> {
        let logits = self.logits(g, u, m)?;
        let tau = temperature(g, self.log_tau)?;
        g.softmax(logits, Temperature::Learned(tau))
    }

    /// Private and shared mixtures of expert outputs under weights `w`.
    pub fn disentangle<T: Scalar>(&self, g: &mut Graph<T>, u: Var, w: Var, m: Modality) -> Result<(Var, Var)> {
        let private = self.private[m.index()]
            .iter()
            .map(|e| e.forward(g, u))
            .collect::<Result<Vec<_>>>()?;
        let shared = self.shared.iter().map(|e| e.forward(g, u)).collect::<Result<Vec<_>>>()?;
        let hp = weighted_sum(g, w, 0, &private)?;
        let hs = weighted_sum(g, w, private.len(), &shared)?;
        Ok((hp, hs))
    }
}

/// Private and shared representations of one modality.
#[derive(Clone, Copy, Debug)]
pub struct DisentangledPair {
    pub private: Var,
    pub shared: Var,
    /// Routing weights, absent for the linear variant.
    pub routing: Option<Var>,
}

#[derive(Clone, Debug)]
pub enum Hed {
    Experts(ExpertBank),
    /// Ablation: one linear map `D -> 2D` per modality split into halves.
    Linear([Linear; 3]),
}

impl Hed {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        if cfg.switches.hed {
            return Ok(Hed::Experts(ExpertBank::new(store, cfg, rng)?));
        }
        let maps = Modality::ALL.map(|m| Linear::new(store, &format!("hed.linear.{m}"), cfg.dim, 2 * cfg.dim, rng));
        let [a, b, c] = maps;
        Ok(Hed::Linear([a?, b?, c?]))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, u: Var, m: Modality) -> Result<DisentangledPair> {
        match self {
            Hed::Experts(bank) => {
                let w = bank.route(g, u, m)?;
                let (private, shared) = bank.disentangle(g, u, w, m)?;
                Ok(DisentangledPair {
                    private,
                    shared,
                    routing: Some(w),
                })
            }
            Hed::Linear(maps) => {
                let lin = &maps[m.index()];
                let h = lin.forward(g, u)?;
                let axis = g.shape(h).len() - 1;
                let d = lin.in_dim;
                Ok(DisentangledPair {
                    private: g.slice(h, axis, 0, d)?,
                    shared: g.slice(h, axis, d, d)?,
                    routing: None,
                })
            }
        }
    }
}

/// Sum over modalities of the token-averaged cosine between private and
/// shared features (absolute value in [`CosineMode::Abs`]).
pub fn decoupling_loss<T: Scalar>(g: &mut Graph<T>, pairs: &[DisentangledPair], mode: CosineMode) -> Result<Var> {
    let mut total: Option<Var> = None;
    for p in pairs {
        let c = g.cosine_similarity(p.private, p.shared)?;
        let c = match mode {
            CosineMode::Abs => g.abs(c)?,
            CosineMode::Raw => c,
        };
        let term = g.mean_all(c)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one modality"))
}
