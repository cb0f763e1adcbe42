//! Importance-aware fusion of the six disentangled features followed by a
//! fusion transformer and the regression head.

use rand::Rng;

use crate::config::ModelConfig;
use crate::hed::{add_log_temperature, temperature};
use crate::nn::{weighted_sum, Activation, BlockConfig, Mlp2, TransformerStack};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Temperature, Var};
use crate::Scalar;

/// Number of fused features: private and shared for each modality.
pub const FUSION_EXPERTS: usize = 6;

/// Column labels of the fusion weights, in expert-sequence order.
pub const EXPERT_LABELS: [&str; FUSION_EXPERTS] = ["p_t", "p_v", "p_a", "s_t", "s_v", "s_a"];

#[derive(Clone, Debug)]
pub struct Mrf {
    /// `6D -> h -> 6` router; `None` averages the features uniformly.
    pub router: Option<Mlp2>,
    pub log_tau: Option<ParamId>,
    pub fusion: TransformerStack,
    /// Mean-pooled `D -> h -> 1` regressor.
    pub head: Mlp2,
}

impl Mrf {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.dim;
        let (router, log_tau) = if cfg.switches.mrf {
            let r = Mlp2::new(
                store,
                "mrf.router",
                (FUSION_EXPERTS * d, cfg.fusion_router_hidden, FUSION_EXPERTS),
                Activation::Gelu,
                rng,
            )?;
            let t = add_log_temperature(store, "mrf.log_tau", 1.0 / FUSION_EXPERTS as f64)?;
            (Some(r), Some(t))
        } else {
            (None, None)
        };
        let block = BlockConfig {
            dim: d,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            ln_eps: cfg.ln_eps,
        };
        let mut fusion = TransformerStack::new(store, "mrf.fusion", cfg.fusion_depth, &block, rng)?;
        fusion.identity_attention = cfg.identity_attention;
        let head = Mlp2::new(store, "head", (d, cfg.head_hidden, 1), Activation::Gelu, rng)?;
        Ok(Self {
            router,
            log_tau,
            fusion,
            head,
        })
    }

    /// Token-wise fusion weights `W^r: [..., N, 6]`, or `None` without a router.
    pub fn route<T: Scalar>(&self, g: &mut Graph<T>, experts: &[Var; FUSION_EXPERTS]) -> Result<Option<Var>> {
        let (Some(router), Some(log_tau)) = (&self.router, self.log_tau) else {
            return Ok(None);
        };
        let axis = g.shape(experts[0]).len() - 1;
        let cat = g.concat(experts, axis)?;
        let logits = router.forward(g, cat)?;
        let tau = temperature(g, log_tau)?;
        Ok(Some(g.softmax(logits, Temperature::Learned(tau))?))
    }

    /// Per-token combination `sum_j W^r[.., j] E_j`.
    pub fn aggregate<T: Scalar>(g: &mut Graph<T>, experts: &[Var; FUSION_EXPERTS], w: Var) -> Result<Var> {
        weighted_sum(g, w, 0, experts)
    }

    /// Uniform mean of the six features.
    pub fn average<T: Scalar>(g: &mut Graph<T>, experts: &[Var; FUSION_EXPERTS]) -> Result<Var> {
        let mut acc = experts[0];
        for &e in &experts[1..] {
            acc = g.add(acc, e)?;
        }
        g.scale(acc, T::lit(1.0 / FUSION_EXPERTS as f64))
    }

    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, h_e: Var) -> Result<Var> {
        self.fusion.forward(g, h_e)
    }

    /// Mean over tokens then the head: `[B, N, D] -> [B]` (or `[N, D] -> []`).
    pub fn predict<T: Scalar>(&self, g: &mut Graph<T>, h_f: Var) -> Result<Var> {
        let rank = g.shape(h_f).len();
        let pooled = g.mean_axis(h_f, rank - 2)?;
        let y = self.head.forward(g, pooled)?;
        let mut shape = g.shape(y).to_vec();
        shape.pop();
        g.reshape(y, &shape)
    }
}
