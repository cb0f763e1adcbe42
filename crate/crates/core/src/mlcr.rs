//! Multi-level reconstruction of complete-branch features from the
//! corrupted branch: input level, disentangled level and joint level.

use rand::Rng;

use crate::config::ModelConfig;
use crate::data::Modality;
use crate::hed::DisentangledPair;
use crate::nn::{Activation, Mlp2};
use crate::tensor::{Graph, ParamStore, Result, Tensor, Var};
use crate::Scalar;

/// `x + mlp(x)` with the MLP output layer zero-initialized, so the map
/// starts as the identity.
#[derive(Clone, Debug)]
pub struct Residual {
    pub mlp: Mlp2,
}

impl Residual {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mlp: Mlp2::new_zero_output(store, name, (dim, hidden, dim), Activation::Gelu, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.mlp.forward(g, x)?;
        g.add(x, h)
    }
}

/// Complete-branch features the corrupted branch is pulled towards.
#[derive(Clone, Copy, Debug)]
pub struct Targets {
    pub unified: [Var; 3],
    pub pairs: [DisentangledPair; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct ReconLosses {
    /// `L^1`, `L^2`, `L^3`; `None` for disabled levels.
    pub levels: [Option<Var>; 3],
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct ReconNets {
    pub input: Option<[Residual; 3]>,
    pub private: Option<[Residual; 3]>,
    pub shared: Option<[Residual; 3]>,
    /// `2D -> D` maps over concatenated private and shared features.
    pub joint: Option<[Mlp2; 3]>,
}

fn per_modality<X, R: Rng>(
    rng: &mut R,
    mut build: impl FnMut(Modality, &mut R) -> Result<X>,
) -> Result<[X; 3]> {
    let [a, b, c] = Modality::ALL.map(|m| build(m, rng));
    Ok([a?, b?, c?])
}

impl ReconNets {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, h) = (cfg.dim, cfg.recon_hidden);
        let [l1, l2, l3] = cfg.switches.recon_levels;
        let mut res = |tag: &str, rng: &mut R| {
            per_modality(rng, |m, rng| Residual::new(store, &format!("mlcr.{tag}.{m}"), d, h, rng))
        };
        let input = if l1 { Some(res("input", rng)?) } else { None };
        let private = if l2 { Some(res("private", rng)?) } else { None };
        let shared = if l2 { Some(res("shared", rng)?) } else { None };
        let joint = if l3 {
            Some(per_modality(rng, |m, rng| {
                Mlp2::new(store, &format!("mlcr.joint.{m}"), (2 * d, h, d), Activation::Gelu, rng)
            })?)
        } else {
            None
        };
        Ok(Self {
            input,
            private,
            shared,
            joint,
        })
    }

    /// `R^1_m(U_hat)`.
    pub fn recon_input<T: Scalar>(&self, g: &mut Graph<T>, u_hat: Var, m: Modality) -> Option<Result<Var>> {
        self.input.as_ref().map(|r| r[m.index()].forward(g, u_hat))
    }

    /// `(R^2_p(H_hat^p), R^2_s(H_hat^s))`.
    pub fn recon_disentangled<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pair: &DisentangledPair,
        m: Modality,
    ) -> Option<Result<(Var, Var)>> {
        let (p, s) = (self.private.as_ref()?, self.shared.as_ref()?);
        Some((|| Ok((p[m.index()].forward(g, pair.private)?, s[m.index()].forward(g, pair.shared)?)))())
    }

    /// `R^3_m([H_hat^p; H_hat^s])`.
    pub fn recon_joint<T: Scalar>(&self, g: &mut Graph<T>, pair: &DisentangledPair, m: Modality) -> Option<Result<Var>> {
        let joint = self.joint.as_ref()?;
        Some((|| {
            let axis = g.shape(pair.private).len() - 1;
            let cat = g.concat(&[pair.private, pair.shared], axis)?;
            joint[m.index()].forward(g, cat)
        })())
    }

    /// Level losses summed over modalities and their combination.
    pub fn losses<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        unified: &[Var; 3],
        pairs: &[DisentangledPair; 3],
        targets: &Targets,
    ) -> Result<ReconLosses> {
        let mut levels: [Option<Var>; 3] = [None; 3];
        let mut push = |g: &mut Graph<T>, level: usize, term: Var| -> Result<()> {
            levels[level] = Some(match levels[level] {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
            Ok(())
        };
        for m in Modality::ALL {
            let i = m.index();
            if let Some(r) = self.recon_input(g, unified[i], m) {
                let l = g.l1_distance(r?, targets.unified[i])?;
                push(g, 0, l)?;
            }
            if let Some(r) = self.recon_disentangled(g, &pairs[i], m) {
                let (hp, hs) = r?;
                let lp = g.l1_distance(hp, targets.pairs[i].private)?;
                let ls = g.l1_distance(hs, targets.pairs[i].shared)?;
                let l = g.add(lp, ls)?;
                push(g, 1, l)?;
            }
            if let Some(r) = self.recon_joint(g, &pairs[i], m) {
                let l = g.l1_distance(r?, targets.unified[i])?;
                push(g, 2, l)?;
            }
        }
        let total = total_recon(g, &levels)?;
        Ok(ReconLosses { levels, total })
    }
}

/// Mean of the enabled level losses; zero when none is enabled.
pub fn total_recon<T: Scalar>(g: &mut Graph<T>, levels: &[Option<Var>; 3]) -> Result<Var> {
    let on: Vec<Var> = levels.iter().flatten().copied().collect();
    if on.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let mut acc = on[0];
    for &v in &on[1..] {
        acc = g.add(acc, v)?;
    }
    g.scale(acc, T::lit(1.0 / on.len() as f64))
}
