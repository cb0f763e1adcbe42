//! Per-modality projection and unified transformer encoding with shared
//! bottleneck tokens.

use rand::Rng;

use crate::config::ModelConfig;
use crate::data::Modality;
use crate::nn::{normal, BlockConfig, Linear, TransformerStack};
use crate::tensor::{Graph, ParamId, ParamStore, Result, TensorError, Var};
use crate::Scalar;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Encoder {
    pub projections: [Linear; 3],
    /// Learned positional embeddings `[T_m, D]`.
    pub positions: [ParamId; 3],
    /// Shared bottleneck tokens `U_b: [N, D]`.
    pub bottleneck: ParamId,
    pub stacks: [TransformerStack; 3],
    /// Learned replacement for masked text rows.
    pub text_unk: Option<ParamId>,
    pub tokens: usize,
    pub dim: usize,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.dim;
        let block = BlockConfig {
            dim: d,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            ln_eps: cfg.ln_eps,
        };
        let bottleneck = store.add("encoder.bottleneck", normal(rng, &[cfg.bottleneck_tokens, d], INIT_STD)?)?;
        let mut projections = Vec::new();
        let mut positions = Vec::new();
        let mut stacks = Vec::new();
        for m in Modality::ALL {
            let i = m.index();
            projections.push(Linear::new(store, &format!("encoder.proj.{m}"), cfg.input_dims[i], d, rng)?);
            positions.push(store.add(format!("encoder.pos.{m}"), normal(rng, &[cfg.seq_lens[i], d], INIT_STD)?)?);
            let mut stack = TransformerStack::new(store, &format!("encoder.unified.{m}"), cfg.unified_depth, &block, rng)?;
            stack.identity_attention = cfg.identity_attention;
            stacks.push(stack);
        }
        let text_unk = if cfg.learned_text_unk {
            Some(store.add("encoder.text_unk", normal(rng, &[cfg.input_dims[0]], INIT_STD)?)?)
        } else {
            None
        };
        Ok(Self {
            projections: projections.try_into().unwrap(),
            positions: positions.try_into().unwrap(),
            bottleneck,
            stacks: stacks.try_into().unwrap(),
            text_unk,
            tokens: cfg.bottleneck_tokens,
            dim: d,
        })
    }

    /// Adds the learned unknown vector at masked text rows; `missing` is
    /// `[B, T, 1]` with ones at masked positions (whose features are zero).
    pub fn substitute_text<T: Scalar>(&self, g: &mut Graph<T>, x: Var, missing: Var) -> Result<Var> {
        match self.text_unk {
            Some(unk) => {
                let fill = g.mul(missing, g.param(unk))?;
                g.add(x, fill)
            }
            None => Ok(x),
        }
    }

    /// `[B, T_m, D_m] -> [B, T_m, D]`, affine map plus positional embedding.
    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, x: Var, m: Modality) -> Result<Var> {
        let proj = &self.projections[m.index()];
        let shape = g.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] != proj.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "project",
                left: shape,
                right: vec![proj.in_dim],
            });
        }
        let t = shape[shape.len() - 2];
        let pos = g.param(self.positions[m.index()]);
        let max_t = g.shape(pos)[0];
        if t > max_t {
            return Err(TensorError::ShapeMismatch {
                op: "project",
                left: shape,
                right: vec![max_t, proj.in_dim],
            });
        }
        let pos = if t < max_t { g.slice(pos, 0, 0, t)? } else { pos };
        let h = proj.forward(g, x)?;
        g.add(h, pos)
    }

    /// Prepends `U_b` to the projected sequence, runs the modality's stack
    /// and keeps the first `N` positions: `[B, T, D] -> [B, N, D]`.
    pub fn encode_unified<T: Scalar>(&self, g: &mut Graph<T>, projected: Var, m: Modality) -> Result<Var> {
        let shape = g.shape(projected).to_vec();
        let ub = g.param(self.bottleneck);
        let seq = if shape.len() == 3 {
            let ub = g.broadcast_to(ub, &[shape[0], self.tokens, self.dim])?;
            g.concat(&[ub, projected], 1)?
        } else {
            g.concat(&[ub, projected], 0)?
        };
        let out = self.stacks[m.index()].forward(g, seq)?;
        g.slice(out, shape.len() - 2, 0, self.tokens)
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, x: Var, m: Modality) -> Result<Var> {
        let p = self.project(g, x, m)?;
        self.encode_unified(g, p, m)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check, Tensor};

    fn setup(identity: bool) -> (ParamStore<f64>, Encoder, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cfg = ModelConfig::toy([5, 3, 2], [6, 4, 3]);
        cfg.dim = 8;
        cfg.bottleneck_tokens = 2;
        cfg.identity_attention = identity;
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        (store, enc, rng)
    }

    #[test]
    fn zero_input_with_zero_bias_gives_only_position_term() {
        let (mut store, enc, _) = setup(false);
        let b = enc.projections[1].bias.unwrap();
        store.get_mut(b).data_mut().fill(0.0);
        let mut g = Graph::inference_with_params(&store);
        let x = g.constant(Tensor::zeros([2, 4, 3]).unwrap());
        let y = enc.project(&mut g, x, Modality::Visual).unwrap();
        let pos = store.get(enc.positions[1]);
        for bi in 0..2 {
            assert_eq!(&g.value(y).data()[bi * 32..(bi + 1) * 32], pos.data());
        }
    }

    #[test]
    fn identity_projection_reproduces_input_plus_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = ModelConfig::toy([4, 4, 4], [3, 3, 3]);
        cfg.dim = 4;
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        let p = &enc.projections[0];
        store.set(p.weight, Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).unwrap()).unwrap();
        store.get_mut(p.bias.unwrap()).data_mut().fill(0.0);
        let x: Tensor<f64> = normal(&mut rng, &[1, 3, 4], 1.0).unwrap();
        let mut g = Graph::inference_with_params(&store);
        let xv = g.constant(x.clone());
        let y = enc.project(&mut g, xv, Modality::Text).unwrap();
        let pos = store.get(enc.positions[0]);
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert!((v - (x.data()[i] + pos.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_input_width_is_a_conformance_error() {
        let (store, enc, _) = setup(false);
        let mut g = Graph::inference_with_params(&store);
        let x = g.constant(Tensor::zeros([1, 4, 7]).unwrap());
        assert!(matches!(
            enc.project(&mut g, x, Modality::Visual),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn unified_output_has_bottleneck_shape_for_any_length() {
        let (store, enc, mut rng) = setup(false);
        for t in 1..=6 {
            let x: Tensor<f64> = normal(&mut rng, &[3, t, 5], 1.0).unwrap();
            let mut g = Graph::inference_with_params(&store);
            let xv = g.constant(x);
            let u = enc.encode(&mut g, xv, Modality::Text).unwrap();
            assert_eq!(g.shape(u), &[3, 2, 8]);
        }
    }

    #[test]
    fn pass_through_mode_returns_bottleneck_tokens() {
        let (mut store, enc, mut rng) = setup(true);
        for s in &enc.stacks {
            s.zero_residual_branches(&mut store);
        }
        let x: Tensor<f64> = normal(&mut rng, &[2, 4, 3], 1.0).unwrap();
        let mut g = Graph::inference_with_params(&store);
        let xv = g.constant(x);
        let u = enc.encode(&mut g, xv, Modality::Visual).unwrap();
        let ub = store.get(enc.bottleneck).data();
        assert_eq!(&g.value(u).data()[..16], ub);
        assert_eq!(&g.value(u).data()[16..], ub);
    }

    #[test]
    fn substitution_content_changes_output_and_order_matters() {
        let (store, enc, mut rng) = setup(false);
        let x: Tensor<f64> = normal(&mut rng, &[1, 6, 5], 1.0).unwrap();
        let run = |x: Tensor<f64>| {
            let mut g = Graph::inference_with_params(&store);
            let xv = g.constant(x);
            let u = enc.encode(&mut g, xv, Modality::Text).unwrap();
            g.value(u).clone()
        };
        let base = run(x.clone());
        let mut sub = x.clone();
        sub.data_mut()[10..15].fill(0.5);
        assert!(run(sub).max_abs_diff(&base).unwrap() > 1e-9);
        let mut perm = x.clone();
        let (a, b) = perm.data_mut().split_at_mut(5);
        a.swap_with_slice(&mut b[..5]);
        assert!(run(perm).max_abs_diff(&base).unwrap() > 1e-9);
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let (store, enc, mut rng) = setup(false);
        let x: Tensor<f64> = normal(&mut rng, &[2, 3, 2], 1.0).unwrap();
        let w: Tensor<f64> = normal(&mut rng, &[2, 2, 8], 1.0).unwrap();
        let r = grad_check(
            &store,
            |g| {
                let xv = g.constant(x.clone());
                let u = enc.encode(g, xv, Modality::Audio)?;
                let wv = g.constant(w.clone());
                let p = g.mul(u, wv)?;
                g.sum_all(p)
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}
