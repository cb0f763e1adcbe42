//! Parameterized building blocks shared by every stage of the model.
//!
//! Layers own only [`ParamId`]s; their values live in a [`ParamStore`] and are
//! read through whatever [`Graph`] the forward pass runs on.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, Var};
use crate::Scalar;

/// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` tensor.
pub fn uniform_fan_in<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-bound..bound)))
}

pub fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Result<Tensor<T>> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)))
}

/// Affine map over the last axis: `x @ W + b`, with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(rng, &[in_dim, out_dim], in_dim)?)?;
        let bias = store.add(format!("{name}.bias"), uniform_fan_in(rng, &[out_dim], in_dim)?)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        })
    }

    /// Zero weight and bias.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([in_dim, out_dim])?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_dim])?)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        })
    }

    /// Weight only, `x @ W`.
    pub fn without_bias<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(rng, &[in_dim, out_dim], in_dim)?)?;
        Ok(Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = g.matmul(x, g.param(self.weight))?;
        match self.bias {
            Some(b) => g.add(h, g.param(b)),
            None => Ok(h),
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

/// Two-layer perceptron `fc2(act(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl Mlp2 {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let (i, h, o) = dims;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), i, h, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), h, o, rng)?,
            activation,
        })
    }

    /// Same as [`Mlp2::new`] but with a zero-initialized output layer.
    pub fn new_zero_output<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let (i, h, o) = dims;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), i, h, rng)?,
            fc2: Linear::zeroed(store, &format!("{name}.fc2"), h, o)?,
            activation,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = match self.activation {
            Activation::Gelu => g.gelu(h)?,
            Activation::Identity => h,
        };
        self.fc2.forward(g, h)
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], T::one())?)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])?)?,
            eps,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, T::lit(self.eps))
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}

/// Multi-head self-attention with separate query/key/value/output maps.
///
/// The key map has no bias: a key bias shifts every score of a query row by
/// the same amount and cancels in the softmax.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::without_bias(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng)?,
            heads,
        })
    }

    /// `x: [batch, len, dim]`
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, identity: bool) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let a = g.attention(q, k, v, self.heads, identity)?;
        self.output.forward(g, a)
    }

    pub fn num_params(&self) -> usize {
        self.query.num_params() + self.key.num_params() + self.value.num_params() + self.output.num_params()
    }
}

/// Pre-norm transformer block:
/// `h = x + attn(ln1(x)); y = h + mlp(ln2(h))` with a GELU MLP of width `4 * dim`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp2,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, cfg.ln_eps)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), d, cfg.heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, cfg.ln_eps)?,
            mlp: Mlp2::new(store, &format!("{name}.mlp"), (d, cfg.mlp_ratio * d, d), Activation::Gelu, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, identity_attention: bool) -> Result<Var> {
        let n = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, n, identity_attention)?;
        let h = g.add(x, a)?;
        let n = self.ln2.forward(g, h)?;
        let m = self.mlp.forward(g, n)?;
        g.add(h, m)
    }

    pub fn num_params(&self) -> usize {
        self.ln1.num_params() + self.attn.num_params() + self.ln2.num_params() + self.mlp.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    /// Debug switch: force every attention matrix to the identity.
    pub identity_attention: bool,
}

impl TransformerStack {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        depth: usize,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            identity_attention: false,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, x, self.identity_attention)?;
        }
        Ok(x)
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(TransformerBlock::num_params).sum()
    }

    /// Zeroes the attention output projection and MLP of every block, making
    /// the stack the identity map when combined with identity attention.
    pub fn zero_residual_branches<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for b in &self.blocks {
            for lin in [&b.attn.output, &b.mlp.fc2] {
                for id in std::iter::once(lin.weight).chain(lin.bias) {
                    store.get_mut(id).data_mut().fill(T::zero());
                }
            }
        }
    }
}

/// Token-wise mixture `sum_k w[..., offset + k] * outputs[k]`, where `w` is
/// `[..., K]` and every output is `[..., D]`.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, w: Var, offset: usize, outputs: &[Var]) -> Result<Var> {
    let axis = g.shape(w).len() - 1;
    let mut acc: Option<Var> = None;
    for (k, &o) in outputs.iter().enumerate() {
        let col = g.slice(w, axis, offset + k, 1)?;
        let term = g.mul(col, o)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one output"))
}
