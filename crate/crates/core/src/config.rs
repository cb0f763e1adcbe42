//! Model and training configuration with dataset-sized presets.

use serde::{Deserialize, Serialize};

use crate::nn::Activation;

#[derive(Debug, thiserror::Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

/// How the decoupling loss treats the private/shared cosine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    /// `|cos|`, minimized at orthogonality.
    #[default]
    Abs,
    /// Signed cosine.
    Raw,
}

/// Module switches used by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Switches {
    /// Mixture-of-experts disentanglement; when off a single linear map per
    /// modality produces the private and shared halves.
    pub hed: bool,
    /// Reconstruction levels (input, disentangled, joint).
    pub recon_levels: [bool; 3],
    /// Learned fusion routing; when off the six features are averaged.
    pub mrf: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            hed: true,
            recon_levels: [true; 3],
            mrf: true,
        }
    }
}

impl Switches {
    pub fn recon_enabled(&self) -> bool {
        self.recon_levels.iter().any(|&b| b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input feature widths `(D_t, D_v, D_a)`.
    pub input_dims: [usize; 3],
    /// Sequence lengths `(T_t, T_v, T_a)`; sizes the positional embeddings.
    pub seq_lens: [usize; 3],
    /// Common width `D`.
    pub dim: usize,
    /// Number of shared bottleneck tokens `N`.
    pub bottleneck_tokens: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
    pub unified_depth: usize,
    pub fusion_depth: usize,
    pub private_experts: usize,
    pub shared_experts: usize,
    pub expert_hidden: usize,
    pub expert_activation: Activation,
    pub router_hidden: usize,
    pub fusion_router_hidden: usize,
    pub recon_hidden: usize,
    pub head_hidden: usize,
    pub cosine_mode: CosineMode,
    /// Compute reconstruction targets without gradient.
    pub detach_targets: bool,
    /// Replace masked text rows with a learned vector instead of zeros.
    pub learned_text_unk: bool,
    /// Weights of the task, decoupling and reconstruction terms.
    pub loss_weights: [f64; 3],
    /// Debug switch forcing every attention matrix to the identity.
    pub identity_attention: bool,
    pub switches: Switches,
}

impl ModelConfig {
    /// Desk-scale preset for synthetic data.
    pub fn toy(input_dims: [usize; 3], seq_lens: [usize; 3]) -> Self {
        let dim = 16;
        Self {
            input_dims,
            seq_lens,
            dim,
            bottleneck_tokens: 4,
            heads: 1,
            mlp_ratio: 4,
            ln_eps: 1e-5,
            unified_depth: 1,
            fusion_depth: 2,
            private_experts: 1,
            shared_experts: 3,
            expert_hidden: dim,
            expert_activation: Activation::Gelu,
            router_hidden: dim,
            fusion_router_hidden: dim,
            recon_hidden: dim,
            head_hidden: dim,
            cosine_mode: CosineMode::Abs,
            detach_targets: true,
            learned_text_unk: false,
            loss_weights: [1.0; 3],
            identity_attention: false,
            switches: Switches::default(),
        }
    }

    /// MOSI-sized preset: 768/20/5 inputs, `N = 4`, one private and three
    /// shared experts, `D = 128`.
    pub fn mosi() -> Self {
        let dim = 128;
        Self {
            dim,
            bottleneck_tokens: 4,
            private_experts: 1,
            shared_experts: 3,
            expert_hidden: dim,
            router_hidden: dim,
            fusion_router_hidden: dim,
            recon_hidden: dim,
            head_hidden: dim,
            unified_depth: 1,
            fusion_depth: 2,
            ..Self::toy([768, 20, 5], [50, 500, 375])
        }
    }

    /// MOSEI-sized preset: 768/35/74 inputs, `N = 8`, three private and three
    /// shared experts, `D = 128`.
    pub fn mosei() -> Self {
        Self {
            input_dims: [768, 35, 74],
            seq_lens: [50, 500, 500],
            bottleneck_tokens: 8,
            private_experts: 3,
            shared_experts: 3,
            ..Self::mosi()
        }
    }

    pub fn preset(name: &str, input_dims: [usize; 3], seq_lens: [usize; 3]) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy(input_dims, seq_lens)),
            "mosi" => Some(Self::mosi()),
            "mosei" => Some(Self::mosei()),
            _ => None,
        }
    }

    pub fn experts(&self) -> usize {
        self.private_experts + self.shared_experts
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        let positive = [
            ("dim", self.dim),
            ("bottleneck_tokens", self.bottleneck_tokens),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("private_experts", self.private_experts),
            ("shared_experts", self.shared_experts),
            ("expert_hidden", self.expert_hidden),
            ("router_hidden", self.router_hidden),
            ("fusion_router_hidden", self.fusion_router_hidden),
            ("recon_hidden", self.recon_hidden),
            ("head_hidden", self.head_hidden),
        ];
        for (k, v) in positive {
            if v == 0 {
                return err(format!("{k} must be positive"));
            }
        }
        if self.input_dims.iter().chain(&self.seq_lens).any(|&x| x == 0) {
            return err("input_dims and seq_lens must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return err(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if !(self.ln_eps > 0.0) {
            return err("ln_eps must be positive".into());
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return err("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Canonical TOML text; hashed into saved models.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of training samples corrupted each epoch.
    pub augment_fraction: f64,
    /// Missing rate of the fixed validation corruption used for selection.
    pub selection_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 64,
            epochs: 200,
            augment_fraction: 0.5,
            selection_rate: 0.5,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Short schedule for synthetic data.
    pub fn toy() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 32,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: &str| Err(ConfigError(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return err("batch_size and epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) || !(0.0..=1.0).contains(&self.selection_rate) {
            return err("augment_fraction and selection_rate must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return err("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return err("adam_eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for c in [ModelConfig::toy([16, 12, 8], [8, 8, 8]), ModelConfig::mosi(), ModelConfig::mosei()] {
            c.validate().unwrap();
            let back: ModelConfig = toml::from_str(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
        assert_eq!(ModelConfig::mosi().bottleneck_tokens, 4);
        assert_eq!(ModelConfig::mosei().bottleneck_tokens, 8);
        assert_eq!((ModelConfig::mosei().private_experts, ModelConfig::mosei().shared_experts), (3, 3));
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ModelConfig::mosi().to_toml();
        text.insert_str(0, "colour = 1\n");
        assert!(toml::from_str::<ModelConfig>(&text).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut c = ModelConfig::toy([4, 4, 4], [2, 2, 2]);
        c.heads = 3;
        assert!(c.validate().is_err());
        let t = TrainConfig {
            augment_fraction: 1.5,
            ..TrainConfig::default()
        };
        assert!(t.validate().is_err());
    }
}
