// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-command TOML configuration. Every key is optional; missing keys take
//! the defaults below, unknown keys are rejected. `--seed` replaces `seed`.

use std::path::Path;

use anyhow::{Context, Result};
use latentscope::corpus::ANTI_BIAS_QUESTION;
use latentscope::fixture::FixtureSpec;
use latentscope::intervene::{PositionScope, SpliceMode};
use latentscope::Group;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Read a TOML config, or the defaults when no path is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Commands whose configuration carries a seed.
pub trait Seeded {
    fn set_seed(&mut self, seed: u64);
}

macro_rules! seeded {
    ($($t:ty),*) => {$(
        impl Seeded for $t {
            fn set_seed(&mut self, seed: u64) {
                self.seed = seed;
            }
        }
    )*};
}

seeded!(GenCorpusConfig, TrainSaeConfig, ProbeConfig, InterpConfig, SteerConfig, AblateConfig, EffectConfig, AuditConfig);

fn default_hook() -> String {
    "resid_pre.1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenCorpusConfig {
    /// Corpus seed; the model seed is `fixture.seed`.
    pub seed: u64,
    pub n_docs: usize,
    pub doc_length_min: usize,
    pub doc_length_max: usize,
    pub marker_rate: f64,
    pub correlation: f64,
    pub condition_rate: f64,
    pub fixture: FixtureSpec,
}

impl Default for GenCorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_docs: 1000,
            doc_length_min: 12,
            doc_length_max: 24,
            marker_rate: 0.3,
            correlation: 0.9,
            condition_rate: 0.5,
            fixture: FixtureSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSaeConfig {
    pub seed: u64,
    pub hook: String,
    pub width: usize,
    pub sparsity_weight: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for TrainSaeConfig {
    fn default() -> Self {
        Self {
            seed: 3,
            hook: default_hook(),
            width: 64,
            sparsity_weight: 0.1,
            learning_rate: 0.02,
            steps: 4000,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Seeds the train/test split and the validation carve-out.
    pub seed: u64,
    pub hook: String,
    /// Group treated as the positive class.
    pub positive_group: Group,
    pub train_fraction: f64,
    /// Share of the training split held out to choose λ.
    pub validation_fraction: f64,
    pub lambda_grid: Vec<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub top_k: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            seed: 2,
            hook: default_hook(),
            positive_group: Group::B,
            train_fraction: 0.8,
            validation_fraction: 0.2,
            lambda_grid: vec![1e-3, 1e-2, 1e-1],
            max_iter: 2000,
            tol: 1e-9,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpConfig {
    pub seed: u64,
    pub hook: String,
    /// Latents to describe; empty means the top `top_latents` rows of `ranking.csv`.
    pub latents: Vec<usize>,
    pub top_latents: usize,
    pub top_k_examples: usize,
    pub per_tercile: usize,
    pub context_radius: usize,
    /// Keywords per description, taken from the most frequent activating tokens.
    pub max_keywords: usize,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            seed: 4,
            hook: default_hook(),
            latents: Vec::new(),
            top_latents: 5,
            top_k_examples: 10,
            per_tercile: 15,
            context_radius: 8,
            max_keywords: 2,
        }
    }
}

/// Which marker fills the final prompt slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    None,
    GroupA,
    GroupB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerConfig {
    pub seed: u64,
    pub hook: String,
    /// Latent to steer; absent means rank 1 of `ranking.csv`.
    pub latent: Option<usize>,
    pub alpha: f64,
    /// Fixed `z_max`; absent means the per-input global max.
    pub zmax_fixed: Option<f64>,
    pub positions: PositionScope,
    pub splice: SpliceMode,
    pub n_prompts: usize,
    pub context_len: usize,
    pub slot: Slot,
    /// Grid for steering-factor selection; empty skips it.
    pub alpha_grid: Vec<f64>,
    pub max_new_tokens: usize,
    /// Sampling temperature; absent means greedy decoding.
    pub temperature: Option<f64>,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            seed: 5,
            hook: default_hook(),
            latent: None,
            alpha: 1.0,
            zmax_fixed: None,
            positions: PositionScope::All,
            splice: SpliceMode::ErrorPreserving,
            n_prompts: 20,
            context_len: 16,
            slot: Slot::None,
            alpha_grid: vec![0.01, 0.1, 0.5, 1.0, 2.0, 5.0],
            max_new_tokens: 2,
            temperature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seed: u64,
    pub hooks: Vec<String>,
    /// Latents to zero; empty means rank 1 of `ranking.csv`.
    pub latents: Vec<usize>,
    pub splice: SpliceMode,
    pub n_prompts: usize,
    pub context_len: usize,
    pub slot: Slot,
    pub fldd_epsilon: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seed: 6,
            hooks: vec![default_hook()],
            latents: Vec::new(),
            splice: SpliceMode::ErrorPreserving,
            n_prompts: 50,
            context_len: 16,
            slot: Slot::GroupB,
            fldd_epsilon: latentscope::audit::FLDD_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectConfig {
    pub seed: u64,
    pub hook: String,
    /// Latents to score; empty means every latent of the SAE.
    pub latents: Vec<usize>,
    pub n_inputs: usize,
    pub context_len: usize,
    pub slot: Slot,
}

impl Default for EffectConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            hook: default_hook(),
            latents: Vec::new(),
            n_inputs: 20,
            context_len: 8,
            slot: Slot::GroupB,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Prompt text, encoded with the run vocabulary.
    pub prompt: String,
    pub n_samples: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            prompt: "w0 w1 w2 w3 cond_0".into(),
            n_samples: 50,
            temperature: 1.0,
            max_new_tokens: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Seeds pair sampling; generation sampling uses `seed + 1`.
    pub seed: u64,
    pub task: String,
    pub condition: String,
    pub hook: String,
    /// Latents to ablate; empty means the top `top_latents` rows of `ranking.csv`.
    pub latents: Vec<usize>,
    pub top_latents: usize,
    pub n_pairs: usize,
    pub context_len: usize,
    pub anti_bias_text: String,
    pub splice: SpliceMode,
    pub fldd_epsilon: f64,
    pub generation: Option<GenerationConfig>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            seed: 8,
            task: "planted-bias".into(),
            condition: "cond_0".into(),
            hook: default_hook(),
            latents: Vec::new(),
            top_latents: 1,
            n_pairs: 100,
            context_len: 16,
            anti_bias_text: ANTI_BIAS_QUESTION.into(),
            splice: SpliceMode::ErrorPreserving,
            fldd_epsilon: latentscope::audit::FLDD_EPSILON,
            generation: None,
        }
    }
}
