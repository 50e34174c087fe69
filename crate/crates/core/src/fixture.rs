// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted demographic fixture: a vocabulary with group markers and condition
//! tokens, and a planted model in which group-A markers and condition tokens
//! carry a group-A concept, group-B markers carry a group-B concept, and the
//! group-B concept can be coupled to the `yes` answer.
//!
//! Every marker shares its non-concept embedding with a filler token, so a
//! pair of notes that differ only in a marker differ only along the concept
//! subspace at that position.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audit::AnswerTokens;
use crate::corpus::{VocabLayout, Vocabulary};
use crate::error::{Error, Result};
use crate::runtime::{
    build_planted_model, AnswerCoupling, Model, ModelConfig, PlantedModelSpec, Precision, TokenInjection,
};
use crate::tensor::{dot, norm};

pub const GROUP_A_CONCEPT: &str = "group_a";
pub const GROUP_B_CONCEPT: &str = "group_b";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub n_fillers: usize,
    pub n_markers: usize,
    pub n_conditions: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq: usize,
    /// Concept magnitude written by each group marker.
    pub marker_magnitude: f64,
    /// Group-A concept magnitude written by each condition token.
    pub condition_magnitude: f64,
    /// Coupling of the group-B concept to the `yes` answer; 0 for a null fixture.
    pub bias_strength: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_fillers: 24,
            n_markers: 4,
            n_conditions: 4,
            d_model: 24,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 48,
            max_seq: 48,
            marker_magnitude: 6.0,
            condition_magnitude: 4.0,
            bias_strength: 1.0,
            seed: 7,
        }
    }
}

pub struct Fixture {
    pub vocab: Vocabulary,
    pub layout: VocabLayout,
    pub planted: PlantedModelSpec,
    pub model: Model,
    pub answer: AnswerTokens,
}

impl Fixture {
    #[must_use]
    pub fn direction(&self, concept: &str) -> &[f64] {
        &self.planted.concept_directions[concept]
    }
}

/// Two orthonormal random directions in `R^d`.
fn concept_pair(d: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let mut draw = || -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut a = draw();
    let na = norm(&a);
    a.iter_mut().for_each(|x| *x /= na);
    let mut b = draw();
    let c = dot(&a, &b);
    b.iter_mut().zip(&a).for_each(|(x, y)| *x -= c * y);
    let nb = norm(&b);
    b.iter_mut().for_each(|x| *x /= nb);
    (a, b)
}

pub fn build_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    if spec.n_fillers < spec.n_markers + spec.n_conditions {
        return Err(Error::InvalidConfig(
            "n_fillers must cover one base filler per marker and per condition token".into(),
        ));
    }
    let (vocab, layout) = Vocabulary::standard(spec.n_fillers, spec.n_markers, spec.n_conditions, &[])?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        d_model: spec.d_model,
        n_layers: spec.n_layers,
        n_heads: spec.n_heads,
        d_mlp: spec.d_mlp,
        max_seq: spec.max_seq,
        numeric_precision: Precision::Fp64,
    };
    let (u_a, u_b) = concept_pair(spec.d_model, spec.seed);
    let mut planted = PlantedModelSpec {
        concept_directions: BTreeMap::from([(GROUP_A_CONCEPT.to_string(), u_a), (GROUP_B_CONCEPT.to_string(), u_b)]),
        ..PlantedModelSpec::default()
    };
    let inject = |concept: &str, magnitude: f64, base: u32| TokenInjection {
        concept: concept.to_string(),
        magnitude,
        base_token: Some(base),
    };
    for i in 0..spec.n_markers {
        let base = layout.fillers[i];
        planted
            .token_injections
            .insert(layout.group_a[i], inject(GROUP_A_CONCEPT, spec.marker_magnitude, base));
        planted
            .token_injections
            .insert(layout.group_b[i], inject(GROUP_B_CONCEPT, spec.marker_magnitude, base));
    }
    for (i, &c) in layout.conditions.iter().enumerate() {
        let base = layout.fillers[spec.n_markers + i];
        planted
            .token_injections
            .insert(c, inject(GROUP_A_CONCEPT, spec.condition_magnitude, base));
    }
    let answer = AnswerTokens {
        yes: vocab.id("yes").expect("standard vocabulary has yes"),
        no: vocab.id("no").expect("standard vocabulary has no"),
    };
    if spec.bias_strength != 0.0 {
        planted.answer_couplings.push(AnswerCoupling {
            concept: GROUP_B_CONCEPT.to_string(),
            answer_token: answer.yes,
            strength: spec.bias_strength,
        });
    }
    let model = build_planted_model(&config, &planted, spec.seed)?;
    Ok(Fixture {
        vocab,
        layout,
        planted,
        model,
        answer,
    })
}
