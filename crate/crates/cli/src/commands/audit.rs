// SPDX-License-Identifier: MIT OR Apache-2.0

//! Counterfactual bias audit.

use std::collections::{BTreeMap, BTreeSet};

use anyhow::{Context, Result};
use latentscope::audit::{build_pairs, run_audit, AuditTask, GenerationAuditSpec, PairSpec};
use latentscope::intervene::AblationMode;
use latentscope::{AblationSpec, SamplerConfig};

use super::{parse_hook, Ctx, MODEL_FILE, SAE_FILE};
use crate::config::AuditConfig;
use crate::Outcome;

fn short_digest(ctx: &Ctx<'_>, name: &str) -> String {
    ctx.inputs
        .digests()
        .iter()
        .find(|d| d.name == name)
        .map_or_else(|| name.to_string(), |d| format!("{name}@sha256:{}", &d.sha256[..16]))
}

pub fn audit(mut ctx: Ctx<'_>) -> Result<Outcome> {
    let cfg: AuditConfig = ctx.config()?;
    let hook = parse_hook(&cfg.hook)?;
    let model = ctx.model()?;
    let sae = ctx.sae()?;
    let notes = ctx.corpus()?;
    let vocab = ctx.vocab()?;
    let info = ctx.fixture()?;
    let latent_ids: BTreeSet<usize> = if cfg.latents.is_empty() {
        ctx.ranked_latents(cfg.top_latents)?.into_iter().collect()
    } else {
        cfg.latents.iter().copied().collect()
    };
    let pairs = build_pairs(&notes, &info.layout, &PairSpec { n_pairs: cfg.n_pairs, context_len: cfg.context_len, seed: cfg.seed })
        .context("stage `pairs`")?;
    let suffix = vocab.encode(&cfg.anti_bias_text).context("encoding anti_bias_text")?.0;

    let generation_seed = cfg.seed.wrapping_add(1);
    let generation = match &cfg.generation {
        None => None,
        Some(g) => Some(GenerationAuditSpec {
            prompt: vocab.encode(&g.prompt).context("encoding generation prompt")?,
            sampler: SamplerConfig::temperature(g.temperature, g.max_new_tokens, generation_seed),
            n_samples: g.n_samples,
            groups: BTreeMap::from([
                ("group_a".to_string(), info.layout.group_a.clone()),
                ("group_b".to_string(), info.layout.group_b.clone()),
            ]),
        }),
    };
    let mut seeds = BTreeMap::from([("pairs".to_string(), cfg.seed)]);
    if generation.is_some() {
        seeds.insert("generation".into(), generation_seed);
    }
    let task = AuditTask {
        name: cfg.task.clone(),
        condition: cfg.condition.clone(),
        model: &model,
        model_id: short_digest(&ctx, MODEL_FILE),
        sae: &sae,
        sae_id: short_digest(&ctx, SAE_FILE),
        layout: info.layout.clone(),
        pairs,
        anti_bias_suffix: suffix,
        anti_bias_text: cfg.anti_bias_text.clone(),
        answer: info.answer,
        ablation: AblationSpec { hooks: vec![hook], latent_ids, mode: AblationMode::Zero, splice: cfg.splice },
        fldd_epsilon: cfg.fldd_epsilon,
        generation,
        seeds: seeds.clone(),
    };
    let report = run_audit(&task)?;
    for (name, body) in report.files()? {
        ctx.outputs.add(name, body);
    }
    let flags = report.degeneracy_flags.clone();
    ctx.finish(&cfg, serde_json::to_value(&seeds)?, flags)
}
