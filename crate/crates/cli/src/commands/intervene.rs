// SPDX-License-Identifier: MIT OR Apache-2.0

//! steer, ablate and effect.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use anyhow::{Context, Result};
use latentscope::audit::svg::grouped_bar_chart;
use latentscope::audit::{FlddRow, FlddSummary};
use latentscope::intervene::{
    apply_steering, generate_steered, latent_effect, select_alpha, AblationMode, Metric, SteeringTransform, ZmaxPolicy,
};
use latentscope::{AblationSpec, SamplerConfig, SteerSpec, TokenSequence};
use serde_json::json;

use super::{csv_tokens, parse_hook, sample_prompts, Ctx};
use crate::config::{AblateConfig, EffectConfig, Slot, SteerConfig};
use crate::Outcome;

fn slot_name(slot: Slot) -> &'static str {
    match slot {
        Slot::None => "none",
        Slot::GroupA => "group_a",
        Slot::GroupB => "group_b",
    }
}

pub fn steer(mut ctx: Ctx<'_>) -> Result<Outcome> {
    let cfg: SteerConfig = ctx.config()?;
    let hook = parse_hook(&cfg.hook)?;
    let model = ctx.model()?;
    let sae = ctx.sae()?;
    let notes = ctx.corpus()?;
    let info = ctx.fixture()?;
    let latent_id = match cfg.latent {
        Some(j) => j,
        None => ctx.ranked_latents(1)?[0],
    };
    let spec = SteerSpec {
        hook,
        latent_id,
        alpha: cfg.alpha,
        zmax_policy: cfg.zmax_fixed.map_or(ZmaxPolicy::PerInputGlobalMax, ZmaxPolicy::FixedValue),
        splice: cfg.splice,
        positions: cfg.positions,
    };
    spec.validate(&sae).context("stage `config`")?;
    let sampler_seed = cfg.seed.wrapping_add(1);
    let sampler = match cfg.temperature {
        Some(t) => SamplerConfig::temperature(t, cfg.max_new_tokens, sampler_seed),
        None => SamplerConfig::greedy(cfg.max_new_tokens),
    };
    sampler.validate().context("stage `config`")?;
    let prompts = sample_prompts(&notes, &info.layout, cfg.n_prompts, cfg.context_len, cfg.slot, cfg.seed)
        .context("stage `prompts`")?;
    let metric = Metric::LogitDiff { yes: info.answer.yes, no: info.answer.no };

    let mut steer_csv = String::from("doc_id,tokens,z_max,logitdiff_clean,logitdiff_steered,shift\n");
    let mut gen_csv = String::from("doc_id,generation_clean,generation_steered\n");
    let mut shifts = Vec::with_capacity(prompts.len());
    for (doc_id, tokens) in &prompts {
        let acts = model.capture(tokens, hook).context("stage `steer`")?;
        let z_max = SteeringTransform::new(&sae, &spec, Some(tokens.len()))?.z_max(&acts)?;
        let clean = metric.evaluate(&model.forward(tokens)?)?;
        let steered = metric.evaluate(&apply_steering(&model, &sae, tokens, &spec).context("stage `steer`")?)?;
        shifts.push(steered - clean);
        let _ = writeln!(steer_csv, "{doc_id},{},{z_max},{clean},{steered},{}", csv_tokens(tokens), steered - clean);
        let g_clean = model.generate(tokens, &sampler, &[]).context("stage `generate`")?;
        let g_steer = generate_steered(&model, &sae, tokens, &spec, &sampler).context("stage `generate`")?;
        let _ = writeln!(gen_csv, "{doc_id},{},{}", csv_tokens(&g_clean), csv_tokens(&g_steer));
    }
    ctx.outputs.add("steer.csv", steer_csv);
    ctx.outputs.add("generations.csv", gen_csv);

    let selection = if cfg.alpha_grid.is_empty() {
        None
    } else {
        let inputs: Vec<TokenSequence> = prompts.iter().map(|(_, t)| t.clone()).collect();
        let sel = select_alpha(&model, &sae, &inputs, &spec, &cfg.alpha_grid, &model, info.answer.yes, &sampler)
            .context("stage `alpha`")?;
        let mut csv = String::from("alpha,positive_rate,perplexity,ratio\n");
        for i in 0..sel.grid.len() {
            let _ = writeln!(csv, "{},{},{},{}", sel.grid[i], sel.positive_rate[i], sel.perplexity[i], sel.ratio[i]);
        }
        ctx.outputs.add("alpha_selection.csv", csv);
        Some(sel)
    };
    let mean_shift = shifts.iter().sum::<f64>() / shifts.len() as f64;
    ctx.outputs.add_json(
        "steer_report.json",
        &json!({
            "spec": spec,
            "metric": metric.name(),
            "slot": slot_name(cfg.slot),
            "n_prompts": prompts.len(),
            "mean_shift": mean_shift,
            "sampler": sampler,
            "alpha_selection": selection,
        }),
    )?;
    let seeds = json!({ "prompts": cfg.seed, "sampler": sampler_seed });
    ctx.finish(&cfg, seeds, Vec::new())
}

pub fn ablate(mut ctx: Ctx<'_>) -> Result<Outcome> {
    let cfg: AblateConfig = ctx.config()?;
    let hooks = cfg.hooks.iter().map(|h| parse_hook(h)).collect::<Result<Vec<_>>>()?;
    let model = ctx.model()?;
    let sae = ctx.sae()?;
    let notes = ctx.corpus()?;
    let info = ctx.fixture()?;
    let latent_ids: BTreeSet<usize> = if cfg.latents.is_empty() {
        ctx.ranked_latents(1)?.into_iter().collect()
    } else {
        cfg.latents.iter().copied().collect()
    };
    let spec = AblationSpec { hooks, latent_ids, mode: AblationMode::Zero, splice: cfg.splice };
    spec.validate(&model, &sae).context("stage `config`")?;
    let prompts = sample_prompts(&notes, &info.layout, cfg.n_prompts, cfg.context_len, cfg.slot, cfg.seed)
        .context("stage `prompts`")?;
    let metric = Metric::LogitDiff { yes: info.answer.yes, no: info.answer.no };

    let mut rows = Vec::with_capacity(prompts.len());
    let mut token_text = Vec::with_capacity(prompts.len());
    for (doc_id, tokens) in &prompts {
        let clean = metric.evaluate(&model.forward(tokens)?)?;
        let ablated = metric.evaluate(&latentscope::intervene::zero_ablate(&model, &sae, tokens, &spec).context("stage `ablate`")?)?;
        rows.push(FlddRow { doc_id: *doc_id, version: slot_name(cfg.slot).into(), clean, ablated, fldd: None });
        token_text.push(csv_tokens(tokens));
    }
    let summary = FlddSummary::from_rows(rows, cfg.fldd_epsilon);
    let mut csv = String::from("doc_id,tokens,logitdiff_clean,logitdiff_ablated,delta,fldd\n");
    for (r, toks) in summary.rows.iter().zip(&token_text) {
        let f = r.fldd.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(csv, "{},{toks},{},{},{},{f}", r.doc_id, r.clean, r.ablated, r.ablated - r.clean);
    }
    ctx.outputs.add("ablate.csv", csv);
    let mut flags = Vec::new();
    if summary.n_used == 0 {
        flags.push(format!("fldd: every clean logit difference within {} of zero", summary.epsilon));
    }
    ctx.outputs.add_json(
        "ablate_report.json",
        &json!({
            "spec": spec,
            "metric": metric.name(),
            "slot": slot_name(cfg.slot),
            "n_prompts": prompts.len(),
            "mean_clean": summary.rows.iter().map(|r| r.clean).sum::<f64>() / summary.rows.len() as f64,
            "mean_ablated": summary.rows.iter().map(|r| r.ablated).sum::<f64>() / summary.rows.len() as f64,
            "fldd_mean": summary.mean,
            "fldd_n_used": summary.n_used,
            "fldd_n_excluded": summary.n_excluded,
            "fldd_epsilon": summary.epsilon,
            "degeneracy_flags": flags,
        }),
    )?;
    let seeds = json!({ "prompts": cfg.seed });
    ctx.finish(&cfg, seeds, flags)
}

pub fn effect(mut ctx: Ctx<'_>) -> Result<Outcome> {
    let cfg: EffectConfig = ctx.config()?;
    let hook = parse_hook(&cfg.hook)?;
    let model = ctx.model()?;
    let sae = ctx.sae()?;
    let notes = ctx.corpus()?;
    let info = ctx.fixture()?;
    let latents: Vec<usize> = if cfg.latents.is_empty() { (0..sae.width()).collect() } else { cfg.latents.clone() };
    let inputs = sample_prompts(&notes, &info.layout, cfg.n_inputs, cfg.context_len, cfg.slot, cfg.seed)
        .context("stage `inputs`")?;
    let dataset: Vec<TokenSequence> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let metric = Metric::LogitDiff { yes: info.answer.yes, no: info.answer.no };
    let result = latent_effect(&model, &sae, hook, &dataset, &latents, metric).context("stage `effect`")?;

    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    ctx.outputs.add("latent_effects.csv", csv);
    let categories: Vec<String> = result.per_latent.iter().map(|(j, _)| format!("latent {j}")).collect();
    let values: Vec<f64> = result.per_latent.iter().map(|(_, e)| *e).collect();
    ctx.outputs.add(
        "latent_effects.svg",
        grouped_bar_chart(&format!("Latent effect on {} at {hook}", metric.name()), &categories, &[("E".into(), values)]),
    );
    let mut ranked = result.per_latent.clone();
    ranked.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    ctx.outputs.add_json(
        "effect_report.json",
        &json!({
            "hook": hook.to_string(),
            "metric": metric,
            "metric_name": result.metric_name,
            "dataset_size": result.dataset_size,
            "slot": slot_name(cfg.slot),
            "ranked_by_magnitude": ranked.iter().map(|(j, e)| json!({ "latent": j, "effect": e })).collect::<Vec<_>>(),
        }),
    )?;
    ctx.outputs.add_json(
        "effect_inputs.json",
        &inputs.iter().map(|(id, t)| json!({ "doc_id": id, "tokens": t.ids() })).collect::<Vec<_>>(),
    )?;
    let seeds = json!({ "inputs": cfg.seed });
    ctx.finish(&cfg, seeds, Vec::new())
}
