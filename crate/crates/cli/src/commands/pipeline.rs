// SPDX-License-Identifier: MIT OR Apache-2.0

//! gen-corpus, train-sae, probe and interp.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{Context, Result};
use latentscope::corpus::{generate_corpus, phi_coefficient, split, write_corpus, SplitSpec};
use latentscope::fixture::build_fixture;
use latentscope::interp::{
    build_eval_set, collect_activations, keyword_judge, records_csv, score_description, top_activating,
    write_catalog, DetectionEvalSet, Judge, LatentDescription, RandomJudge,
};
use latentscope::probe::{auroc, build_feature_matrix, fit_probe, select_lambda, top_latents, write_ranking_csv, accuracy};
use latentscope::sae::{activation_dataset, reconstruction_r2, train, SaeTrainConfig};
use latentscope::tensor::cosine;
use latentscope::{CorpusSpec, Group, NoteRecord, SaeModel};
use serde::Serialize;
use serde_json::json;

use super::{parse_hook, Ctx, FixtureInfo, CORPUS_FILE, FIXTURE_FILE, MODEL_FILE, RANKING_FILE, SAE_FILE, VOCAB_FILE};
use crate::config::{GenCorpusConfig, InterpConfig, ProbeConfig, TrainSaeConfig};
use crate::Outcome;

pub fn gen_corpus(mut ctx: Ctx<'_>) -> Result<Outcome> {
    let cfg: GenCorpusConfig = ctx.config()?;
    let fixture = build_fixture(&cfg.fixture).context("stage `fixture`")?;
    let model = match ctx.common.precision {
        Some(p) => fixture.model.clone().with_precision(p.into()),
        None => fixture.model.clone(),
    };
    let spec = CorpusSpec {
        n_docs: cfg.n_docs,
        doc_length_min: cfg.doc_length_min,
        doc_length_max: cfg.doc_length_max,
        layout: fixture.layout.clone(),
        marker_rate: cfg.marker_rate,
        correlation: cfg.correlation,
        condition_rate: cfg.condition_rate,
        seed: cfg.seed,
    };
    let notes = generate_corpus(&spec).context("stage `corpus`")?;

    let mut corpus = Vec::new();
    write_corpus(&notes, &mut corpus)?;
    ctx.outputs.add(CORPUS_FILE, corpus);
    ctx.outputs.add(VOCAB_FILE, fixture.vocab.to_json()?);
    ctx.outputs.add(MODEL_FILE, model.to_container().to_bytes());
    let info = FixtureInfo {
        spec: cfg.fixture.clone(),
        layout: fixture.layout.clone(),
        answer: fixture.answer,
        concept_directions: fixture.planted.concept_directions.clone(),
    };
    ctx.outputs.add_json(FIXTURE_FILE, &info)?;
    let n = notes.len() as f64;
    ctx.outputs.add_json(
        "corpus_summary.json",
        &json!({
            "n_docs": notes.len(),
            "group_a": notes.iter().filter(|r| r.group == Group::A).count(),
            "group_b": notes.iter().filter(|r| r.group == Group::B).count(),
            "condition_present": notes.iter().filter(|r| r.condition).count(),
            "marker_fraction": notes.iter().filter(|r| r.marker_position.is_some()).count() as f64 / n,
            "phi": phi_coefficient(&notes),
        }),
    )?;
    let seeds = json!({ "corpus": cfg.seed, "model": cfg.fixture.seed });
    ctx.finish(&cfg, seeds, Vec::new())
}

fn doc_tokens(notes: &[NoteRecord]) -> Vec<(u64, latentscope::TokenSequence)> {
    notes.iter().map(|n| (n.doc_id, n.tokens.clone())).collect()
}

#[derive(Serialize)]
struct ConceptAlignment {
    latent: usize,
    cosine: f64,
}

fn concept_alignment(sae: &SaeModel, info: &FixtureInfo) -> BTreeMap<String, ConceptAlignment> {
    info.concept_directions
        .iter()
        .map(|(name, u)| {
            let (latent, cosine) = (0..sae.width())
                .map(|j| (j, cosine(&sae.decoder_column(j), u)))
                .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
            (name.clone(), ConceptAlignment { latent, cosine })
        })
        .collect()
}

pub fn train_sae(mut ctx: Ctx<'_>) -> Result<Outcome> {
    let cfg: TrainSaeConfig = ctx.config()?;
    let hook = parse_hook(&cfg.hook)?;
    let model = ctx.model()?;
    let notes = ctx.corpus()?;
    let info = ctx.fixture()?;
    let tokens: Vec<_> = notes.iter().map(|n| n.tokens.clone()).collect();
    let data = activation_dataset(&model, hook, &tokens).context("stage `activations`")?;
    let train_cfg = SaeTrainConfig {
        sparsity_weight: cfg.sparsity_weight,
        learning_rate: cfg.learning_rate,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let (sae, stats) = train(&train_cfg, cfg.width, &data).context("stage `train`")?;
    let r2 = reconstruction_r2(&sae, &data)?;

    ctx.outputs.add(SAE_FILE, sae.to_container().to_bytes());
    let mut curve = String::from("step,minibatch_mse\n");
    for (i, m) in stats.mse_curve.iter().enumerate() {
        let _ = writeln!(curve, "{i},{m}");
    }
    ctx.outputs.add("sae_training.csv", curve);
    ctx.outputs.add_json(
        "sae_stats.json",
        &json!({
            "hook": hook.to_string(),
            "n_rows": data.rows(),
            "width": cfg.width,
            "reconstruction_r2": r2,
            "final_mse": stats.final_mse,
            "mean_l0": stats.mean_l0,
            "dead_latents": stats.dead_latents,
            "concept_alignment": concept_alignment(&sae, &info),
        }),
    )?;
    let seeds = json!({ "sae": cfg.seed });
    ctx.finish(&cfg, seeds, Vec::new())
}

pub fn probe(mut ctx: Ctx<'_>) -> Result<Outcome> {
    let cfg: ProbeConfig = ctx.config()?;
    let hook = parse_hook(&cfg.hook)?;
    let model = ctx.model()?;
    let sae = ctx.sae()?;
    let notes = ctx.corpus()?;
    let info = ctx.fixture()?;

    let (train_notes, test_notes) = split(&notes, &SplitSpec { train_fraction: cfg.train_fraction, seed: cfg.seed })
        .context("stage `split`")?;
    let (fit_notes, val_notes) = split(
        &train_notes,
        &SplitSpec {
            train_fraction: 1.0 - cfg.validation_fraction,
            seed: cfg.seed.wrapping_add(1),
        },
    )
    .context("stage `split`")?;
    let labels = |ns: &[NoteRecord]| ns.iter().map(|n| n.group == cfg.positive_group).collect::<Vec<bool>>();
    let features = |ns: &[NoteRecord]| build_feature_matrix(&model, &sae, hook, &doc_tokens(ns)).context("stage `features`");
    let (f_fit, f_val, f_train, f_test) = (features(&fit_notes)?, features(&val_notes)?, features(&train_notes)?, features(&test_notes)?);
    let (y_fit, y_val, y_train, y_test) = (labels(&fit_notes), labels(&val_notes), labels(&train_notes), labels(&test_notes));

    let (_, selection) = select_lambda((&f_fit, &y_fit), (&f_val, &y_val), &cfg.lambda_grid, cfg.max_iter, cfg.tol, cfg.seed)
        .context("stage `lambda`")?;
    let probe = fit_probe(&f_train, &y_train, selection.chosen, cfg.max_iter, cfg.tol, cfg.seed).context("stage `fit`")?;
    // zero weights carry no ranking information
    let mut ranking = top_latents(&probe, probe.weights.len())?;
    ranking.retain(|(_, w)| *w != 0.0);
    ranking.truncate(cfg.top_k);
    let scores: Vec<f64> = (0..f_test.n_docs()).map(|i| probe.score(f_test.values.row(i))).collect();
    let alignment = concept_alignment(&sae, &info);
    let top: Vec<serde_json::Value> = ranking
        .iter()
        .enumerate()
        .map(|(rank, &(j, w))| {
            let single = auroc(&f_test.latent(j), &y_test).ok();
            let cos: BTreeMap<&String, f64> = info
                .concept_directions
                .iter()
                .map(|(name, u)| (name, cosine(&sae.decoder_column(j), u)))
                .collect();
            json!({ "rank": rank + 1, "latent": j, "weight": w, "test_auroc": single, "concept_cosine": cos })
        })
        .collect();

    let mut csv = Vec::new();
    write_ranking_csv(&ranking, &mut csv)?;
    ctx.outputs.add(RANKING_FILE, csv);
    ctx.outputs.add("probe.lsc", probe.to_container().to_bytes());
    ctx.outputs.add_json(
        "probe_report.json",
        &json!({
            "hook": hook.to_string(),
            "positive_group": cfg.positive_group,
            "split": {
                "train_fraction": cfg.train_fraction,
                "validation_fraction": cfg.validation_fraction,
                "n_fit": fit_notes.len(),
                "n_validation": val_notes.len(),
                "n_train": train_notes.len(),
                "n_test": test_notes.len(),
            },
            "lambda_selection": selection,
            "convergence": probe.convergence,
            "nonzero_weights": probe.weights.iter().filter(|w| **w != 0.0).count(),
            "train_accuracy": accuracy(&probe, &f_train, &y_train),
            "test_accuracy": accuracy(&probe, &f_test, &y_test),
            "test_auroc": auroc(&scores, &y_test).ok(),
            "top_latents": top,
            "concept_alignment": alignment,
        }),
    )?;
    let seeds = json!({ "split": cfg.seed, "validation_split": cfg.seed.wrapping_add(1), "probe": cfg.seed });
    ctx.finish(&cfg, seeds, Vec::new())
}

/// Fraction of each tercile's positives the judge calls activating, lowest tercile first.
fn tercile_recall(desc: &LatentDescription, set: &DetectionEvalSet, judge: &dyn Judge) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (slot, tercile) in out.iter_mut().zip(&set.terciles) {
        let hits = tercile
            .iter()
            .map(|r| judge.is_activating(&desc.text, &r.context))
            .collect::<latentscope::Result<Vec<bool>>>()?;
        *slot = hits.iter().filter(|h| **h).count() as f64 / hits.len().max(1) as f64;
    }
    Ok(out)
}

pub fn interp(mut ctx: Ctx<'_>) -> Result<Outcome> {
    let cfg: InterpConfig = ctx.config()?;
    let hook = parse_hook(&cfg.hook)?;
    let model = ctx.model()?;
    let sae = ctx.sae()?;
    let notes = ctx.corpus()?;
    let vocab = ctx.vocab()?;
    let latents = if cfg.latents.is_empty() {
        ctx.ranked_latents(cfg.top_latents)?
    } else {
        cfg.latents.clone()
    };
    let acts = collect_activations(&model, &sae, hook, &doc_tokens(&notes)).context("stage `activations`")?;

    let mut catalog = Vec::new();
    let mut summary = Vec::new();
    for &j in &latents {
        let top = top_activating(&acts, j, cfg.top_k_examples, cfg.context_radius).context("stage `top-activating`")?;
        ctx.outputs.add(format!("records_latent_{j}.csv"), records_csv(&top, Some(&vocab)));
        // keywords: the most frequent activating tokens, ties to the lower id
        let mut freq: BTreeMap<u32, usize> = BTreeMap::new();
        for r in &top {
            let centre = acts.iter().find(|d| d.doc_id == r.doc_id).map(|d| d.tokens.ids()[r.token_index]);
            if let Some(t) = centre {
                *freq.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(u32, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let keywords: Vec<u32> = ranked.iter().take(cfg.max_keywords).map(|(t, _)| *t).collect();

        let mut desc = if keywords.is_empty() {
            LatentDescription::new(j, "never active", latentscope::interp::DescriptionSource::Generated)
        } else {
            LatentDescription::from_keywords(j, &keywords, Some(&vocab))
        };
        let eval_seed = cfg.seed.wrapping_add(j as u64);
        let (keyword_score, random_score, tercile_recall) =
            match build_eval_set(&acts, j, cfg.per_tercile, eval_seed, cfg.context_radius) {
                Ok(set) if !keywords.is_empty() => {
                    let kw = keyword_judge(keywords.clone())?;
                    let k = score_description(&desc, &set, &kw, eval_seed).context("stage `score`")?;
                    let r = score_description(&desc, &set, &RandomJudge { seed: cfg.seed }, eval_seed)
                        .context("stage `score`")?;
                    (Some(k), Some(r), Some(tercile_recall(&desc, &set, &kw)?))
                }
                _ => (None, None, None),
            };
        desc.detection_score = keyword_score;
        summary.push(json!({
            "latent": j,
            "description": desc.text,
            "keywords": keywords,
            "keyword_judge_score": keyword_score,
            "random_judge_score": random_score,
            "keyword_recall_by_tercile": tercile_recall,
            "n_top_records": top.len(),
        }));
        catalog.push(desc);
    }
    let mut buf = Vec::new();
    write_catalog(&catalog, &mut buf)?;
    ctx.outputs.add("catalog.jsonl", buf);
    ctx.outputs.add_json(
        "interp_report.json",
        &json!({ "hook": hook.to_string(), "context_radius": cfg.context_radius, "latents": summary,
                 "negative_sampling": "uniform over zero-activation positions" }),
    )?;
    let seeds = json!({ "eval_sets": cfg.seed, "random_judge": cfg.seed });
    ctx.finish(&cfg, seeds, Vec::new())
}
