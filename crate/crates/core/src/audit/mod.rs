// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bias metrics and the audit pipeline: logit differences, counterfactual
//! deltas with a paired t-test, FLDD, positive rates, perplexity,
//! generation-rate audits and term scanning.

pub mod float_text;
pub mod stats;
pub mod svg;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{counterfactual_pair, NoteRecord, VocabLayout};
use crate::error::{Error, Result};
use crate::intervene::{latent_effect, AblationSpec, AblationTransform, EffectResult, Metric, SteerSpec, SteeringTransform};
use crate::runtime::{log_softmax_at, Edit, LogitMatrix, Model, SamplerConfig, TokenSequence};
use crate::sae::SaeModel;

pub use stats::{paired_t_test, Degeneracy, TTest};

/// The two answer tokens a logit difference compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerTokens {
    pub yes: u32,
    pub no: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitDiff {
    pub value: f64,
    pub yes_token: u32,
    pub no_token: u32,
}

/// `logits[yes] − logits[no]` for one logit vector.
pub fn logitdiff(logits: &[f64], yes: u32, no: u32) -> Result<f64> {
    let get = |t: u32| {
        logits.get(t as usize).copied().ok_or(Error::UnknownToken {
            id: t,
            vocab_size: logits.len(),
        })
    };
    Ok(get(yes)? - get(no)?)
}

impl LogitDiff {
    /// Logit difference at the final position of a logit matrix.
    pub fn at_final(logits: &LogitMatrix, answer: AnswerTokens) -> Result<Self> {
        let last = logits
            .rows()
            .checked_sub(1)
            .ok_or_else(|| Error::InvalidInput("empty logits".into()))?;
        Ok(Self {
            value: logitdiff(logits.row(last), answer.yes, answer.no)?,
            yes_token: answer.yes,
            no_token: answer.no,
        })
    }
}

/// An optional SAE intervention applied while scoring or generating.
#[derive(Clone, Copy)]
pub enum Intervention<'a> {
    None,
    Ablate { sae: &'a SaeModel, spec: &'a AblationSpec },
    Steer { sae: &'a SaeModel, spec: &'a SteerSpec },
}

impl Intervention<'_> {
    pub fn logits(&self, model: &Model, tokens: &TokenSequence) -> Result<LogitMatrix> {
        match *self {
            Self::None => model.forward(tokens),
            Self::Ablate { sae, spec } => crate::intervene::zero_ablate(model, sae, tokens, spec),
            Self::Steer { sae, spec } => crate::intervene::apply_steering(model, sae, tokens, spec),
        }
    }

    pub fn generate(&self, model: &Model, prompt: &TokenSequence, sampler: &SamplerConfig) -> Result<TokenSequence> {
        match *self {
            Self::None => model.generate(prompt, sampler, &[]),
            Self::Ablate { sae, spec } => {
                spec.validate(model, sae)?;
                let t = AblationTransform::new(sae, &spec.latent_ids, spec.splice);
                let edits: Vec<Edit<'_>> = spec.hooks.iter().map(|&h| Edit::new(h, &t)).collect();
                model.generate(prompt, sampler, &edits)
            }
            Self::Steer { sae, spec } => {
                let t = SteeringTransform::new(sae, spec, Some(prompt.len()))?;
                model.generate(prompt, sampler, &[Edit::new(spec.hook, &t)])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub logitdiff_b: f64,
    pub logitdiff_a: f64,
    pub delta: f64,
}

/// Per-pair logit-difference gaps and their paired t-test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub per_pair: Vec<PairRow>,
    pub mean: f64,
    pub test: TTest,
}

impl PairedDelta {
    /// Summarize precomputed `(logitdiff_b, logitdiff_a)` pairs.
    pub fn from_logitdiffs(pairs: &[(f64, f64)]) -> Result<Self> {
        let per_pair: Vec<PairRow> = pairs
            .iter()
            .map(|&(b, a)| PairRow {
                logitdiff_b: b,
                logitdiff_a: a,
                delta: b - a,
            })
            .collect();
        let deltas: Vec<f64> = per_pair.iter().map(|r| r.delta).collect();
        if deltas.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("paired delta"));
        }
        let test = paired_t_test(&deltas).ok_or_else(|| Error::InvalidInput("no pairs to compare".into()))?;
        Ok(Self {
            per_pair,
            mean: test.mean,
            test,
        })
    }

    #[must_use]
    pub fn t_stat(&self) -> Option<f64> {
        self.test.t_stat
    }

    #[must_use]
    pub fn p_value(&self) -> Option<f64> {
        self.test.p_value
    }
}

/// `Δ_i = logitdiff(b_i) − logitdiff(a_i)` over counterfactual pairs `(b_i, a_i)`.
pub fn delta_logitdiff(
    model: &Model,
    pairs: &[(TokenSequence, TokenSequence)],
    answer: AnswerTokens,
    intervention: Intervention<'_>,
) -> Result<PairedDelta> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("delta_logitdiff needs at least one pair".into()));
    }
    let lds: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(b, a)| {
            let lb = LogitDiff::at_final(&intervention.logits(model, b)?, answer)?.value;
            let la = LogitDiff::at_final(&intervention.logits(model, a)?, answer)?.value;
            Ok((lb, la))
        })
        .collect::<Result<_>>()?;
    PairedDelta::from_logitdiffs(&lds)
}

pub const FLDD_EPSILON: f64 = 1e-9;

/// `1 − ablated / clean`; undefined when `|clean| ≤ eps`.
pub fn fldd(clean: f64, ablated: f64, eps: f64) -> Result<f64> {
    if clean.is_nan() || clean.abs() <= eps {
        return Err(Error::InvalidInput(format!("clean logitdiff {clean} within {eps} of zero")));
    }
    Ok(1.0 - ablated / clean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlddRow {
    pub doc_id: u64,
    pub version: String,
    pub clean: f64,
    pub ablated: f64,
    pub fldd: Option<f64>,
}

/// Mean FLDD over inputs with a usable clean logitdiff, plus the exclusion count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlddSummary {
    pub rows: Vec<FlddRow>,
    pub mean: Option<f64>,
    pub n_used: usize,
    pub n_excluded: usize,
    pub epsilon: f64,
}

impl FlddSummary {
    #[must_use]
    pub fn from_rows(mut rows: Vec<FlddRow>, eps: f64) -> Self {
        for r in &mut rows {
            r.fldd = fldd(r.clean, r.ablated, eps).ok();
        }
        let used: Vec<f64> = rows.iter().filter_map(|r| r.fldd).collect();
        let mean = (!used.is_empty()).then(|| used.iter().sum::<f64>() / used.len() as f64);
        Self {
            n_used: used.len(),
            n_excluded: rows.len() - used.len(),
            rows,
            mean,
            epsilon: eps,
        }
    }
}

/// Fraction of generations whose first token is `positive`.
pub fn positive_rate_tokens(generations: &[TokenSequence], positive: u32) -> Result<f64> {
    if generations.is_empty() {
        return Err(Error::InvalidInput("positive_rate needs at least one generation".into()));
    }
    let hits = generations.iter().filter(|g| g.ids().first() == Some(&positive)).count();
    Ok(hits as f64 / generations.len() as f64)
}

/// Fraction of texts whose first word equals `pattern`, ignoring case and
/// surrounding punctuation.
pub fn positive_rate_texts(texts: &[String], pattern: &str) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::InvalidInput("positive_rate needs at least one generation".into()));
    }
    let want = pattern.trim().to_lowercase();
    let hits = texts
        .iter()
        .filter(|t| {
            t.split_whitespace()
                .next()
                .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase() == want)
                .unwrap_or(false)
        })
        .count();
    Ok(hits as f64 / texts.len() as f64)
}

/// `exp` of the mean negative log-likelihood of tokens `2..=n` under `scorer`.
pub fn perplexity(scorer: &Model, tokens: &TokenSequence) -> Result<f64> {
    perplexity_of_continuation(scorer, tokens, 1)
}

/// Perplexity of `tokens[start..]`, each conditioned on everything before it.
pub fn perplexity_of_continuation(scorer: &Model, tokens: &TokenSequence, start: usize) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InvalidInput("perplexity needs at least two tokens".into()));
    }
    if start == 0 || start >= tokens.len() {
        return Err(Error::InvalidInput(format!(
            "continuation start {start} outside 1..{}",
            tokens.len()
        )));
    }
    let logits = scorer.forward(tokens)?;
    let ids = tokens.ids();
    let nll: f64 = (start..ids.len())
        .map(|i| -log_softmax_at(logits.row(i - 1), ids[i] as usize))
        .sum();
    let ppl = (nll / (ids.len() - start) as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite("perplexity"));
    }
    Ok(ppl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRates {
    pub n_samples: usize,
    /// Group name → fraction of samples whose first marker belongs to that group.
    pub fractions: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub unclassified: usize,
}

/// Sample `n_samples` continuations and classify each by the first group
/// marker it contains. Sample `i` uses a seed drawn from `sampler.seed`.
pub fn generation_rate_audit(
    model: &Model,
    intervention: Intervention<'_>,
    prompt: &TokenSequence,
    sampler: &SamplerConfig,
    n_samples: usize,
    groups: &BTreeMap<String, Vec<u32>>,
) -> Result<GenerationRates> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be >= 1".into()));
    }
    let mut owner: BTreeMap<u32, &str> = BTreeMap::new();
    for (name, ids) in groups {
        for &id in ids {
            if let Some(prev) = owner.insert(id, name) {
                return Err(Error::InvalidInput(format!(
                    "marker {id} belongs to both `{prev}` and `{name}`"
                )));
            }
        }
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(sampler.seed);
    let seeds: Vec<u64> = (0..n_samples).map(|_| seeder.random()).collect();
    let classes: Vec<Option<&str>> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SamplerConfig { seed, ..*sampler };
            let gen = intervention.generate(model, prompt, &cfg)?;
            Ok(gen.ids().iter().find_map(|t| owner.get(t).copied()))
        })
        .collect::<Result<_>>()?;
    let mut counts: BTreeMap<String, usize> = groups.keys().map(|k| (k.clone(), 0)).collect();
    let mut unclassified = 0;
    for c in classes {
        match c {
            Some(name) => *counts.get_mut(name).expect("group registered") += 1,
            None => unclassified += 1,
        }
    }
    let fractions = counts.iter().map(|(k, &c)| (k.clone(), c as f64 / n_samples as f64)).collect();
    Ok(GenerationRates {
        n_samples,
        fractions,
        counts,
        unclassified,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermScan {
    pub fraction_containing: f64,
    pub flags: Vec<bool>,
}

/// Case-insensitive substring scan for any of `terms`.
pub fn term_scan(texts: &[String], terms: &[String]) -> Result<TermScan> {
    if terms.is_empty() {
        return Err(Error::InvalidInput("term_scan needs at least one term".into()));
    }
    let terms: Vec<String> = terms.iter().map(|t| t.to_lowercase()).collect();
    let flags: Vec<bool> = texts
        .iter()
        .map(|t| {
            let t = t.to_lowercase();
            terms.iter().any(|term| t.contains(term.as_str()))
        })
        .collect();
    let hits = flags.iter().filter(|&&f| f).count();
    let fraction_containing = if texts.is_empty() { 0.0 } else { hits as f64 / texts.len() as f64 };
    Ok(TermScan {
        fraction_containing,
        flags,
    })
}

/// One counterfactual audit item: a note context followed by a demographic slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditPair {
    pub doc_id: u64,
    pub context: Vec<u32>,
    pub marker_a: u32,
    pub marker_b: u32,
}

impl AuditPair {
    /// `(B version, A version)` of `context ++ suffix ++ [marker]`.
    pub fn render(&self, suffix: &[u32], layout: &VocabLayout) -> Result<(TokenSequence, TokenSequence)> {
        let mut tokens = self.context.clone();
        tokens.extend_from_slice(suffix);
        tokens.push(self.marker_a);
        let position = tokens.len() - 1;
        let note = NoteRecord {
            doc_id: self.doc_id,
            tokens: TokenSequence(tokens),
            group: crate::corpus::Group::A,
            condition: false,
            marker_position: Some(position),
        };
        let (a, b) = counterfactual_pair(&note, position, self.marker_a, self.marker_b, layout)?;
        Ok((b.tokens, a.tokens))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub n_pairs: usize,
    /// Leading note tokens kept as context; group markers inside it are left as is.
    pub context_len: usize,
    pub seed: u64,
}

/// Draw `n_pairs` notes and, for each, an A marker and a B marker chosen
/// independently and uniformly from their classes.
pub fn build_pairs(records: &[NoteRecord], layout: &VocabLayout, spec: &PairSpec) -> Result<Vec<AuditPair>> {
    layout.validate()?;
    if spec.n_pairs == 0 || spec.n_pairs > records.len() {
        return Err(Error::InvalidConfig(format!(
            "n_pairs must be in 1..={}, got {}",
            records.len(),
            spec.n_pairs
        )));
    }
    if spec.context_len == 0 {
        return Err(Error::InvalidConfig("context_len must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(spec.n_pairs);
    order.sort_by_key(|&i| records[i].doc_id);
    Ok(order
        .into_iter()
        .map(|i| {
            let r = &records[i];
            let n = spec.context_len.min(r.tokens.len());
            AuditPair {
                doc_id: r.doc_id,
                context: r.tokens.ids()[..n].to_vec(),
                marker_a: layout.group_a[rng.random_range(0..layout.group_a.len())],
                marker_b: layout.group_b[rng.random_range(0..layout.group_b.len())],
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationAuditSpec {
    pub prompt: TokenSequence,
    pub sampler: SamplerConfig,
    pub n_samples: usize,
    pub groups: BTreeMap<String, Vec<u32>>,
}

/// Everything an audit run needs, already loaded.
pub struct AuditTask<'a> {
    pub name: String,
    pub condition: String,
    pub model: &'a Model,
    pub model_id: String,
    pub sae: &'a SaeModel,
    pub sae_id: String,
    pub layout: VocabLayout,
    pub pairs: Vec<AuditPair>,
    pub anti_bias_suffix: Vec<u32>,
    pub anti_bias_text: String,
    pub answer: AnswerTokens,
    pub ablation: AblationSpec,
    pub fldd_epsilon: f64,
    pub generation: Option<GenerationAuditSpec>,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub delta: PairedDelta,
    /// Fraction of B-version inputs whose top final-position token is `yes`.
    pub positive_rate_b: f64,
    pub positive_rate_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationComparison {
    pub before: GenerationRates,
    pub after_ablation: GenerationRates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub task: String,
    pub condition: String,
    pub model_id: String,
    pub sae_id: String,
    pub tool_version: String,
    pub answer: AnswerTokens,
    pub anti_bias_text: String,
    pub intervention: AblationSpec,
    pub n_pairs: usize,
    pub arms: Vec<ArmResult>,
    pub abs_mean_reduction: Option<f64>,
    pub fldd: FlddSummary,
    pub effects: EffectResult,
    pub generation: Option<GenerationComparison>,
    pub seeds: BTreeMap<String, u64>,
    pub degeneracy_flags: Vec<String>,
    pub reference_magnitudes: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

pub const ARM_BEFORE: &str = "before";
pub const ARM_ANTI_BIAS: &str = "anti_bias_prompt";
pub const ARM_ABLATION: &str = "sae_ablation";

fn run_arm(
    task: &AuditTask<'_>,
    arm: &str,
    suffix: &[u32],
    intervention: Intervention<'_>,
) -> Result<(ArmResult, Vec<(f64, f64)>)> {
    let rendered: Vec<(TokenSequence, TokenSequence)> = task
        .pairs
        .iter()
        .map(|p| p.render(suffix, &task.layout))
        .collect::<Result<_>>()?;
    let rows: Vec<((f64, f64), (bool, bool))> = rendered
        .par_iter()
        .map(|(b, a)| {
            let lb = intervention.logits(task.model, b)?;
            let la = intervention.logits(task.model, a)?;
            let top = |l: &LogitMatrix| crate::runtime::argmax(l.row(l.rows() - 1)) as u32 == task.answer.yes;
            Ok((
                (LogitDiff::at_final(&lb, task.answer)?.value, LogitDiff::at_final(&la, task.answer)?.value),
                (top(&lb), top(&la)),
            ))
        })
        .collect::<Result<_>>()?;
    let lds: Vec<(f64, f64)> = rows.iter().map(|r| r.0).collect();
    let n = rows.len() as f64;
    let result = ArmResult {
        arm: arm.to_string(),
        delta: PairedDelta::from_logitdiffs(&lds)?,
        positive_rate_b: rows.iter().filter(|r| r.1 .0).count() as f64 / n,
        positive_rate_a: rows.iter().filter(|r| r.1 .1).count() as f64 / n,
    };
    Ok((result, lds))
}

/// Run the three arms (before, anti-bias prompt, SAE ablation), FLDD, the
/// per-latent effect table and the optional generation-rate comparison.
pub fn run_audit(task: &AuditTask<'_>) -> Result<AuditReport> {
    if task.pairs.is_empty() {
        return Err(Error::InvalidConfig("audit needs at least one pair".into()).in_stage("setup"));
    }
    task.ablation
        .validate(task.model, task.sae)
        .map_err(|e| e.in_stage("setup"))?;
    let ablate = Intervention::Ablate {
        sae: task.sae,
        spec: &task.ablation,
    };

    let (before, clean_lds) = run_arm(task, ARM_BEFORE, &[], Intervention::None).map_err(|e| e.in_stage(ARM_BEFORE))?;
    let (baseline, _) = run_arm(task, ARM_ANTI_BIAS, &task.anti_bias_suffix, Intervention::None)
        .map_err(|e| e.in_stage(ARM_ANTI_BIAS))?;
    let (ablated, ablated_lds) = run_arm(task, ARM_ABLATION, &[], ablate).map_err(|e| e.in_stage(ARM_ABLATION))?;

    let mut fldd_rows = Vec::with_capacity(2 * task.pairs.len());
    for ((pair, clean), abl) in task.pairs.iter().zip(&clean_lds).zip(&ablated_lds) {
        for (version, c, a) in [("B", clean.0, abl.0), ("A", clean.1, abl.1)] {
            fldd_rows.push(FlddRow {
                doc_id: pair.doc_id,
                version: version.to_string(),
                clean: c,
                ablated: a,
                fldd: None,
            });
        }
    }
    let fldd = FlddSummary::from_rows(fldd_rows, task.fldd_epsilon);

    let b_inputs: Vec<TokenSequence> = task
        .pairs
        .iter()
        .map(|p| p.render(&[], &task.layout).map(|(b, _)| b))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("effect"))?;
    let latents: Vec<usize> = task.ablation.latent_ids.iter().copied().collect();
    let effects = latent_effect(
        task.model,
        task.sae,
        task.ablation.hooks[0],
        &b_inputs,
        &latents,
        Metric::LogitDiff {
            yes: task.answer.yes,
            no: task.answer.no,
        },
    )
    .map_err(|e| e.in_stage("effect"))?;

    let generation = match &task.generation {
        None => None,
        Some(g) => {
            let run = |iv| generation_rate_audit(task.model, iv, &g.prompt, &g.sampler, g.n_samples, &g.groups);
            Some(GenerationComparison {
                before: run(Intervention::None).map_err(|e| e.in_stage("generation"))?,
                after_ablation: run(ablate).map_err(|e| e.in_stage("generation"))?,
            })
        }
    };

    let arms = vec![before, baseline, ablated];
    let mut degeneracy_flags = Vec::new();
    for a in &arms {
        if let Some(d) = a.delta.test.degeneracy {
            degeneracy_flags.push(format!("{}: {}", a.arm, serde_json::to_value(d)?.as_str().unwrap_or("degenerate")));
        }
    }
    if fldd.n_used == 0 {
        degeneracy_flags.push("fldd: every clean logitdiff within epsilon of zero".into());
    }
    let abs_mean_reduction = (arms[0].delta.mean != 0.0).then(|| 1.0 - arms[2].delta.mean.abs() / arms[0].delta.mean.abs());

    let reference_magnitudes = BTreeMap::from([
        ("mean_delta_logitdiff".to_string(), "0.15 and 0.51 (large-model clinical setting)".to_string()),
        ("fldd".to_string(), "0.008".to_string()),
        ("generation_rate_before_after_ablation".to_string(), "0.88 -> 0.46".to_string()),
    ]);
    let notes = vec![
        format!("splice mode: {:?}", task.ablation.splice),
        "delta = logitdiff(B version) - logitdiff(A version); two-sided paired t-test with n-1 df".into(),
        "positive rate is answer-token classification at the final prompt position".into(),
        "fldd averaged over both versions of every pair with |clean| > epsilon".into(),
        "reference magnitudes are context only and are not reproduced at this scale".into(),
    ];

    Ok(AuditReport {
        task: task.name.clone(),
        condition: task.condition.clone(),
        model_id: task.model_id.clone(),
        sae_id: task.sae_id.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        answer: task.answer,
        anti_bias_text: task.anti_bias_text.clone(),
        intervention: task.ablation.clone(),
        n_pairs: task.pairs.len(),
        arms,
        abs_mean_reduction,
        fldd,
        effects,
        generation,
        seeds: task.seeds.clone(),
        degeneracy_flags,
        reference_magnitudes,
        notes,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AuditReport {
    #[must_use]
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    #[must_use]
    pub fn pairs_csv(&self) -> String {
        let mut s = String::from("arm,pair,logitdiff_b,logitdiff_a,delta\n");
        for a in &self.arms {
            for (i, r) in a.delta.per_pair.iter().enumerate() {
                let _ = writeln!(s, "{},{i},{},{},{}", a.arm, r.logitdiff_b, r.logitdiff_a, r.delta);
            }
        }
        s
    }

    #[must_use]
    pub fn arms_csv(&self) -> String {
        let mut s = String::from("arm,n,mean_delta,t_stat,p_value,positive_rate_b,positive_rate_a\n");
        for a in &self.arms {
            let t = a.delta.test.t_stat.map(|t| {
                if t.is_finite() {
                    t.to_string()
                } else if t > 0.0 {
                    "inf".into()
                } else {
                    "-inf".into()
                }
            });
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                a.arm,
                a.delta.test.n,
                a.delta.mean,
                t.unwrap_or_default(),
                a.delta.test.p_value.map(|p| format!("{p:e}")).unwrap_or_default(),
                a.positive_rate_b,
                a.positive_rate_a
            );
        }
        s
    }

    #[must_use]
    pub fn fldd_csv(&self) -> String {
        let mut s = String::from("doc_id,version,clean,ablated,fldd\n");
        for r in &self.fldd.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.doc_id, r.version, r.clean, r.ablated, opt(r.fldd));
        }
        s
    }

    #[must_use]
    pub fn effects_csv(&self) -> String {
        let mut buf = Vec::new();
        self.effects.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    #[must_use]
    pub fn delta_chart(&self) -> String {
        let cats: Vec<String> = self.arms.iter().map(|a| a.arm.clone()).collect();
        let series = vec![("mean delta logitdiff (B - A)".to_string(), self.arms.iter().map(|a| a.delta.mean).collect())];
        svg::grouped_bar_chart(&format!("{}: {}", self.task, self.condition), &cats, &series)
    }

    #[must_use]
    pub fn positive_rate_chart(&self) -> String {
        let cats: Vec<String> = self.arms.iter().map(|a| a.arm.clone()).collect();
        let series = vec![
            ("group B".to_string(), self.arms.iter().map(|a| a.positive_rate_b).collect()),
            ("group A".to_string(), self.arms.iter().map(|a| a.positive_rate_a).collect()),
        ];
        svg::grouped_bar_chart("positive rate by arm", &cats, &series)
    }

    #[must_use]
    pub fn effect_chart(&self) -> String {
        let cats: Vec<String> = self.effects.per_latent.iter().map(|(j, _)| format!("latent {j}")).collect();
        let series = vec![(self.effects.metric_name.clone(), self.effects.per_latent.iter().map(|(_, e)| *e).collect())];
        svg::grouped_bar_chart("per-latent effect", &cats, &series)
    }

    /// File name → contents for every report artifact.
    pub fn files(&self) -> Result<Vec<(&'static str, String)>> {
        Ok(vec![
            ("report.json", self.to_json()?),
            ("arms.csv", self.arms_csv()),
            ("pairs.csv", self.pairs_csv()),
            ("fldd.csv", self.fldd_csv()),
            ("effects.csv", self.effects_csv()),
            ("delta_chart.svg", self.delta_chart()),
            ("positive_rate_chart.svg", self.positive_rate_chart()),
            ("effect_chart.svg", self.effect_chart()),
        ])
    }

    /// Write every artifact into `dir`; returns the written paths.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.files()?
            .into_iter()
            .map(|(name, body)| {
                let p = dir.join(name);
                std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
                Ok(p)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
