// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal interventions routed through the SAE: steering, zero-ablation and
//! exact per-position latent effects.
//!
//! The default splice is error-preserving: per token, with `z = encode(h)`
//! and edited code `z'`, the new stream is `h + W_dec (z' − z)`, which equals
//! `decode(z') + (h − decode(z))` and leaves `h` untouched when `z' = z`.
//! [`SpliceMode::Raw`] writes `decode(z')` instead, dropping the SAE
//! reconstruction error.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{perplexity_of_continuation, positive_rate_tokens};
use crate::error::{Error, Result};
use crate::runtime::{
    ActivationTransform, Edit, HookPoint, LogitMatrix, Model, ResidualActivations, SamplerConfig,
    TokenSequence,
};
use crate::sae::{LatentVector, SaeModel};
use crate::tensor::Matrix;

/// Add `alpha · z_max` to latent `r`; every other component is unchanged.
pub fn steer_vector(z: &LatentVector, r: usize, alpha: f64, z_max: f64) -> Result<LatentVector> {
    if r >= z.len() {
        return Err(Error::InvalidInput(format!("latent {r} out of range for width {}", z.len())));
    }
    if !(z_max >= 0.0 && z_max.is_finite()) {
        return Err(Error::InvalidInput(format!("z_max must be finite and >= 0, got {z_max}")));
    }
    let mut values = z.values().to_vec();
    values[r] += alpha * z_max;
    LatentVector::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpliceMode {
    #[default]
    ErrorPreserving,
    Raw,
}

/// Which token positions an edit touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScope {
    #[default]
    All,
    /// Only positions inside the original prompt (generation leaves new tokens unedited).
    PromptOnly,
}

fn splice_rows<F>(
    sae: &SaeModel,
    h: &ResidualActivations,
    latents: &Matrix,
    mode: SpliceMode,
    mut transform: F,
) -> Result<ResidualActivations>
where
    F: FnMut(usize, &LatentVector) -> Result<Option<LatentVector>>,
{
    let mut out = h.clone();
    for t in 0..h.rows() {
        let z = LatentVector::new(latents.row(t).to_vec())?;
        let Some(edited) = transform(t, &z)? else {
            continue;
        };
        if edited.len() != z.len() {
            return Err(Error::shape("latent transform", z.len(), edited.len()));
        }
        match mode {
            SpliceMode::ErrorPreserving => {
                let row = out.row_mut(t);
                for (j, (&new, &old)) in edited.values().iter().zip(z.values()).enumerate() {
                    let diff = new - old;
                    if diff != 0.0 {
                        for (i, x) in row.iter_mut().enumerate() {
                            *x += diff * sae.dec_weight().get(i, j);
                        }
                    }
                }
            }
            SpliceMode::Raw => out.row_mut(t).copy_from_slice(&sae.decode(&edited)?),
        }
    }
    Ok(out)
}

/// Re-insert edited SAE codes into the residual stream, token by token.
///
/// `transform(position, z)` returns the edited code for that position.
pub fn splice<F>(sae: &SaeModel, h: &ResidualActivations, mode: SpliceMode, mut transform: F) -> Result<ResidualActivations>
where
    F: FnMut(usize, &LatentVector) -> Result<LatentVector>,
{
    if h.cols() != sae.d_model() {
        return Err(Error::shape("splice", sae.d_model(), h.cols()));
    }
    let latents = sae.encode_rows(h)?;
    splice_rows(sae, h, &latents, mode, |t, z| transform(t, z).map(Some))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ZmaxPolicy {
    /// Max over all latents and all positions of the unsteered code of the current input.
    PerInputGlobalMax,
    FixedValue(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerSpec {
    pub hook: HookPoint,
    pub latent_id: usize,
    pub alpha: f64,
    pub zmax_policy: ZmaxPolicy,
    #[serde(default)]
    pub splice: SpliceMode,
    #[serde(default)]
    pub positions: PositionScope,
}

impl SteerSpec {
    pub fn validate(&self, sae: &SaeModel) -> Result<()> {
        if self.latent_id >= sae.width() {
            return Err(Error::InvalidConfig(format!(
                "steering latent {} out of range for width {}",
                self.latent_id,
                sae.width()
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if let ZmaxPolicy::FixedValue(v) = self.zmax_policy {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("fixed z_max must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Activation transform installing additive latent steering at one hook.
pub struct SteeringTransform<'a> {
    sae: &'a SaeModel,
    spec: &'a SteerSpec,
    prompt_len: Option<usize>,
}

impl<'a> SteeringTransform<'a> {
    pub fn new(sae: &'a SaeModel, spec: &'a SteerSpec, prompt_len: Option<usize>) -> Result<Self> {
        spec.validate(sae)?;
        Ok(Self { sae, spec, prompt_len })
    }

    /// The `z_max` this transform would use on `acts`.
    pub fn z_max(&self, acts: &ResidualActivations) -> Result<f64> {
        match self.spec.zmax_policy {
            ZmaxPolicy::FixedValue(v) => Ok(v),
            ZmaxPolicy::PerInputGlobalMax => Ok(self.sae.encode_rows(acts)?.as_slice().iter().copied().fold(0.0, f64::max)),
        }
    }
}

impl ActivationTransform for SteeringTransform<'_> {
    fn apply(&self, acts: &ResidualActivations) -> Result<ResidualActivations> {
        let latents = self.sae.encode_rows(acts)?;
        let z_max = match self.spec.zmax_policy {
            ZmaxPolicy::FixedValue(v) => v,
            ZmaxPolicy::PerInputGlobalMax => latents.as_slice().iter().copied().fold(0.0, f64::max),
        };
        let limit = match self.spec.positions {
            PositionScope::All => usize::MAX,
            PositionScope::PromptOnly => self.prompt_len.unwrap_or(usize::MAX),
        };
        splice_rows(self.sae, acts, &latents, self.spec.splice, |t, z| {
            if t >= limit || self.spec.alpha == 0.0 {
                return Ok(None);
            }
            steer_vector(z, self.spec.latent_id, self.spec.alpha, z_max).map(Some)
        })
    }
}

/// Logits with steering installed at `spec.hook`.
pub fn apply_steering(model: &Model, sae: &SaeModel, tokens: &TokenSequence, spec: &SteerSpec) -> Result<LogitMatrix> {
    let t = SteeringTransform::new(sae, spec, Some(tokens.len()))?;
    model.forward_with_intervention(tokens, &[Edit::new(spec.hook, &t)])
}

/// Generation with steering recomputed over the current sequence at every step.
pub fn generate_steered(
    model: &Model,
    sae: &SaeModel,
    prompt: &TokenSequence,
    spec: &SteerSpec,
    sampler: &SamplerConfig,
) -> Result<TokenSequence> {
    let t = SteeringTransform::new(sae, spec, Some(prompt.len()))?;
    model.generate(prompt, sampler, &[Edit::new(spec.hook, &t)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub hooks: Vec<HookPoint>,
    pub latent_ids: BTreeSet<usize>,
    #[serde(default)]
    pub mode: AblationMode,
    #[serde(default)]
    pub splice: SpliceMode,
}

impl AblationSpec {
    pub fn validate(&self, model: &Model, sae: &SaeModel) -> Result<()> {
        if self.hooks.is_empty() {
            return Err(Error::InvalidConfig("ablation needs at least one hook".into()));
        }
        if self.latent_ids.is_empty() {
            return Err(Error::InvalidConfig("ablation needs at least one latent".into()));
        }
        if let Some(&bad) = self.latent_ids.iter().find(|&&j| j >= sae.width()) {
            return Err(Error::InvalidConfig(format!("latent {bad} out of range for width {}", sae.width())));
        }
        let mut seen = BTreeSet::new();
        for h in &self.hooks {
            if !seen.insert(h.stream_index(model.config().n_layers)?) {
                return Err(Error::InvalidConfig(format!("duplicate ablation hook {h}")));
            }
        }
        Ok(())
    }
}

/// Zeroes a latent set at every position (or at one position when `only_position` is set).
pub struct AblationTransform<'a> {
    sae: &'a SaeModel,
    latents: &'a BTreeSet<usize>,
    splice: SpliceMode,
    only_position: Option<usize>,
}

impl<'a> AblationTransform<'a> {
    #[must_use]
    pub fn new(sae: &'a SaeModel, latents: &'a BTreeSet<usize>, splice: SpliceMode) -> Self {
        Self {
            sae,
            latents,
            splice,
            only_position: None,
        }
    }

    #[must_use]
    pub fn at_position(mut self, position: usize) -> Self {
        self.only_position = Some(position);
        self
    }
}

impl ActivationTransform for AblationTransform<'_> {
    fn apply(&self, acts: &ResidualActivations) -> Result<ResidualActivations> {
        let latents = self.sae.encode_rows(acts)?;
        splice_rows(self.sae, acts, &latents, self.splice, |t, z| {
            if self.only_position.is_some_and(|p| p != t) {
                return Ok(None);
            }
            let mut v = z.values().to_vec();
            for &j in self.latents {
                v[j] = 0.0;
            }
            LatentVector::new(v).map(Some)
        })
    }
}

/// Logits with the listed latents forced to zero at every listed hook.
pub fn zero_ablate(model: &Model, sae: &SaeModel, tokens: &TokenSequence, spec: &AblationSpec) -> Result<LogitMatrix> {
    spec.validate(model, sae)?;
    let t = AblationTransform::new(sae, &spec.latent_ids, spec.splice);
    let edits: Vec<Edit<'_>> = spec.hooks.iter().map(|&h| Edit::new(h, &t)).collect();
    model.forward_with_intervention(tokens, &edits)
}

/// Scalar read from the final-position logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Metric {
    /// `logit(yes) − logit(no)`.
    LogitDiff { yes: u32, no: u32 },
    Logit { token: u32 },
}

impl Metric {
    pub fn evaluate(&self, logits: &LogitMatrix) -> Result<f64> {
        let last = logits.rows().checked_sub(1).ok_or_else(|| Error::InvalidInput("empty logits".into()))?;
        let row = logits.row(last);
        let get = |t: u32| {
            row.get(t as usize).copied().ok_or(Error::UnknownToken {
                id: t,
                vocab_size: row.len(),
            })
        };
        match *self {
            Self::LogitDiff { yes, no } => Ok(get(yes)? - get(no)?),
            Self::Logit { token } => get(token),
        }
    }

    #[must_use]
    pub fn name(&self) -> String {
        match self {
            Self::LogitDiff { yes, no } => format!("logitdiff({yes},{no})"),
            Self::Logit { token } => format!("logit({token})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectResult {
    /// `(latent_id, E)` in the requested latent order.
    pub per_latent: Vec<(usize, f64)>,
    pub metric_name: String,
    pub dataset_size: usize,
}

impl EffectResult {
    #[must_use]
    pub fn get(&self, latent: usize) -> Option<f64> {
        self.per_latent.iter().find(|(j, _)| *j == latent).map(|(_, e)| *e)
    }

    /// CSV `latent_id,E,N,metric`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "latent_id,E,N,metric")?;
        for (j, e) in &self.per_latent {
            writeln!(out, "{j},{e},{},{}", self.dataset_size, self.metric_name)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Exact effect of each latent: for every input, the sum over positions `t`
/// of `m(x | do(z_t = 0)) − m(x)`, averaged over inputs.
///
/// One intervened forward per active `(input, position, latent)` cell; cells
/// where the latent is already zero contribute exactly 0. Inputs are processed
/// in parallel and reduced in input order.
pub fn latent_effect(
    model: &Model,
    sae: &SaeModel,
    hook: HookPoint,
    dataset: &[TokenSequence],
    latent_ids: &[usize],
    metric: Metric,
) -> Result<EffectResult> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("latent_effect needs a nonempty dataset".into()));
    }
    if let Some(&bad) = latent_ids.iter().find(|&&j| j >= sae.width()) {
        return Err(Error::InvalidInput(format!("latent {bad} out of range for width {}", sae.width())));
    }
    let start = hook.stream_index(model.config().n_layers)?;
    let per_input: Vec<Vec<f64>> = dataset
        .par_iter()
        .map(|tokens| {
            let h = model.capture(tokens, hook)?;
            let clean = metric.evaluate(&model.forward_from(start, h.clone(), &[])?)?;
            let latents = sae.encode_rows(&h)?;
            latent_ids
                .iter()
                .map(|&j| {
                    let mut total = 0.0;
                    for t in 0..h.rows() {
                        let z = latents.get(t, j);
                        if z == 0.0 {
                            continue;
                        }
                        let mut edited = h.clone();
                        for (i, x) in edited.row_mut(t).iter_mut().enumerate() {
                            *x += -z * sae.dec_weight().get(i, j);
                        }
                        total += metric.evaluate(&model.forward_from(start, edited, &[])?)? - clean;
                    }
                    Ok(total)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let n = dataset.len() as f64;
    let per_latent = latent_ids
        .iter()
        .enumerate()
        .map(|(k, &j)| (j, per_input.iter().map(|v| v[k]).sum::<f64>() / n))
        .collect();
    Ok(EffectResult {
        per_latent,
        metric_name: metric.name(),
        dataset_size: dataset.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSelection {
    pub grid: Vec<f64>,
    pub positive_rate: Vec<f64>,
    pub perplexity: Vec<f64>,
    pub ratio: Vec<f64>,
    pub chosen: f64,
}

/// Index maximizing `rate / perplexity`; ties go to the smallest α.
pub fn choose_alpha(grid: &[f64], positive_rate: &[f64], perplexity: &[f64]) -> Result<(usize, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty alpha grid".into()));
    }
    if positive_rate.len() != grid.len() || perplexity.len() != grid.len() {
        return Err(Error::shape("choose_alpha", grid.len(), positive_rate.len().min(perplexity.len())));
    }
    if let Some(p) = perplexity.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::InvalidInput(format!("degenerate scorer perplexity {p}")));
    }
    let ratio: Vec<f64> = positive_rate.iter().zip(perplexity).map(|(r, p)| r / p).collect();
    let mut best = 0;
    for i in 1..grid.len() {
        if ratio[i] > ratio[best] || (ratio[i] == ratio[best] && grid[i] < grid[best]) {
            best = i;
        }
    }
    Ok((best, ratio))
}

/// Steer-generate on every prompt for each α, score positive rate and mean
/// continuation perplexity under `scorer`, and keep the best ratio.
pub fn select_alpha(
    model: &Model,
    sae: &SaeModel,
    prompts: &[TokenSequence],
    template: &SteerSpec,
    grid: &[f64],
    scorer: &Model,
    positive_token: u32,
    sampler: &SamplerConfig,
) -> Result<AlphaSelection> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("select_alpha needs prompts".into()));
    }
    let mut rates = Vec::with_capacity(grid.len());
    let mut ppls = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let spec = SteerSpec {
            alpha,
            ..template.clone()
        };
        let rows: Vec<(TokenSequence, f64)> = prompts
            .par_iter()
            .map(|p| {
                let gen = generate_steered(model, sae, p, &spec, sampler)?;
                let mut full = p.clone();
                full.0.extend_from_slice(gen.ids());
                let ppl = perplexity_of_continuation(scorer, &full, p.len())?;
                Ok((gen, ppl))
            })
            .collect::<Result<_>>()?;
        let gens: Vec<TokenSequence> = rows.iter().map(|(g, _)| g.clone()).collect();
        rates.push(positive_rate_tokens(&gens, positive_token)?);
        ppls.push(rows.iter().map(|(_, p)| p).sum::<f64>() / rows.len() as f64);
    }
    let (best, ratio) = choose_alpha(grid, &rates, &ppls)?;
    Ok(AlphaSelection {
        grid: grid.to_vec(),
        positive_rate: rates,
        perplexity: ppls,
        ratio,
        chosen: grid[best],
    })
}
