// SPDX-License-Identifier: MIT OR Apache-2.0

//! Top-activating contexts per latent and detection scoring of latent
//! descriptions through a pluggable [`Judge`].

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::runtime::{HookPoint, Model, TokenSequence};
use crate::sae::SaeModel;
use crate::tensor::Matrix;

pub const DEFAULT_CONTEXT_RADIUS: usize = 8;

/// Per-token SAE codes for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocActivations {
    pub doc_id: u64,
    pub tokens: TokenSequence,
    /// `n_tokens × width`.
    pub latents: Matrix,
}

/// Encode every document at `hook`; parallel per document, output in input order.
pub fn collect_activations(
    model: &Model,
    sae: &SaeModel,
    hook: HookPoint,
    docs: &[(u64, TokenSequence)],
) -> Result<Vec<DocActivations>> {
    docs.par_iter()
        .map(|(id, tokens)| {
            let h = model.capture(tokens, hook)?;
            Ok(DocActivations {
                doc_id: *id,
                tokens: tokens.clone(),
                latents: sae.encode_rows(&h)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub doc_id: u64,
    pub token_index: usize,
    pub activation: f64,
    /// Tokens within `radius` of `token_index`, truncated at document edges.
    pub context: Vec<u32>,
}

fn check_latent(acts: &[DocActivations], latent: usize) -> Result<()> {
    let width = acts.first().map_or(0, |d| d.latents.cols());
    if latent >= width {
        return Err(Error::InvalidInput(format!("unknown latent {latent} (width {width})")));
    }
    Ok(())
}

fn record(doc: &DocActivations, t: usize, latent: usize, radius: usize) -> ActivationRecord {
    let ids = doc.tokens.ids();
    let lo = t.saturating_sub(radius);
    let hi = (t + radius + 1).min(ids.len());
    ActivationRecord {
        doc_id: doc.doc_id,
        token_index: t,
        activation: doc.latents.get(t, latent),
        context: ids[lo..hi].to_vec(),
    }
}

/// `(doc index, token index)` of every position where `latent` is positive.
fn positive_cells(acts: &[DocActivations], latent: usize) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for (d, doc) in acts.iter().enumerate() {
        for t in 0..doc.latents.rows() {
            if doc.latents.get(t, latent) > 0.0 {
                cells.push((d, t));
            }
        }
    }
    cells
}

/// Up to `k` highest activations of `latent`, descending; ties by `(doc_id, token_index)`.
pub fn top_activating(acts: &[DocActivations], latent: usize, k: usize, radius: usize) -> Result<Vec<ActivationRecord>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    check_latent(acts, latent)?;
    let mut records: Vec<ActivationRecord> = positive_cells(acts, latent)
        .into_iter()
        .map(|(d, t)| record(&acts[d], t, latent, radius))
        .collect();
    records.sort_by(|a, b| {
        b.activation
            .total_cmp(&a.activation)
            .then(a.doc_id.cmp(&b.doc_id))
            .then(a.token_index.cmp(&b.token_index))
    });
    records.truncate(k);
    Ok(records)
}

/// Balanced detection set: tercile-stratified positives and as many negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvalSet {
    pub latent_id: usize,
    /// Lowest, middle and highest tercile of the positive activations.
    pub terciles: [Vec<ActivationRecord>; 3],
    pub negatives: Vec<ActivationRecord>,
}

impl DetectionEvalSet {
    #[must_use]
    pub fn positives(&self) -> Vec<&ActivationRecord> {
        self.terciles.iter().flatten().collect()
    }

    #[must_use]
    pub fn n_positives(&self) -> usize {
        self.terciles.iter().map(Vec::len).sum()
    }
}

fn sample<T: Clone>(pool: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if pool.len() >= n {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.partial_shuffle(rng, n);
        idx[..n].iter().map(|&i| pool[i].clone()).collect()
    } else {
        (0..n).map(|_| pool.choose(rng).expect("nonempty pool").clone()).collect()
    }
}

/// Split positive activations into terciles by value and draw `per_tercile`
/// from each (with replacement when a tercile is smaller), then draw the
/// same total of negatives uniformly from zero-activation positions.
pub fn build_eval_set(
    acts: &[DocActivations],
    latent: usize,
    per_tercile: usize,
    seed: u64,
    radius: usize,
) -> Result<DetectionEvalSet> {
    check_latent(acts, latent)?;
    if per_tercile == 0 {
        return Err(Error::InvalidInput("per_tercile must be >= 1".into()));
    }
    let mut pos = positive_cells(acts, latent);
    if pos.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "latent {latent} has {} positive activations; need at least 3",
            pos.len()
        )));
    }
    let mut neg = Vec::new();
    for (d, doc) in acts.iter().enumerate() {
        for t in 0..doc.latents.rows() {
            if doc.latents.get(t, latent) <= 0.0 {
                neg.push((d, t));
            }
        }
    }
    if neg.is_empty() {
        return Err(Error::InvalidInput(format!("latent {latent} is active at every position")));
    }
    pos.sort_by(|&(da, ta), &(db, tb)| {
        acts[da].latents.get(ta, latent)
            .total_cmp(&acts[db].latents.get(tb, latent))
            .then(acts[da].doc_id.cmp(&acts[db].doc_id))
            .then(ta.cmp(&tb))
    });
    let n = pos.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terciles: [Vec<ActivationRecord>; 3] = std::array::from_fn(|i| {
        let slice = &pos[i * n / 3..(i + 1) * n / 3];
        sample(slice, per_tercile, &mut rng)
            .into_iter()
            .map(|(d, t)| record(&acts[d], t, latent, radius))
            .collect()
    });
    let negatives = sample(&neg, 3 * per_tercile, &mut rng)
        .into_iter()
        .map(|(d, t)| record(&acts[d], t, latent, radius))
        .collect();
    Ok(DetectionEvalSet {
        latent_id: latent,
        terciles,
        negatives,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionSource {
    Catalog,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDescription {
    pub latent_id: usize,
    pub text: String,
    pub source: DescriptionSource,
    pub detection_score: Option<f64>,
}

impl LatentDescription {
    #[must_use]
    pub fn new(latent_id: usize, text: impl Into<String>, source: DescriptionSource) -> Self {
        Self {
            latent_id,
            text: text.into(),
            source,
            detection_score: None,
        }
    }

    /// Templated description naming the tokens a keyword judge looks for.
    #[must_use]
    pub fn from_keywords(latent_id: usize, keywords: &[u32], vocab: Option<&Vocabulary>) -> Self {
        let words: Vec<String> = keywords
            .iter()
            .map(|&t| vocab.and_then(|v| v.word(t)).map_or_else(|| format!("<{t}>"), str::to_string))
            .collect();
        Self::new(latent_id, format!("fires on: {}", words.join(", ")), DescriptionSource::Generated)
    }
}

/// Decides from a description and a context alone whether the latent fires.
///
/// Implementations must be pure functions of their inputs.
pub trait Judge: Sync {
    fn is_activating(&self, description: &str, context: &[u32]) -> Result<bool>;
}

/// Answers "activating" iff the context contains any keyword.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordJudge {
    keywords: Vec<u32>,
}

pub fn keyword_judge(keywords: Vec<u32>) -> Result<KeywordJudge> {
    if keywords.is_empty() {
        return Err(Error::InvalidInput("keyword judge needs at least one keyword".into()));
    }
    Ok(KeywordJudge { keywords })
}

impl Judge for KeywordJudge {
    fn is_activating(&self, _description: &str, context: &[u32]) -> Result<bool> {
        Ok(context.iter().any(|t| self.keywords.contains(t)))
    }
}

/// Coin flip that is a pure function of `(seed, description, context)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomJudge {
    pub seed: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Judge for RandomJudge {
    fn is_activating(&self, description: &str, context: &[u32]) -> Result<bool> {
        let mut h = splitmix(self.seed);
        for b in description.bytes() {
            h = splitmix(h ^ u64::from(b));
        }
        for &t in context {
            h = splitmix(h ^ (u64::from(t) | 1 << 40));
        }
        Ok(h >> 63 == 1)
    }
}

/// Balanced accuracy of `judge` on the eval set, presented in a seeded shuffle.
pub fn score_description(desc: &LatentDescription, set: &DetectionEvalSet, judge: &dyn Judge, seed: u64) -> Result<f64> {
    let mut examples: Vec<(&[u32], bool)> = set
        .terciles
        .iter()
        .flatten()
        .map(|r| (r.context.as_slice(), true))
        .chain(set.negatives.iter().map(|r| (r.context.as_slice(), false)))
        .collect();
    let n_pos = set.n_positives();
    let n_neg = set.negatives.len();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("eval set needs positives and negatives".into()));
    }
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let verdicts: Vec<bool> = examples
        .par_iter()
        .enumerate()
        .map(|(index, (ctx, _))| {
            judge.is_activating(&desc.text, ctx).map_err(|e| Error::Judge {
                index,
                message: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    let tp = examples.iter().zip(&verdicts).filter(|((_, y), v)| *y && **v).count();
    let tn = examples.iter().zip(&verdicts).filter(|((_, y), v)| !*y && !**v).count();
    Ok(0.5 * (tp as f64 / n_pos as f64 + tn as f64 / n_neg as f64))
}

pub fn write_catalog(descs: &[LatentDescription], mut out: impl Write) -> Result<()> {
    for d in descs {
        let line = serde_json::to_string(d)?;
        writeln!(out, "{line}").map_err(|e| Error::io("<catalog>", e))?;
    }
    Ok(())
}

pub fn read_catalog(input: impl BufRead) -> Result<Vec<LatentDescription>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<catalog>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_catalog(descs: &[LatentDescription], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_catalog(descs, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Vec<LatentDescription>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_catalog(std::io::BufReader::new(f))
}

/// CSV `doc_id,token_index,activation,context`; context is space-separated
/// words when a vocabulary is given, else token ids.
#[must_use]
pub fn records_csv(records: &[ActivationRecord], vocab: Option<&Vocabulary>) -> String {
    let mut s = String::from("doc_id,token_index,activation,context\n");
    for r in records {
        let ctx = match vocab {
            Some(v) => v.decode(&TokenSequence(r.context.clone())),
            None => r.context.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
        };
        s.push_str(&format!("{},{},{},\"{}\"\n", r.doc_id, r.token_index, r.activation, ctx.replace('"', "\"\"")));
    }
    s
}
