// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic toy transformer with residual-stream hook points.
//!
//! Pre-norm blocks: `x += attn(LN(x)); x += mlp(LN(x))`, causal softmax
//! attention, GELU MLP, fixed sinusoidal positions. The unembedding reads the
//! final residual stream directly (no final norm), so the logits are an affine
//! function of the last stream.
//!
//! The residual stream has `n_layers + 1` positions. Position `p` is the input
//! to block `p`; position `n_layers` is the stream the unembedding reads.
//! [`HookPoint`] names these positions as `(layer, site)` pairs.
//!
//! Planted models carry an orthonormal concept basis. Blocks read the residual
//! with the concept subspace projected out and never write into it, so concept
//! mass placed at a position survives to the unembedding unchanged.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{meta_field, Tensor, TensorFile};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

/// Residual-stream activations, one row per token.
pub type ResidualActivations = Matrix;

/// Logits, one row per token, one column per vocabulary entry.
pub type LogitMatrix = Matrix;

const LN_EPS: f64 = 1e-5;
const PLANTED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Residual stream and logits rounded through `f32` after every update.
    Fp32,
    #[default]
    Fp64,
}

impl Precision {
    #[inline]
    fn round(self, x: &mut [f64]) {
        if self == Self::Fp32 {
            for v in x {
                *v = f64::from(*v as f32);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub numeric_precision: Precision,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if u32::try_from(self.vocab_size).is_err() {
            return Err(Error::InvalidConfig("vocab_size exceeds u32 range".into()));
        }
        Ok(())
    }

    #[must_use]
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Ordered list of vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    #[must_use]
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[must_use]
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    /// Check length and id range against a model config.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if self.0.len() > config.max_seq {
            return Err(Error::SequenceTooLong {
                len: self.0.len(),
                max_seq: config.max_seq,
            });
        }
        if let Some(&id) = self.0.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::UnknownToken {
                id,
                vocab_size: config.vocab_size,
            });
        }
        Ok(())
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    ResidualPre,
    ResidualPost,
}

/// A named residual-stream location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookPoint {
    pub layer: usize,
    pub site: Site,
}

impl HookPoint {
    #[must_use]
    pub fn pre(layer: usize) -> Self {
        Self {
            layer,
            site: Site::ResidualPre,
        }
    }

    #[must_use]
    pub fn post(layer: usize) -> Self {
        Self {
            layer,
            site: Site::ResidualPost,
        }
    }

    /// Index of the residual-stream position this hook reads, in `0..=n_layers`.
    ///
    /// `post(l)` and `pre(l + 1)` alias the same position.
    pub fn stream_index(&self, n_layers: usize) -> Result<usize> {
        if self.layer > n_layers {
            return Err(Error::HookOutOfRange(format!("{self} (n_layers = {n_layers})")));
        }
        Ok(match self.site {
            Site::ResidualPre => self.layer,
            Site::ResidualPost => (self.layer + 1).min(n_layers),
        })
    }
}

impl std::str::FromStr for HookPoint {
    type Err = Error;

    /// Parses `resid_pre.L` or `resid_post.L`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("hook `{s}` is not resid_pre.L or resid_post.L"));
        let (site, layer) = s.trim().split_once('.').ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        match site {
            "resid_pre" => Ok(Self::pre(layer)),
            "resid_post" => Ok(Self::post(layer)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let site = match self.site {
            Site::ResidualPre => "resid_pre",
            Site::ResidualPost => "resid_post",
        };
        write!(f, "{site}.{}", self.layer)
    }
}

/// Contract for a residual-stream edit: map activations to activations of the same shape.
pub trait ActivationTransform: Sync {
    fn apply(&self, acts: &ResidualActivations) -> Result<ResidualActivations>;
}

impl<F> ActivationTransform for F
where
    F: Fn(&ResidualActivations) -> Result<ResidualActivations> + Sync,
{
    fn apply(&self, acts: &ResidualActivations) -> Result<ResidualActivations> {
        self(acts)
    }
}

/// Leaves activations untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl ActivationTransform for Identity {
    fn apply(&self, acts: &ResidualActivations) -> Result<ResidualActivations> {
        Ok(acts.clone())
    }
}

/// One installed intervention.
#[derive(Clone, Copy)]
pub struct Edit<'a> {
    pub hook: HookPoint,
    pub transform: &'a dyn ActivationTransform,
}

impl<'a> Edit<'a> {
    pub fn new(hook: HookPoint, transform: &'a dyn ActivationTransform) -> Self {
        Self { hook, transform }
    }
}

impl fmt::Debug for Edit<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Edit").field("hook", &self.hook).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenInjection {
    pub concept: String,
    pub magnitude: f64,
    /// When set, the token's non-concept embedding is copied from this token.
    #[serde(default)]
    pub base_token: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnswerCoupling {
    pub concept: String,
    pub answer_token: u32,
    pub strength: f64,
}

/// Ground-truth concept structure for a planted model.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct PlantedModelSpec {
    pub concept_directions: BTreeMap<String, Vec<f64>>,
    pub token_injections: BTreeMap<u32, TokenInjection>,
    pub answer_couplings: Vec<AnswerCoupling>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Greedy,
    Temperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SampleMode,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl SamplerConfig {
    #[must_use]
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            mode: SampleMode::Greedy,
            temperature: 1.0,
            max_new_tokens,
            seed: 0,
        }
    }

    #[must_use]
    pub fn temperature(temperature: f64, max_new_tokens: usize, seed: u64) -> Self {
        Self {
            mode: SampleMode::Temperature,
            temperature,
            max_new_tokens,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1_gain: Vec<f64>,
    ln1_bias: Vec<f64>,
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    w_o: Matrix,
    b_o: Vec<f64>,
    ln2_gain: Vec<f64>,
    ln2_bias: Vec<f64>,
    w_in: Matrix,
    b_in: Vec<f64>,
    w_out: Matrix,
    b_out: Vec<f64>,
}

impl Block {
    fn random(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let m = cfg.d_mlp;
        let sd = 1.0 / (d as f64).sqrt();
        Self {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            w_q: gaussian(rng, d, d, sd),
            w_k: gaussian(rng, d, d, sd),
            w_v: gaussian(rng, d, d, sd),
            w_o: gaussian(rng, d, d, 0.5 * sd),
            b_o: gaussian(rng, 1, d, 0.02).into_vec(),
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w_in: gaussian(rng, d, m, sd),
            b_in: gaussian(rng, 1, m, 0.02).into_vec(),
            w_out: gaussian(rng, m, d, 0.5 / (m as f64).sqrt()),
            b_out: gaussian(rng, 1, d, 0.02).into_vec(),
        }
    }

    fn zeroed(&mut self) {
        for v in [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.b_in,
            &mut self.b_out,
        ] {
            v.fill(0.0);
        }
        for m in [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_in,
            &mut self.w_out,
        ] {
            m.as_mut_slice().fill(0.0);
        }
    }

    const TENSORS: [&'static str; 13] = [
        "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "b_o", "ln2_gain", "ln2_bias", "w_in",
        "b_in", "w_out", "b_out",
    ];
}

/// Immutable transformer weights. Safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    token_embed: Matrix,
    positional: Matrix,
    blocks: Vec<Block>,
    unembed: Matrix,
    unembed_bias: Vec<f64>,
    /// Orthonormal rows spanning the planted concept subspace (zero rows for random models).
    concept_basis: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> Matrix {
    let normal = Normal::new(0.0, sd).expect("finite sd");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// Fixed sinusoidal position table, `max_seq × d_model`.
#[must_use]
pub fn sinusoidal_positions(max_seq: usize, d_model: usize) -> Matrix {
    let mut pe = Matrix::zeros(max_seq, d_model);
    for pos in 0..max_seq {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Deterministic random model; equal `(config, seed)` give bit-identical weights.
pub fn build_random_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let v = config.vocab_size;
    let token_embed = gaussian(&mut rng, v, d, 1.0);
    let blocks = (0..config.n_layers)
        .map(|_| Block::random(config, &mut rng))
        .collect();
    let unembed = gaussian(&mut rng, v, d, 1.0 / (d as f64).sqrt());
    let unembed_bias = gaussian(&mut rng, 1, v, 0.1).into_vec();
    Ok(Model {
        config: config.clone(),
        token_embed,
        positional: sinusoidal_positions(config.max_seq, d),
        blocks,
        unembed,
        unembed_bias,
        concept_basis: Matrix::zeros(0, d),
    })
}

fn project_out(basis: &Matrix, v: &mut [f64]) {
    for u in basis.row_iter() {
        let c = dot(u, v);
        if c != 0.0 {
            for (x, &ui) in v.iter_mut().zip(u) {
                *x -= c * ui;
            }
        }
    }
}

fn project_rows(basis: &Matrix, m: &mut Matrix) {
    for r in 0..m.rows() {
        project_out(basis, m.row_mut(r));
    }
}

/// Random model with planted concept directions, token injections and answer couplings.
///
/// Starting from [`build_random_model`], every embedding, positional row, block
/// output and unembedding row is projected onto the orthogonal complement of the
/// concept subspace. Injected tokens then get `magnitude · direction` added to
/// their (optionally base-token) embedding, and each coupled answer token gets
/// `strength · direction` added to its unembedding row.
pub fn build_planted_model(config: &ModelConfig, spec: &PlantedModelSpec, seed: u64) -> Result<Model> {
    let mut model = build_random_model(config, seed)?;
    let d = config.d_model;

    let names: Vec<&String> = spec.concept_directions.keys().collect();
    let mut basis_rows = Vec::with_capacity(names.len());
    for name in &names {
        let dir = &spec.concept_directions[*name];
        if dir.len() != d {
            return Err(Error::InvalidConfig(format!(
                "concept `{name}` has dimension {}, model has d_model {d}",
                dir.len()
            )));
        }
        if !dir.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidConfig(format!("concept `{name}` is not finite")));
        }
        let n = dot(dir, dir).sqrt();
        if (n - 1.0).abs() > PLANTED_TOL {
            return Err(Error::InvalidConfig(format!(
                "concept `{name}` is not unit norm (norm {n})"
            )));
        }
        basis_rows.push(dir.clone());
    }
    for i in 0..basis_rows.len() {
        for j in 0..i {
            let c = dot(&basis_rows[i], &basis_rows[j]);
            if c.abs() > PLANTED_TOL {
                return Err(Error::InvalidConfig(format!(
                    "concepts `{}` and `{}` are not orthogonal (dot {c})",
                    names[i], names[j]
                )));
            }
        }
    }
    let basis = if basis_rows.is_empty() {
        Matrix::zeros(0, d)
    } else {
        Matrix::from_rows(&basis_rows)?
    };
    let direction = |concept: &str| {
        spec.concept_directions
            .get(concept)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown concept `{concept}`")))
    };

    project_rows(&basis, &mut model.token_embed);
    project_rows(&basis, &mut model.positional);
    project_rows(&basis, &mut model.unembed);
    for block in &mut model.blocks {
        project_rows(&basis, &mut block.w_o);
        project_rows(&basis, &mut block.w_out);
        project_out(&basis, &mut block.b_o);
        project_out(&basis, &mut block.b_out);
    }

    let clean_embed = model.token_embed.clone();
    for (&token, inj) in &spec.token_injections {
        let check = |t: u32| {
            if (t as usize) < config.vocab_size {
                Ok(())
            } else {
                Err(Error::UnknownToken {
                    id: t,
                    vocab_size: config.vocab_size,
                })
            }
        };
        check(token)?;
        if !inj.magnitude.is_finite() {
            return Err(Error::InvalidConfig(format!("injection for token {token} not finite")));
        }
        let dir = direction(&inj.concept)?;
        let base = inj.base_token.unwrap_or(token);
        check(base)?;
        let row = model.token_embed.row_mut(token as usize);
        row.copy_from_slice(clean_embed.row(base as usize));
        for (x, &u) in row.iter_mut().zip(dir) {
            *x += inj.magnitude * u;
        }
    }
    for coupling in &spec.answer_couplings {
        if !coupling.strength.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "coupling strength for `{}` not finite",
                coupling.concept
            )));
        }
        if coupling.answer_token as usize >= config.vocab_size {
            return Err(Error::UnknownToken {
                id: coupling.answer_token,
                vocab_size: config.vocab_size,
            });
        }
        let dir = direction(&coupling.concept)?;
        let row = model.unembed.row_mut(coupling.answer_token as usize);
        for (x, &u) in row.iter_mut().zip(dir) {
            *x += coupling.strength * u;
        }
    }
    model.concept_basis = basis;
    Ok(model)
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Numerically stable softmax of a logit row.
#[must_use]
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax(logits)[index]`.
#[must_use]
pub fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[index] - lse
}

impl Model {
    #[must_use]
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    #[must_use]
    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Number of residual-stream positions (`n_layers + 1`).
    #[must_use]
    pub fn n_streams(&self) -> usize {
        self.config.n_layers + 1
    }

    /// Planted concept basis, one orthonormal row per concept (empty for random models).
    #[must_use]
    pub fn concept_basis(&self) -> &Matrix {
        &self.concept_basis
    }

    #[must_use]
    pub fn token_embedding(&self, token: u32) -> &[f64] {
        self.token_embed.row(token as usize)
    }

    #[must_use]
    pub fn unembed_row(&self, token: u32) -> &[f64] {
        self.unembed.row(token as usize)
    }

    #[must_use]
    pub fn unembed_bias(&self) -> &[f64] {
        &self.unembed_bias
    }

    #[must_use]
    pub fn positional(&self) -> &Matrix {
        &self.positional
    }

    #[must_use]
    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.config.numeric_precision = precision;
        self
    }

    /// Same embeddings and unembedding, all block weights set to zero.
    #[must_use]
    pub fn with_zeroed_blocks(mut self) -> Self {
        for b in &mut self.blocks {
            b.zeroed();
        }
        self
    }

    /// Token embeddings plus positions: the stream at position 0.
    pub fn embed(&self, tokens: &TokenSequence) -> Result<ResidualActivations> {
        tokens.validate(&self.config)?;
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.ids().iter().enumerate() {
            let e = self.token_embed.row(t as usize);
            let p = self.positional.row(i);
            for (o, (a, b)) in x.row_mut(i).iter_mut().zip(e.iter().zip(p)) {
                *o = a + b;
            }
        }
        self.config.numeric_precision.round(x.as_mut_slice());
        Ok(x)
    }

    fn read(&self, x: &[f64], gain: &[f64], bias: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        scratch.copy_from_slice(x);
        project_out(&self.concept_basis, scratch);
        layer_norm(scratch, gain, bias, out);
    }

    fn block_forward(&self, layer: usize, x: &mut Matrix) {
        let b = &self.blocks[layer];
        let (n, d) = x.shape();
        let dh = self.config.d_head();
        let heads = self.config.n_heads;
        let mut scratch = vec![0.0; d];

        let mut normed = Matrix::zeros(n, d);
        for i in 0..n {
            let (src, dst) = (x.row(i), normed.row_mut(i));
            self.read(src, &b.ln1_gain, &b.ln1_bias, &mut scratch, dst);
        }
        let q = normed.matmul(&b.w_q).expect("d×d");
        let k = normed.matmul(&b.w_k).expect("d×d");
        let v = normed.matmul(&b.w_v).expect("d×d");
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mixed = Matrix::zeros(n, d);
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                for j in 0..=i {
                    scores[j] = dot(qi, &k.row(j)[cols.clone()]) * scale;
                }
                let probs = softmax(&scores[..=i]);
                let out = &mut mixed.row_mut(i)[cols.clone()];
                for (j, &p) in probs.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += p * vv;
                    }
                }
            }
        }
        let attn = mixed.matmul(&b.w_o).expect("d×d");
        for i in 0..n {
            for (xv, (a, bo)) in x.row_mut(i).iter_mut().zip(attn.row(i).iter().zip(&b.b_o)) {
                *xv += a + bo;
            }
        }
        self.config.numeric_precision.round(x.as_mut_slice());

        for i in 0..n {
            let (src, dst) = (x.row(i), normed.row_mut(i));
            self.read(src, &b.ln2_gain, &b.ln2_bias, &mut scratch, dst);
        }
        let mut hidden = normed.matmul(&b.w_in).expect("d×m");
        for i in 0..n {
            for (hv, bi) in hidden.row_mut(i).iter_mut().zip(&b.b_in) {
                *hv = gelu(*hv + bi);
            }
        }
        let mlp = hidden.matmul(&b.w_out).expect("m×d");
        for i in 0..n {
            for (xv, (a, bo)) in x.row_mut(i).iter_mut().zip(mlp.row(i).iter().zip(&b.b_out)) {
                *xv += a + bo;
            }
        }
        self.config.numeric_precision.round(x.as_mut_slice());
    }

    /// Logits from a final residual stream.
    pub fn unembed(&self, x: &ResidualActivations) -> Result<LogitMatrix> {
        if x.cols() != self.config.d_model {
            return Err(Error::shape("Model::unembed", self.config.d_model, x.cols()));
        }
        let mut logits = Matrix::zeros(x.rows(), self.config.vocab_size);
        for i in 0..x.rows() {
            let xi = x.row(i);
            for (t, out) in logits.row_mut(i).iter_mut().enumerate() {
                *out = dot(xi, self.unembed.row(t)) + self.unembed_bias[t];
            }
        }
        self.config.numeric_precision.round(logits.as_mut_slice());
        Ok(logits)
    }

    pub fn forward(&self, tokens: &TokenSequence) -> Result<LogitMatrix> {
        self.forward_with_intervention(tokens, &[])
    }

    /// Residual stream at `hook` from an unmodified forward pass.
    pub fn capture(&self, tokens: &TokenSequence, hook: HookPoint) -> Result<ResidualActivations> {
        let target = hook.stream_index(self.config.n_layers)?;
        let mut x = self.embed(tokens)?;
        for layer in 0..target {
            self.block_forward(layer, &mut x);
        }
        Ok(x)
    }

    /// Streams at every position `0..=n_layers` from one unmodified pass.
    pub fn capture_all(&self, tokens: &TokenSequence) -> Result<Vec<ResidualActivations>> {
        let mut x = self.embed(tokens)?;
        let mut out = Vec::with_capacity(self.n_streams());
        out.push(x.clone());
        for layer in 0..self.config.n_layers {
            self.block_forward(layer, &mut x);
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Continue a forward pass from stream position `start` with the given activations.
    ///
    /// Edits at positions `>= start` are applied; earlier ones are ignored.
    pub fn forward_from(
        &self,
        start: usize,
        acts: ResidualActivations,
        edits: &[Edit<'_>],
    ) -> Result<LogitMatrix> {
        let n_layers = self.config.n_layers;
        if start > n_layers {
            return Err(Error::HookOutOfRange(format!("stream {start} (n_layers = {n_layers})")));
        }
        if acts.cols() != self.config.d_model {
            return Err(Error::shape("Model::forward_from", self.config.d_model, acts.cols()));
        }
        let schedule = self.edit_schedule(edits)?;
        let mut x = acts;
        for pos in start..=n_layers {
            if let Some(edit) = schedule[pos] {
                x = apply_checked(edit, &x)?;
            }
            if pos < n_layers {
                self.block_forward(pos, &mut x);
            }
        }
        self.unembed(&x)
    }

    /// Forward pass with each edit applied at its hook, in layer order.
    pub fn forward_with_intervention(
        &self,
        tokens: &TokenSequence,
        edits: &[Edit<'_>],
    ) -> Result<LogitMatrix> {
        let x = self.embed(tokens)?;
        self.forward_from(0, x, edits)
    }

    fn edit_schedule<'e>(&self, edits: &'e [Edit<'e>]) -> Result<Vec<Option<&'e Edit<'e>>>> {
        let mut schedule: Vec<Option<&Edit<'_>>> = vec![None; self.n_streams()];
        for edit in edits {
            let idx = edit.hook.stream_index(self.config.n_layers)?;
            if let Some(prev) = schedule[idx] {
                return Err(Error::InvalidInput(format!(
                    "duplicate hook: {} and {} address the same residual stream",
                    prev.hook, edit.hook
                )));
            }
            schedule[idx] = Some(edit);
        }
        Ok(schedule)
    }

    /// Autoregressive generation; returns only the new tokens.
    ///
    /// Edits are re-applied on every step over the whole current sequence.
    pub fn generate(
        &self,
        prompt: &TokenSequence,
        sampler: &SamplerConfig,
        edits: &[Edit<'_>],
    ) -> Result<TokenSequence> {
        sampler.validate()?;
        prompt.validate(&self.config)?;
        let total = prompt.len() + sampler.max_new_tokens;
        if total > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: total,
                max_seq: self.config.max_seq,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
        let mut seq = prompt.clone();
        let mut generated = Vec::with_capacity(sampler.max_new_tokens);
        for _ in 0..sampler.max_new_tokens {
            let logits = self.forward_with_intervention(&seq, edits)?;
            let last = logits.row(logits.rows() - 1);
            let next = match sampler.mode {
                SampleMode::Greedy => argmax(last),
                SampleMode::Temperature => {
                    let scaled: Vec<f64> = last.iter().map(|l| l / sampler.temperature).collect();
                    sample_index(&softmax(&scaled), rng.random::<f64>())
                }
            } as u32;
            seq.0.push(next);
            generated.push(next);
        }
        Ok(TokenSequence(generated))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(TensorFile::load(path)?)
    }

    #[must_use]
    pub fn to_container(&self) -> TensorFile {
        let meta = serde_json::json!({
            "config": self.config,
            "n_concepts": self.concept_basis.rows(),
        });
        let mut f = TensorFile::new("model", meta);
        f.push("token_embed", Tensor::matrix(&self.token_embed));
        f.push("positional", Tensor::matrix(&self.positional));
        for (l, b) in self.blocks.iter().enumerate() {
            let vectors = [
                &b.ln1_gain, &b.ln1_bias, &b.b_o, &b.ln2_gain, &b.ln2_bias, &b.b_in, &b.b_out,
            ];
            let matrices = [&b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.w_in, &b.w_out];
            let (mut vi, mut mi) = (0, 0);
            for name in Block::TENSORS {
                let t = if name.starts_with('w') {
                    mi += 1;
                    Tensor::matrix(matrices[mi - 1])
                } else {
                    vi += 1;
                    Tensor::vector(vectors[vi - 1].clone())
                };
                f.push(format!("blocks.{l}.{name}"), t);
            }
        }
        f.push("unembed", Tensor::matrix(&self.unembed));
        f.push("unembed_bias", Tensor::vector(self.unembed_bias.clone()));
        f.push("concept_basis", Tensor::matrix(&self.concept_basis));
        f
    }

    pub fn from_container(mut f: TensorFile) -> Result<Self> {
        f.expect_kind("model")?;
        let config: ModelConfig = meta_field(&f.meta, "config")?;
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let n_concepts: usize = meta_field(&f.meta, "n_concepts")?;
        let (v, d, m) = (config.vocab_size, config.d_model, config.d_mlp);
        let mut mat = |name: &str, r: usize, c: usize| f.take(name)?.into_matrix(name, r, c);
        let token_embed = mat("token_embed", v, d)?;
        let positional = mat("positional", config.max_seq, d)?;
        let unembed = mat("unembed", v, d)?;
        let concept_basis = mat("concept_basis", n_concepts, d)?;
        let unembed_bias = f.take("unembed_bias")?.into_vector("unembed_bias", v)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut take_m = |name: &str, r: usize, c: usize| {
                let full = format!("blocks.{l}.{name}");
                f.take(&full)?.into_matrix(&full, r, c)
            };
            let w_q = take_m("w_q", d, d)?;
            let w_k = take_m("w_k", d, d)?;
            let w_v = take_m("w_v", d, d)?;
            let w_o = take_m("w_o", d, d)?;
            let w_in = take_m("w_in", d, m)?;
            let w_out = take_m("w_out", m, d)?;
            let mut take_v = |name: &str, len: usize| {
                let full = format!("blocks.{l}.{name}");
                f.take(&full)?.into_vector(&full, len)
            };
            blocks.push(Block {
                ln1_gain: take_v("ln1_gain", d)?,
                ln1_bias: take_v("ln1_bias", d)?,
                w_q,
                w_k,
                w_v,
                w_o,
                b_o: take_v("b_o", d)?,
                ln2_gain: take_v("ln2_gain", d)?,
                ln2_bias: take_v("ln2_bias", d)?,
                w_in,
                b_in: take_v("b_in", m)?,
                w_out,
                b_out: take_v("b_out", d)?,
            });
        }
        if let Some(extra) = f.names().first() {
            return Err(Error::Format(format!("unexpected tensor `{extra}` in model file")));
        }
        Ok(Self {
            config,
            token_embed,
            positional,
            blocks,
            unembed,
            unembed_bias,
            concept_basis,
        })
    }
}

fn apply_checked(edit: &Edit<'_>, x: &ResidualActivations) -> Result<ResidualActivations> {
    let out = edit.transform.apply(x)?;
    if out.shape() != x.shape() {
        return Err(Error::shape(
            "activation transform",
            format!("{:?} at {}", x.shape(), edit.hook),
            format!("{:?}", out.shape()),
        ));
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
#[must_use]
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
