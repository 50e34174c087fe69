// SPDX-License-Identifier: MIT OR Apache-2.0

//! Max-aggregated SAE features and ℓ1-regularized logistic-regression probes.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{meta_field, Tensor, TensorFile};
use crate::error::{Error, Result};
use crate::runtime::{HookPoint, Model, TokenSequence};
use crate::sae::SaeModel;
use crate::tensor::{dot, Matrix};

/// Columnwise maximum over token-level latent vectors.
pub fn max_aggregate(token_latents: &Matrix) -> Result<Vec<f64>> {
    if token_latents.rows() == 0 {
        return Err(Error::InvalidInput("max_aggregate needs at least one token".into()));
    }
    let mut out = token_latents.row(0).to_vec();
    for row in token_latents.row_iter().skip(1) {
        for (m, &v) in out.iter_mut().zip(row) {
            if v > *m {
                *m = v;
            }
        }
    }
    Ok(out)
}

/// `N × W` max-aggregated latent activations, one row per document.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub doc_ids: Vec<u64>,
}

impl FeatureMatrix {
    pub fn new(values: Matrix, doc_ids: Vec<u64>) -> Result<Self> {
        if values.rows() != doc_ids.len() {
            return Err(Error::shape("FeatureMatrix doc_ids", values.rows(), doc_ids.len()));
        }
        Ok(Self { values, doc_ids })
    }

    #[must_use]
    pub fn n_docs(&self) -> usize {
        self.values.rows()
    }

    #[must_use]
    pub fn width(&self) -> usize {
        self.values.cols()
    }

    /// Feature column for one latent.
    #[must_use]
    pub fn latent(&self, j: usize) -> Vec<f64> {
        self.values.column(j)
    }

    /// Rows at the given indices, in order.
    #[must_use]
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut values = Matrix::zeros(rows.len(), self.width());
        for (o, &r) in rows.iter().enumerate() {
            values.row_mut(o).copy_from_slice(self.values.row(r));
        }
        Self {
            values,
            doc_ids: rows.iter().map(|&r| self.doc_ids[r]).collect(),
        }
    }

    #[must_use]
    pub fn to_container(&self) -> TensorFile {
        let meta = serde_json::json!({
            "n_docs": self.n_docs(),
            "width": self.width(),
            "doc_ids": self.doc_ids,
        });
        let mut f = TensorFile::new("features", meta);
        f.push("values", Tensor::matrix(&self.values));
        f
    }

    pub fn from_container(mut f: TensorFile) -> Result<Self> {
        f.expect_kind("features")?;
        let n: usize = meta_field(&f.meta, "n_docs")?;
        let w: usize = meta_field(&f.meta, "width")?;
        let doc_ids: Vec<u64> = meta_field(&f.meta, "doc_ids")?;
        let values = f.take("values")?.into_matrix("values", n, w)?;
        Self::new(values, doc_ids).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Encode every document at `hook` and max-aggregate over its tokens.
///
/// Documents are processed in parallel; row order follows `docs`.
pub fn build_feature_matrix(
    model: &Model,
    sae: &SaeModel,
    hook: HookPoint,
    docs: &[(u64, TokenSequence)],
) -> Result<FeatureMatrix> {
    let rows: Vec<Vec<f64>> = docs
        .par_iter()
        .map(|(_, tokens)| {
            let acts = model.capture(tokens, hook)?;
            max_aggregate(&sae.encode_rows(&acts)?)
        })
        .collect::<Result<_>>()?;
    let values = Matrix::from_rows(&rows)?;
    let values = if rows.is_empty() {
        Matrix::zeros(0, sae.width())
    } else {
        values
    };
    FeatureMatrix::new(values, docs.iter().map(|(id, _)| *id).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub final_objective: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda_l1: f64,
    pub convergence: ConvergenceReport,
}

impl ProbeModel {
    /// Decision value `w·x + b`.
    #[must_use]
    pub fn score(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    #[must_use]
    pub fn predict(&self, x: &[f64]) -> bool {
        self.score(x) > 0.0
    }

    #[must_use]
    pub fn to_container(&self) -> TensorFile {
        let meta = serde_json::json!({
            "width": self.weights.len(),
            "bias": self.bias,
            "lambda_l1": self.lambda_l1,
            "convergence": self.convergence,
        });
        let mut f = TensorFile::new("probe", meta);
        f.push("weights", Tensor::vector(self.weights.clone()));
        f
    }

    pub fn from_container(mut f: TensorFile) -> Result<Self> {
        f.expect_kind("probe")?;
        let width: usize = meta_field(&f.meta, "width")?;
        Ok(Self {
            weights: f.take("weights")?.into_vector("weights", width)?,
            bias: meta_field(&f.meta, "bias")?,
            lambda_l1: meta_field(&f.meta, "lambda_l1")?,
            convergence: meta_field(&f.meta, "convergence")?,
        })
    }
}

fn check_labels(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput(format!(
            "both classes required (positives {pos}, negatives {neg})"
        )));
    }
    Ok((pos, neg))
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss plus `λ‖w‖₁` (bias unpenalized).
#[must_use]
pub fn objective(x: &Matrix, y: &[bool], weights: &[f64], bias: f64, lambda: f64) -> f64 {
    let n = x.rows() as f64;
    let loss: f64 = x
        .row_iter()
        .zip(y)
        .map(|(row, &yi)| {
            let t = dot(row, weights) + bias;
            softplus(t) - if yi { t } else { 0.0 }
        })
        .sum::<f64>()
        / n;
    loss + lambda * weights.iter().map(|w| w.abs()).sum::<f64>()
}

/// Proximal operator of `τ|·|`.
#[inline]
#[must_use]
pub fn soft_threshold(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Largest eigenvalue of `X̃ᵀX̃` (X̃ = X with a ones column) by power iteration.
fn gram_spectral_norm(x: &Matrix, seed: u64) -> f64 {
    let w = x.cols() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..w).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut next = vec![0.0; w];
        for row in x.row_iter() {
            let t = dot(row, &v[..w - 1]) + v[w - 1];
            for (o, &r) in next.iter_mut().zip(row) {
                *o += t * r;
            }
            next[w - 1] += t;
        }
        let n = crate::tensor::norm(&next);
        if n == 0.0 {
            return 0.0;
        }
        let converged = (n - lambda).abs() <= 1e-12 * n;
        lambda = n;
        v = next.into_iter().map(|c| c / n).collect();
        if converged {
            break;
        }
    }
    lambda
}

/// Fit `min mean logistic loss + λ‖w‖₁` by proximal gradient (ISTA) with step `1/L`.
///
/// `L` is `σ_max(X̃)² / (4N)` estimated by power iteration; if a step ever
/// raises the objective, `L` is doubled and the step retried, so the
/// iterates are monotone. The bias starts at the class log-odds. Stops when
/// the objective decrease falls below `tol` or after `max_iter` steps.
pub fn fit_probe(
    features: &FeatureMatrix,
    labels: &[bool],
    lambda_l1: f64,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<ProbeModel> {
    let x = &features.values;
    let (n, w) = x.shape();
    if labels.len() != n {
        return Err(Error::shape("fit_probe labels", n, labels.len()));
    }
    if n < 2 {
        return Err(Error::InvalidInput("fit_probe needs at least two documents".into()));
    }
    if !(lambda_l1 >= 0.0 && lambda_l1.is_finite()) {
        return Err(Error::InvalidConfig("lambda_l1 must be finite and >= 0".into()));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("probe features"));
    }
    let (pos, neg) = check_labels(labels)?;

    let mut lipschitz = (gram_spectral_norm(x, seed) / (4.0 * n as f64)).max(1e-12);
    let mut weights = vec![0.0; w];
    let mut bias = (pos as f64 / neg as f64).ln();
    let mut obj = objective(x, labels, &weights, bias, lambda_l1);
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_w = vec![0.0; w];
    while iterations < max_iter {
        iterations += 1;
        grad_w.fill(0.0);
        let mut grad_b = 0.0;
        for (row, &yi) in x.row_iter().zip(labels) {
            let r = sigmoid(dot(row, &weights) + bias) - if yi { 1.0 } else { 0.0 };
            for (g, &xv) in grad_w.iter_mut().zip(row) {
                *g += r * xv;
            }
            grad_b += r;
        }
        grad_w.iter_mut().for_each(|g| *g /= n as f64);
        grad_b /= n as f64;

        loop {
            let step = 1.0 / lipschitz;
            let cand: Vec<f64> = weights
                .iter()
                .zip(&grad_w)
                .map(|(wv, g)| soft_threshold(wv - step * g, step * lambda_l1))
                .collect();
            let cand_b = bias - step * grad_b;
            let cand_obj = objective(x, labels, &cand, cand_b, lambda_l1);
            if cand_obj <= obj {
                let decrease = obj - cand_obj;
                weights = cand;
                bias = cand_b;
                obj = cand_obj;
                converged = decrease < tol;
                break;
            }
            if lipschitz > 1e300 {
                converged = true;
                break;
            }
            lipschitz *= 2.0;
        }
        if converged {
            break;
        }
    }
    Ok(ProbeModel {
        weights,
        bias,
        lambda_l1,
        convergence: ConvergenceReport {
            iterations,
            final_objective: obj,
            converged,
        },
    })
}

/// Fraction of documents classified correctly.
#[must_use]
pub fn accuracy(probe: &ProbeModel, features: &FeatureMatrix, labels: &[bool]) -> f64 {
    let correct = features
        .values
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| probe.predict(row) == y)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Probe chosen from a λ grid by held-out accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub grid: Vec<f64>,
    pub heldout_accuracy: Vec<f64>,
    pub chosen: f64,
}

/// Fit on `train` for each λ and keep the best held-out accuracy; ties go to the larger λ.
pub fn select_lambda(
    train: (&FeatureMatrix, &[bool]),
    heldout: (&FeatureMatrix, &[bool]),
    grid: &[f64],
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<(ProbeModel, LambdaSelection)> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty lambda grid".into()));
    }
    let mut best: Option<(f64, ProbeModel)> = None;
    let mut accs = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let probe = fit_probe(train.0, train.1, lambda, max_iter, tol, seed)?;
        let acc = accuracy(&probe, heldout.0, heldout.1);
        accs.push(acc);
        let better = match &best {
            None => true,
            Some((a, p)) => acc > *a || (acc == *a && lambda > p.lambda_l1),
        };
        if better {
            best = Some((acc, probe));
        }
    }
    let (_, probe) = best.expect("nonempty grid");
    let chosen = probe.lambda_l1;
    Ok((
        probe,
        LambdaSelection {
            grid: grid.to_vec(),
            heldout_accuracy: accs,
            chosen,
        },
    ))
}

/// Area under the ROC curve via the Mann–Whitney U statistic, ties counted ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc scores"));
    }
    let (pos, neg) = check_labels(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, using midranks for ties (1-based ranks)
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_mid * tied_pos;
        i = j + 1;
    }
    let p = pos as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Latents ranked by signed weight, descending; ties by lower id. `k` is clamped to the width.
pub fn top_latents(probe: &ProbeModel, k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    let mut ranked: Vec<(usize, f64)> = probe.weights.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        other => other,
    });
    ranked.truncate(k.min(probe.weights.len()));
    Ok(ranked)
}

/// CSV with header `latent_id,weight,rank` (1-based rank).
pub fn write_ranking_csv(ranking: &[(usize, f64)], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "latent_id,weight,rank")?;
    for (rank, (id, w)) in ranking.iter().enumerate() {
        writeln!(out, "{id},{w},{}", rank + 1)?;
    }
    Ok(())
}

pub fn save_ranking_csv(ranking: &[(usize, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_ranking_csv(ranking, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
