// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder over residual-stream vectors.
//!
//! `z = act(W_enc · h + b_enc)`, `ĥ = W_dec · z + b_dec`, with `z ≥ 0`.
//! Trained models use ReLU with an ℓ1 penalty; JumpReLU is supported for
//! evaluation of externally supplied weights.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{meta_field, Tensor, TensorFile};
use crate::error::{Error, Result};
use crate::runtime::{HookPoint, Model, TokenSequence};
use crate::tensor::{norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Pre-activations `<= threshold` are gated to zero, others pass unchanged.
    JumpRelu { threshold: Vec<f64> },
}

/// Nonnegative sparse code of one residual vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    /// Wrap values, rejecting negative or non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "latent values must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self(values))
    }

    #[must_use]
    pub fn zeros(width: usize) -> Self {
        Self(vec![0.0; width])
    }

    #[must_use]
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    #[must_use]
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest activation (0 for the empty or all-zero vector).
    #[must_use]
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    /// Number of nonzero latents.
    #[must_use]
    pub fn l0(&self) -> usize {
        self.0.iter().filter(|&&v| v > 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    enc_weight: Matrix,
    enc_bias: Vec<f64>,
    dec_weight: Matrix,
    dec_bias: Vec<f64>,
    activation: Activation,
}

impl SaeModel {
    /// Assemble from raw weights: `enc_weight` is `W × D`, `dec_weight` is `D × W`.
    pub fn new(
        enc_weight: Matrix,
        enc_bias: Vec<f64>,
        dec_weight: Matrix,
        dec_bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let (w, d) = enc_weight.shape();
        if w == 0 || d == 0 {
            return Err(Error::InvalidConfig("SAE width and d_model must be >= 1".into()));
        }
        if enc_bias.len() != w {
            return Err(Error::shape("SaeModel enc_bias", w, enc_bias.len()));
        }
        if dec_weight.shape() != (d, w) {
            return Err(Error::shape("SaeModel dec_weight", format!("({d}, {w})"), format!("{:?}", dec_weight.shape())));
        }
        if dec_bias.len() != d {
            return Err(Error::shape("SaeModel dec_bias", d, dec_bias.len()));
        }
        if let Activation::JumpRelu { threshold } = &activation {
            if threshold.len() != w {
                return Err(Error::shape("SaeModel threshold", w, threshold.len()));
            }
            if threshold.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                return Err(Error::InvalidConfig("JumpReLU thresholds must be finite and >= 0".into()));
            }
        }
        let finite = enc_weight.all_finite()
            && dec_weight.all_finite()
            && enc_bias.iter().chain(&dec_bias).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("SAE weights"));
        }
        Ok(Self {
            enc_weight,
            enc_bias,
            dec_weight,
            dec_bias,
            activation,
        })
    }

    #[must_use]
    pub fn width(&self) -> usize {
        self.enc_weight.rows()
    }

    #[must_use]
    pub fn d_model(&self) -> usize {
        self.enc_weight.cols()
    }

    #[must_use]
    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    #[must_use]
    pub fn enc_weight(&self) -> &Matrix {
        &self.enc_weight
    }

    #[must_use]
    pub fn enc_bias(&self) -> &[f64] {
        &self.enc_bias
    }

    #[must_use]
    pub fn dec_weight(&self) -> &Matrix {
        &self.dec_weight
    }

    #[must_use]
    pub fn dec_bias(&self) -> &[f64] {
        &self.dec_bias
    }

    /// Column `j` of the decoder: the residual direction written by latent `j`.
    #[must_use]
    pub fn decoder_column(&self, j: usize) -> Vec<f64> {
        self.dec_weight.column(j)
    }

    pub fn pre_activation(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.d_model() {
            return Err(Error::shape("SaeModel::encode", self.d_model(), h.len()));
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("SAE input"));
        }
        let mut pre = self.enc_weight.matvec(h)?;
        for (p, b) in pre.iter_mut().zip(&self.enc_bias) {
            *p += b;
        }
        Ok(pre)
    }

    pub fn encode(&self, h: &[f64]) -> Result<LatentVector> {
        let mut z = self.pre_activation(h)?;
        match &self.activation {
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::JumpRelu { threshold } => {
                for (v, &t) in z.iter_mut().zip(threshold) {
                    // a zero threshold still gates negatives
                    if *v <= t || *v <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(LatentVector(z))
    }

    pub fn decode(&self, z: &LatentVector) -> Result<Vec<f64>> {
        self.decode_raw(z.values())
    }

    /// Decode an arbitrary (possibly signed) code vector.
    pub fn decode_raw(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.width() {
            return Err(Error::shape("SaeModel::decode", self.width(), z.len()));
        }
        let mut h = self.dec_weight.matvec(z)?;
        for (x, b) in h.iter_mut().zip(&self.dec_bias) {
            *x += b;
        }
        Ok(h)
    }

    /// Encode every row; result is `rows × width`.
    pub fn encode_rows(&self, acts: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(acts.rows(), self.width());
        for (i, row) in acts.row_iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.encode(row)?.values());
        }
        Ok(out)
    }

    /// Decode every row of a latent matrix; result is `rows × d_model`.
    pub fn decode_rows(&self, latents: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(latents.rows(), self.d_model());
        for (i, row) in latents.row_iter().enumerate() {
            out.row_mut(i).copy_from_slice(&self.decode_raw(row)?);
        }
        Ok(out)
    }

    /// Mean loss `‖ĥ − h‖² + λ‖z‖₁` over the rows of `batch` and its gradients.
    ///
    /// Uses the ReLU encoder regardless of the stored activation.
    pub fn loss_and_gradients(&self, batch: &Matrix, sparsity_weight: f64) -> Result<(f64, SaeGradients)> {
        let (w, d) = (self.width(), self.d_model());
        if batch.cols() != d {
            return Err(Error::shape("SaeModel::loss_and_gradients", d, batch.cols()));
        }
        let b = batch.rows().max(1) as f64;
        let mut grads = SaeGradients::zeros(w, d);
        let mut loss = 0.0;
        let mut pre = vec![0.0; w];
        let mut z = vec![0.0; w];
        let mut err = vec![0.0; d];
        let mut dz = vec![0.0; w];
        for x in batch.row_iter() {
            for j in 0..w {
                pre[j] = crate::tensor::dot(self.enc_weight.row(j), x) + self.enc_bias[j];
                z[j] = pre[j].max(0.0);
            }
            for i in 0..d {
                let recon = crate::tensor::dot(self.dec_weight.row(i), &z) + self.dec_bias[i];
                err[i] = recon - x[i];
            }
            loss += err.iter().map(|e| e * e).sum::<f64>() + sparsity_weight * z.iter().sum::<f64>();

            // d/d recon = 2 e / B
            for i in 0..d {
                let g = 2.0 * err[i] / b;
                grads.dec_bias[i] += g;
                let row = grads.dec_weight.row_mut(i);
                for j in 0..w {
                    row[j] += g * z[j];
                }
            }
            dz.fill(sparsity_weight / b);
            for i in 0..d {
                let g = 2.0 * err[i] / b;
                for (dzj, &wd) in dz.iter_mut().zip(self.dec_weight.row(i)) {
                    *dzj += g * wd;
                }
            }
            for j in 0..w {
                if pre[j] > 0.0 {
                    grads.enc_bias[j] += dz[j];
                    for (gw, &xi) in grads.enc_weight.row_mut(j).iter_mut().zip(x) {
                        *gw += dz[j] * xi;
                    }
                }
            }
        }
        Ok((loss / b, grads))
    }

    fn apply_step(&mut self, grads: &SaeGradients, lr: f64) {
        let pairs: [(&mut [f64], &[f64]); 4] = [
            (self.enc_weight.as_mut_slice(), grads.enc_weight.as_slice()),
            (&mut self.enc_bias, &grads.enc_bias),
            (self.dec_weight.as_mut_slice(), grads.dec_weight.as_slice()),
            (&mut self.dec_bias, &grads.dec_bias),
        ];
        for (p, g) in pairs {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
    }

    fn normalize_decoder(&mut self) {
        for j in 0..self.width() {
            let n = norm(&self.dec_weight.column(j));
            if n > 0.0 {
                for i in 0..self.d_model() {
                    let v = self.dec_weight.get(i, j);
                    self.dec_weight.set(i, j, v / n);
                }
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(TensorFile::load(path)?)
    }

    #[must_use]
    pub fn to_container(&self) -> TensorFile {
        let kind = match self.activation {
            Activation::Relu => "relu",
            Activation::JumpRelu { .. } => "jumprelu",
        };
        let meta = serde_json::json!({
            "width": self.width(),
            "d_model": self.d_model(),
            "activation": kind,
        });
        let mut f = TensorFile::new("sae", meta);
        f.push("enc_weight", Tensor::matrix(&self.enc_weight));
        f.push("enc_bias", Tensor::vector(self.enc_bias.clone()));
        f.push("dec_weight", Tensor::matrix(&self.dec_weight));
        f.push("dec_bias", Tensor::vector(self.dec_bias.clone()));
        if let Activation::JumpRelu { threshold } = &self.activation {
            f.push("threshold", Tensor::vector(threshold.clone()));
        }
        f
    }

    pub fn from_container(mut f: TensorFile) -> Result<Self> {
        f.expect_kind("sae")?;
        let width: usize = meta_field(&f.meta, "width")?;
        let d: usize = meta_field(&f.meta, "d_model")?;
        let kind: String = meta_field(&f.meta, "activation")?;
        let enc_weight = f.take("enc_weight")?.into_matrix("enc_weight", width, d)?;
        let enc_bias = f.take("enc_bias")?.into_vector("enc_bias", width)?;
        let dec_weight = f.take("dec_weight")?.into_matrix("dec_weight", d, width)?;
        let dec_bias = f.take("dec_bias")?.into_vector("dec_bias", d)?;
        let activation = match kind.as_str() {
            "relu" => Activation::Relu,
            "jumprelu" => Activation::JumpRelu {
                threshold: f.take("threshold")?.into_vector("threshold", width)?,
            },
            other => return Err(Error::Format(format!("unknown SAE activation `{other}`"))),
        };
        if let Some(extra) = f.names().first() {
            return Err(Error::Format(format!("unexpected tensor `{extra}` in SAE file")));
        }
        Self::new(enc_weight, enc_bias, dec_weight, dec_bias, activation)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

/// Gradients with the same shapes as the SAE parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGradients {
    pub enc_weight: Matrix,
    pub enc_bias: Vec<f64>,
    pub dec_weight: Matrix,
    pub dec_bias: Vec<f64>,
}

impl SaeGradients {
    fn zeros(w: usize, d: usize) -> Self {
        Self {
            enc_weight: Matrix::zeros(w, d),
            enc_bias: vec![0.0; w],
            dec_weight: Matrix::zeros(d, w),
            dec_bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainConfig {
    pub sparsity_weight: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity_weight >= 0.0 && self.sparsity_weight.is_finite()) {
            return Err(Error::InvalidConfig("sparsity_weight must be finite and >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Minibatch reconstruction error `mean ‖ĥ − h‖²` before each step.
    pub mse_curve: Vec<f64>,
    /// Mean number of active latents over the training data after training.
    pub mean_l0: f64,
    /// Latents that never fire on the training data.
    pub dead_latents: Vec<usize>,
    /// Reconstruction MSE over the full training set after training.
    pub final_mse: f64,
}

/// Train a ReLU SAE with plain SGD and per-step decoder column renormalization.
pub fn train(cfg: &SaeTrainConfig, width: usize, activations: &Matrix) -> Result<(SaeModel, TrainStats)> {
    cfg.validate()?;
    if width == 0 {
        return Err(Error::InvalidConfig("SAE width must be >= 1".into()));
    }
    let (m, d) = activations.shape();
    if d == 0 {
        return Err(Error::InvalidInput("activations have zero columns".into()));
    }
    if m < cfg.batch_size {
        return Err(Error::InvalidInput(format!(
            "{m} activation rows is fewer than batch_size {}",
            cfg.batch_size
        )));
    }
    if !activations.all_finite() {
        return Err(Error::NonFinite("SAE training activations"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite sd");
    let enc: Vec<f64> = (0..width * d).map(|_| normal.sample(&mut rng)).collect();
    let enc_weight = Matrix::from_vec(width, d, enc)?;
    let dec_weight = enc_weight.transpose();
    let mut dec_bias = vec![0.0; d];
    for row in activations.row_iter() {
        for (b, x) in dec_bias.iter_mut().zip(row) {
            *b += x / m as f64;
        }
    }
    let mut sae = SaeModel::new(enc_weight, vec![0.0; width], dec_weight, dec_bias, Activation::Relu)?;
    sae.normalize_decoder();

    let mut order: Vec<usize> = (0..m).collect();
    let mut cursor = m;
    let mut batch = Matrix::zeros(cfg.batch_size, d);
    let mut mse_curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        for r in 0..cfg.batch_size {
            if cursor == m {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.row_mut(r).copy_from_slice(activations.row(order[cursor]));
            cursor += 1;
        }
        let (loss, grads) = sae.loss_and_gradients(&batch, cfg.sparsity_weight)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("SAE training loss (learning rate too large?)"));
        }
        mse_curve.push(reconstruction_mse(&sae, &batch)?);
        sae.apply_step(&grads, cfg.learning_rate);
        sae.normalize_decoder();
    }

    let latents = sae.encode_rows(activations)?;
    let mut fired = vec![false; width];
    let mut total_l0 = 0usize;
    for row in latents.row_iter() {
        for (j, &v) in row.iter().enumerate() {
            if v > 0.0 {
                fired[j] = true;
                total_l0 += 1;
            }
        }
    }
    let stats = TrainStats {
        mse_curve,
        mean_l0: total_l0 as f64 / m as f64,
        dead_latents: (0..width).filter(|&j| !fired[j]).collect(),
        final_mse: reconstruction_mse(&sae, activations)?,
    };
    Ok((sae, stats))
}

/// Mean squared reconstruction error `mean_rows ‖ĥ − h‖²`.
pub fn reconstruction_mse(sae: &SaeModel, data: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for row in data.row_iter() {
        let recon = sae.decode(&sae.encode(row)?)?;
        total += recon.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / data.rows().max(1) as f64)
}

/// Stack the residual vectors of every token of every sequence at `hook`,
/// in sequence order; the training set for an SAE at that site.
pub fn activation_dataset(model: &Model, hook: HookPoint, docs: &[TokenSequence]) -> Result<Matrix> {
    use rayon::prelude::*;
    let per_doc: Vec<Matrix> = docs.par_iter().map(|t| model.capture(t, hook)).collect::<Result<_>>()?;
    let rows: usize = per_doc.iter().map(Matrix::rows).sum();
    let mut data = Vec::with_capacity(rows * model.d_model());
    for m in per_doc {
        data.extend_from_slice(m.as_slice());
    }
    Matrix::from_vec(rows, model.d_model(), data)
}

/// Coefficient of determination of the reconstruction, pooled over all coordinates.
pub fn reconstruction_r2(sae: &SaeModel, data: &Matrix) -> Result<f64> {
    let (m, d) = data.shape();
    let mut mean = vec![0.0; d];
    for row in data.row_iter() {
        for (a, x) in mean.iter_mut().zip(row) {
            *a += x / m as f64;
        }
    }
    let total: f64 = data
        .row_iter()
        .map(|row| row.iter().zip(&mean).map(|(x, u)| (x - u) * (x - u)).sum::<f64>())
        .sum();
    let resid = reconstruction_mse(sae, data)? * m as f64;
    Ok(1.0 - resid / total)
}
