//! Gaussian-encoder variational autoencoder with an mse reconstruction term
//! and closed-form KL against the standard normal prior.
//!
//! The encoder emits `2k` values per sample: the first `k` are `μ`, the last
//! `k` are `log σ²`. Training draws one `δ ~ N(0, I)` per sample and step and
//! decodes `z = μ + σ ⊙ δ`; `δ` itself carries no gradient.

use std::fs;
use std::path::Path;

use crate::datasets::Manifest;
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, Mlp, MlpGradients, OptimizerState};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Bounds applied to encoder `log σ²` outputs before exponentiation.
pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 20.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    /// `batch × k`.
    pub mu: Tensor,
    /// `batch × k`, `log σ²`.
    pub log_var: Tensor,
}

impl GaussianParams {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        mu.dims2()?;
        mu.expect_same_shape(&log_var, "gaussian params")?;
        if !log_var.all_finite() || !mu.all_finite() {
            return Err(Error::NonFinite("posterior parameters".into()));
        }
        Ok(Self { mu, log_var })
    }

    pub fn batch(&self) -> usize {
        self.mu.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.cols()
    }

    /// `σ²`, with the upper overflow guard applied.
    pub fn variance(&self) -> Tensor {
        self.log_var.map(|lv| lv.min(LOG_VAR_MAX).exp())
    }

    pub fn std(&self) -> Tensor {
        self.log_var.map(|lv| (0.5 * lv.min(LOG_VAR_MAX)).exp())
    }
}

/// `z = μ + exp(log σ² / 2) ⊙ δ` with `δ` drawn row-major from `rng`.
pub fn reparameterize(params: &GaussianParams, rng: &mut Rng) -> Result<Tensor> {
    Ok(reparameterize_with_noise(params, rng)?.0)
}

fn reparameterize_with_noise(params: &GaussianParams, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let noise = crate::rng::gaussian_sample(rng, params.mu.shape(), 0.0, 1.0)?;
    let sigma = params.std();
    let mut z = params.mu.clone();
    for ((zv, s), d) in z.data_mut().iter_mut().zip(sigma.data()).zip(noise.data()) {
        *zv += s * d;
    }
    Ok((z, noise))
}

/// Per-sample `½ Σ_j (μ² + σ² − log σ² − 1)`.
pub fn kl_closed_form(params: &GaussianParams) -> Vec<f64> {
    params
        .mu
        .row_iter()
        .zip(params.log_var.row_iter())
        .map(|(mu, lv)| {
            0.5 * mu
                .iter()
                .zip(lv)
                .map(|(m, l)| m * m + l.min(LOG_VAR_MAX).exp() - l - 1.0)
                .sum::<f64>()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceLaw {
    /// `mean(μ²) + mean(σ²)` over samples and components; 1 for a
    /// well-regularized posterior.
    pub law: f64,
    /// `‖mean_samples(μ)‖ / √k`; 0 for a centered latent space.
    pub mu_mean_norm: f64,
}

pub fn variance_law(params: &GaussianParams) -> Result<VarianceLaw> {
    let n = params.batch();
    let k = params.latent_dim();
    if n == 0 || k == 0 {
        return Err(Error::invalid("variance law of an empty batch"));
    }
    let mu2 = params.mu.data().iter().map(|m| m * m).sum::<f64>();
    let var = params.variance().sum();
    let law = (mu2 + var) / (n * k) as f64;
    let mean_mu = params.mu.column_means();
    let norm = mean_mu.iter().map(|m| m * m).sum::<f64>().sqrt();
    Ok(VarianceLaw {
        law,
        mu_mean_norm: norm / (k as f64).sqrt(),
    })
}

/// The averaged KL written as cross-entropy minus entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyDecomposition {
    /// Mean over samples of `H(Q(z|x)) = ½ Σ_j log(2πe σ_j²)`.
    pub avg_entropy: f64,
    /// Mean over samples of `H(Q(z|x), N(0, I)) = ½ Σ_j (log 2π + μ_j² + σ_j²)`.
    pub cross_entropy: f64,
    /// `|(cross_entropy − avg_entropy) − mean KL|`.
    pub kl_consistency_residual: f64,
}

pub fn entropy_decomposition(params: &GaussianParams) -> EntropyDecomposition {
    let n = params.batch().max(1) as f64;
    let mut entropy = 0.0;
    let mut cross = 0.0;
    for (mu, lv) in params.mu.row_iter().zip(params.log_var.row_iter()) {
        for (m, l) in mu.iter().zip(lv) {
            let l = l.min(LOG_VAR_MAX);
            entropy += 0.5 * (LN_2PI + 1.0 + l);
            cross += 0.5 * (LN_2PI + m * m + l.exp());
        }
    }
    let avg_entropy = entropy / n;
    let cross_entropy = cross / n;
    let kl = kl_closed_form(params).iter().sum::<f64>() / n;
    EntropyDecomposition {
        avg_entropy,
        cross_entropy,
        kl_consistency_residual: ((cross_entropy - avg_entropy) - kl).abs(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean over samples and features.
    pub mse: f64,
    /// Mean over samples of the per-sample KL.
    pub kl: f64,
    /// KL weight this breakdown was computed with.
    pub beta: f64,
    /// `mse + beta * kl`.
    pub total: f64,
    pub variance_law: f64,
    pub mu_mean_norm: f64,
}

#[derive(Debug, Clone)]
pub struct VaeGradients {
    pub encoder: MlpGradients,
    pub decoder: MlpGradients,
}

impl VaeGradients {
    /// Encoder then decoder parameters, matching [`VaeModel::params`].
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v
    }
}

/// Layer widths and activations for a symmetric MLP VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeArchitecture {
    pub data_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl VaeArchitecture {
    pub fn mlp(data_dim: usize, hidden: &[usize], latent_dim: usize) -> Self {
        Self {
            data_dim,
            hidden: hidden.to_vec(),
            latent_dim,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Sigmoid,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent_dim: usize,
    pub beta: f64,
}

impl VaeModel {
    pub fn new(arch: &VaeArchitecture, beta: f64, rng: &mut Rng) -> Result<Self> {
        if arch.latent_dim == 0 || arch.data_dim == 0 {
            return Err(Error::invalid("latent and data dimensions must be positive"));
        }
        let mut enc_sizes = vec![arch.data_dim];
        enc_sizes.extend(&arch.hidden);
        enc_sizes.push(2 * arch.latent_dim);
        let mut enc_acts = vec![arch.hidden_activation; arch.hidden.len()];
        enc_acts.push(Activation::Identity);

        let mut dec_sizes = vec![arch.latent_dim];
        dec_sizes.extend(arch.hidden.iter().rev());
        dec_sizes.push(arch.data_dim);
        let mut dec_acts = vec![arch.hidden_activation; arch.hidden.len()];
        dec_acts.push(arch.output_activation);

        let encoder = Mlp::new(&enc_sizes, &enc_acts, rng)?;
        let decoder = Mlp::new(&dec_sizes, &dec_acts, rng)?;
        Self::from_parts(encoder, decoder, beta)
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, beta: f64) -> Result<Self> {
        if !encoder.output_dim().is_multiple_of(2) {
            return Err(Error::invalid("encoder must emit an even number of outputs"));
        }
        let latent_dim = encoder.output_dim() / 2;
        if decoder.input_dim() != latent_dim {
            return Err(Error::invalid(format!(
                "decoder expects {} inputs but latent dimension is {latent_dim}",
                decoder.input_dim()
            )));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::invalid(format!("beta must be finite and >= 0, got {beta}")));
        }
        Ok(Self {
            encoder,
            decoder,
            latent_dim,
            beta,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }

    fn split_head(&self, raw: &Tensor) -> Result<GaussianParams> {
        let (mu, lv) = raw.split_cols(self.latent_dim)?;
        let lv = lv.map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        GaussianParams::new(mu, lv)
    }

    /// Posterior moments; `log σ²` is clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn encode(&self, x: &Tensor) -> Result<GaussianParams> {
        self.split_head(&self.encoder.predict(x)?)
    }

    /// Posterior moments with only the upper `log σ²` guard, so near-deterministic
    /// posteriors keep their tiny variances.
    pub fn encode_unclamped(&self, x: &Tensor) -> Result<GaussianParams> {
        let (mu, lv) = self.encoder.predict(x)?.split_cols(self.latent_dim)?;
        GaussianParams::new(mu, lv.map(|v| v.min(LOG_VAR_MAX)))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.predict(z)
    }

    /// Deterministic reconstruction through the posterior mean.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?.mu)
    }

    pub fn loss(&self, x: &Tensor, rng: &mut Rng) -> Result<LossBreakdown> {
        let params = self.encode(x)?;
        let (z, _) = reparameterize_with_noise(&params, rng)?;
        let x_hat = self.decode(&z)?;
        let mse = crate::analysis::mse(x, &x_hat)?;
        self.breakdown(mse, &params, self.beta)
    }

    fn breakdown(&self, mse: f64, params: &GaussianParams, beta: f64) -> Result<LossBreakdown> {
        let kls = kl_closed_form(params);
        let kl = kls.iter().sum::<f64>() / kls.len() as f64;
        let law = variance_law(params)?;
        let total = mse + beta * kl;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss (mse {mse}, kl {kl})")));
        }
        Ok(LossBreakdown {
            mse,
            kl,
            beta,
            total,
            variance_law: law.law,
            mu_mean_norm: law.mu_mean_norm,
        })
    }

    /// Loss at the model's own `beta` plus gradients of `total` for every
    /// parameter.
    pub fn loss_and_grad(&self, x: &Tensor, rng: &mut Rng) -> Result<(LossBreakdown, VaeGradients)> {
        self.loss_and_grad_with_beta(x, rng, self.beta)
    }

    pub fn loss_and_grad_with_beta(
        &self,
        x: &Tensor,
        rng: &mut Rng,
        beta: f64,
    ) -> Result<(LossBreakdown, VaeGradients)> {
        self.forward_backward(x, rng, beta).map(|(lb, g, _)| (lb, g))
    }

    fn forward_backward(
        &self,
        x: &Tensor,
        rng: &mut Rng,
        beta: f64,
    ) -> Result<(LossBreakdown, VaeGradients, GaussianParams)> {
        let (raw, enc_cache) = self.encoder.forward(x)?;
        let params = self.split_head(&raw)?;
        let (z, noise) = reparameterize_with_noise(&params, rng)?;
        let (x_hat, dec_cache) = self.decoder.forward(&z)?;

        let n = x.rows() as f64;
        let count = x.len() as f64;
        let mut sq = 0.0;
        let mut d_out = x_hat.clone();
        for (g, xv) in d_out.data_mut().iter_mut().zip(x.data()) {
            let diff = *g - xv;
            sq += diff * diff;
            *g = 2.0 * diff / count;
        }
        let breakdown = self.breakdown(sq / count, &params, beta)?;

        let dec_grads = self.decoder.backward(&dec_cache, &d_out)?;
        let dz = &dec_grads.input;

        let k = self.latent_dim;
        let mut d_raw = Tensor::zeros(raw.shape());
        let sigma = params.std();
        for i in 0..x.rows() {
            let raw_row = raw.row(i);
            let dz_row = dz.row(i);
            let mu_row = params.mu.row(i);
            let lv_row = params.log_var.row(i);
            let s_row = sigma.row(i);
            let e_row = noise.row(i);
            let out = d_raw.row_mut(i);
            for j in 0..k {
                out[j] = dz_row[j] + beta * mu_row[j] / n;
                let clamped = raw_row[k + j] < LOG_VAR_MIN || raw_row[k + j] > LOG_VAR_MAX;
                out[k + j] = if clamped {
                    0.0
                } else {
                    dz_row[j] * e_row[j] * 0.5 * s_row[j]
                        + beta * 0.5 * (lv_row[j].exp() - 1.0) / n
                };
            }
        }
        let enc_grads = self.encoder.backward(&enc_cache, &d_raw)?;
        Ok((
            breakdown,
            VaeGradients {
                encoder: enc_grads,
                decoder: dec_grads,
            },
            params,
        ))
    }

    /// Mini-batch Adam training; returns one breakdown per epoch.
    ///
    /// Epoch breakdowns average the batch values weighted by batch size; the
    /// variance law uses every posterior seen during the epoch.
    pub fn train(&mut self, data: &Tensor, config: &TrainConfig, rng: &mut Rng) -> Result<Vec<LossBreakdown>> {
        config.validate()?;
        let (n, m) = data.dims2()?;
        if n == 0 {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        if m != self.data_dim() {
            return Err(Error::ShapeMismatch {
                op: "vae train",
                expected: vec![n, self.data_dim()],
                actual: data.shape().to_vec(),
            });
        }
        let mut opt = OptimizerState::new(config.adam, self.params());
        let mut history = Vec::with_capacity(config.epochs);
        let k = self.latent_dim;
        for epoch in 0..config.epochs {
            let beta = config.beta_at(self.beta, epoch);
            let order: Vec<usize> = if config.shuffle {
                rng.permutation(n)
            } else {
                (0..n).collect()
            };
            let mut mse_acc = 0.0;
            let mut kl_acc = 0.0;
            let mut mu2 = 0.0;
            let mut var = 0.0;
            let mut mu_sum = vec![0.0; k];
            for (b, idx) in order.chunks(config.batch_size).enumerate() {
                let batch = data.select_rows(idx);
                let diverged = |detail: String| Error::Divergence {
                    epoch,
                    batch: b,
                    detail,
                };
                let (lb, grads, params) = self
                    .forward_backward(&batch, rng, beta)
                    .map_err(|e| diverged(e.to_string()))?;
                let w = idx.len() as f64;
                mse_acc += lb.mse * w;
                kl_acc += lb.kl * w;
                mu2 += params.mu.data().iter().map(|v| v * v).sum::<f64>();
                var += params.variance().sum();
                for row in params.mu.row_iter() {
                    for (s, v) in mu_sum.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                let g = grads.params();
                let mut p = self.params_mut();
                opt.step(&mut p, &g).map_err(|e| diverged(e.to_string()))?;
            }
            let mse = mse_acc / n as f64;
            let kl = kl_acc / n as f64;
            let norm = mu_sum.iter().map(|s| (s / n as f64).powi(2)).sum::<f64>().sqrt();
            history.push(LossBreakdown {
                mse,
                kl,
                beta,
                total: mse + beta * kl,
                variance_law: (mu2 + var) / (n * k) as f64,
                mu_mean_norm: norm / (k as f64).sqrt(),
            });
        }
        Ok(history)
    }

    /// Writes `manifest.txt` plus one tensor dump per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest::default();
        manifest.set("format", "varloss-vae-checkpoint/1");
        manifest.set("latent_dim", self.latent_dim);
        manifest.set("beta", self.beta);
        self.encoder.save(dir, "encoder", &mut manifest)?;
        self.decoder.save(dir, "decoder", &mut manifest)?;
        manifest.write(&dir.join("manifest.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(&dir.join("manifest.txt"))?;
        let encoder = Mlp::load(dir, "encoder", &manifest)?;
        let decoder = Mlp::load(dir, "decoder", &manifest)?;
        let model = Self::from_parts(encoder, decoder, manifest.parse("beta")?)?;
        let declared: usize = manifest.parse("latent_dim")?;
        if declared != model.latent_dim {
            return Err(Error::format(
                dir.join("manifest.txt"),
                format!("latent_dim {declared} disagrees with encoder width"),
            ));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Linear KL warm-up: epoch `e` uses `beta * min(1, (e + 1) / warmup)`.
    pub beta_warmup_epochs: usize,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 100,
            adam: AdamConfig::default(),
            beta_warmup_epochs: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn beta_at(&self, beta: f64, epoch: usize) -> f64 {
        if self.beta_warmup_epochs == 0 {
            beta
        } else {
            beta * ((epoch + 1) as f64 / self.beta_warmup_epochs as f64).min(1.0)
        }
    }
}
