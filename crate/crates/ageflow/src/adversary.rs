//! Latent-space discriminator: two spectrally normalized 512-unit dense
//! layers with leaky-ReLU (slope 0.2), a scalar adversarial head, and an
//! age-classification head, plus the least-squares adversarial losses.

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::{Param, ParamRefs, Rng, Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

// ── loss weights ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub akd: f64,
    pub al: f64,
    pub acl: f64,
    pub cl: f64,
    pub acl_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { akd: 1.0, al: 1.0, acl: 1.0, cl: 0.01, acl_d: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("akd", self.akd),
            ("al", self.al),
            ("acl", self.acl),
            ("cl", self.cl),
            ("acl_d", self.acl_d),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

// ── spectral normalization ──────────────────────────────────────────────

/// Power-iteration estimate of the top singular triplet starting from u0.
pub fn power_iterate<F: Scalar>(w: &Tensor<F>, u0: &Tensor<F>, iters: usize) -> (f64, Tensor<F>, Tensor<F>) {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert!(iters >= 1, "power_iterate needs at least one iteration");
    let mut u = u0.clone();
    let mut v = Tensor::zeros(&[cols]);
    for _ in 0..iters {
        // v = normalize(W^T u)
        ops::gemm_tn(cols, rows, 1, w.data(), u.data(), v.data_mut(), false);
        normalize(&mut v);
        // u = normalize(W v)
        ops::gemm(rows, cols, 1, w.data(), v.data(), u.data_mut());
        normalize(&mut u);
    }
    // sigma = u^T W v
    let mut wv = vec![F::zero(); rows];
    ops::gemm(rows, cols, 1, w.data(), v.data(), &mut wv);
    let sigma: f64 = u.data().iter().zip(&wv).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    (sigma, u, v)
}

fn normalize<F: Scalar>(v: &mut Tensor<F>) {
    let norm = v.data().iter().fold(0.0, |acc, x| acc + x.as_f64() * x.as_f64()).sqrt();
    let inv = F::from_f64(1.0 / (norm + 1e-12));
    v.scale_assign(inv);
}

/// W_hat = W / sigma_max with sigma estimated by power iteration; returns
/// the updated left-vector estimate for persistence.
pub fn spectral_normalize<F: Scalar>(
    w: &Tensor<F>,
    u: &Tensor<F>,
    iters: usize,
) -> (Tensor<F>, Tensor<F>) {
    let (sigma, u_new, _) = power_iterate(w, u, iters);
    (w.scale(F::from_f64(1.0 / sigma)), u_new)
}

/// Dense layer whose weight is spectrally normalized on every forward.
#[derive(Debug, Clone)]
pub struct SpectralDense<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub u: Tensor<F>,
}

pub struct SpectralCache<F> {
    input: Tensor<F>,
    w_hat: Tensor<F>,
    u: Tensor<F>,
    v: Tensor<F>,
    sigma: f64,
}

impl<F: Scalar> SpectralDense<F> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / d_in as f64).sqrt();
        let weight = Param::new(rng.normal_tensor(&[d_out, d_in], std));
        let mut u = rng.normal_tensor::<F>(&[d_out], 1.0);
        normalize(&mut u);
        SpectralDense { weight, bias: Param::zeros(&[d_out]), u }
    }

    /// Advance the persisted power-iteration vector once (one per
    /// discriminator training step).
    pub fn persist_power_iteration(&mut self) {
        let (_, u_new, _) = power_iterate(&self.weight.value, &self.u, 1);
        self.u = u_new;
    }

    pub fn forward_cached(&self, x: &Tensor<F>, iters: usize) -> Result<(Tensor<F>, SpectralCache<F>)> {
        let (sigma, u, v) = power_iterate(&self.weight.value, &self.u, iters);
        let w_hat = self.weight.value.scale(F::from_f64(1.0 / sigma));
        let y = ops::dense(x, &w_hat, &self.bias.value)?;
        Ok((y, SpectralCache { input: x.clone(), w_hat, u, v, sigma }))
    }

    /// Backward through y = x W_hat^T + b with W_hat = W / sigma(W),
    /// treating the power-iteration vectors as constants:
    /// dW = dW_hat / sigma - (sum(dW_hat . W) / sigma^2) u v^T.
    pub fn backward(&mut self, cache: &SpectralCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let (dx, dw_hat, db) = ops::dense_backward(&cache.input, &cache.w_hat, dy);
        self.bias.accumulate(&db);

        let inv_sigma = F::from_f64(1.0 / cache.sigma);
        let dot: f64 = dw_hat
            .data()
            .iter()
            .zip(self.weight.value.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        let coeff = F::from_f64(dot / (cache.sigma * cache.sigma));
        let (rows, cols) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        for i in 0..rows {
            let ui = cache.u.data()[i];
            for j in 0..cols {
                let g = dw_hat.data()[i * cols + j] * inv_sigma - coeff * ui * cache.v.data()[j];
                let slot = &mut self.weight.grad.data_mut()[i * cols + j];
                *slot = *slot + g;
            }
        }
        dx
    }
}

// ── discriminator ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Discriminator<F> {
    pub dense1: SpectralDense<F>,
    pub dense2: SpectralDense<F>,
    pub head_gan: SpectralDense<F>,
    pub head_age: SpectralDense<F>,
    pub groups: usize,
}

pub struct DiscriminatorCache<F> {
    c1: SpectralCache<F>,
    h1_pre: Tensor<F>,
    c2: SpectralCache<F>,
    h2_pre: Tensor<F>,
    cg: SpectralCache<F>,
    ca: SpectralCache<F>,
}

impl<F: Scalar> Discriminator<F> {
    pub fn new(input_dim: usize, groups: usize, rng: &mut Rng) -> Self {
        Self::with_hidden(input_dim, groups, 512, rng)
    }

    /// Reduced trunk width for verification suites; production uses 512.
    pub fn with_hidden(input_dim: usize, groups: usize, hidden: usize, rng: &mut Rng) -> Self {
        Discriminator {
            dense1: SpectralDense::new(input_dim, hidden, rng),
            dense2: SpectralDense::new(hidden, hidden, rng),
            head_gan: SpectralDense::new(hidden, 1, rng),
            head_age: SpectralDense::new(hidden, groups, rng),
            groups,
        }
    }

    /// (scores [N], age logits [N, n]). `sn_iters` is 1 in training; use a
    /// large value to converge the singular vectors for verification.
    pub fn forward_cached(
        &self,
        z_flat: &Tensor<F>,
        sn_iters: usize,
    ) -> Result<(Tensor<F>, Tensor<F>, DiscriminatorCache<F>)> {
        let slope = F::from_f64(LEAKY_SLOPE);
        let (h1_pre, c1) = self.dense1.forward_cached(z_flat, sn_iters)?;
        let h1 = ops::leaky_relu(&h1_pre, slope);
        let (h2_pre, c2) = self.dense2.forward_cached(&h1, sn_iters)?;
        let h2 = ops::leaky_relu(&h2_pre, slope);
        let (score, cg) = self.head_gan.forward_cached(&h2, sn_iters)?;
        let (logits, ca) = self.head_age.forward_cached(&h2, sn_iters)?;
        let n = z_flat.shape()[0];
        Ok((
            score.reshape(&[n]),
            logits,
            DiscriminatorCache { c1, h1_pre, c2, h2_pre, cg, ca },
        ))
    }

    pub fn forward(&self, z_flat: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let (s, l, _) = self.forward_cached(z_flat, 1)?;
        Ok((s, l))
    }

    /// Advance every layer's persisted power-iteration vector once.
    pub fn persist_power_iteration(&mut self) {
        self.dense1.persist_power_iteration();
        self.dense2.persist_power_iteration();
        self.head_gan.persist_power_iteration();
        self.head_age.persist_power_iteration();
    }

    /// Backward from (dscore [N], dlogits [N,n]) to the input gradient.
    pub fn backward(
        &mut self,
        cache: &DiscriminatorCache<F>,
        dscore: &Tensor<F>,
        dlogits: &Tensor<F>,
    ) -> Tensor<F> {
        let slope = F::from_f64(LEAKY_SLOPE);
        let n = dscore.len();
        let dscore2 = dscore.clone().reshape(&[n, 1]);
        let dh2_gan = self.head_gan.backward(&cache.cg, &dscore2);
        let dh2_age = self.head_age.backward(&cache.ca, dlogits);
        let dh2 = dh2_gan.add(&dh2_age);
        let dh2_pre = ops::leaky_relu_backward(&cache.h2_pre, slope, &dh2);
        let dh1 = self.dense2.backward(&cache.c2, &dh2_pre);
        let dh1_pre = ops::leaky_relu_backward(&cache.h1_pre, slope, &dh1);
        self.dense1.backward(&cache.c1, &dh1_pre)
    }

    pub fn params_mut(&mut self) -> ParamRefs<'_, F> {
        vec![
            ("disc/dense1/weight".into(), &mut self.dense1.weight),
            ("disc/dense1/bias".into(), &mut self.dense1.bias),
            ("disc/dense2/weight".into(), &mut self.dense2.weight),
            ("disc/dense2/bias".into(), &mut self.dense2.bias),
            ("disc/head_gan/weight".into(), &mut self.head_gan.weight),
            ("disc/head_gan/bias".into(), &mut self.head_gan.bias),
            ("disc/head_age/weight".into(), &mut self.head_age.weight),
            ("disc/head_age/bias".into(), &mut self.head_age.bias),
        ]
    }

    pub fn buffers(&self) -> Vec<(String, Tensor<F>)> {
        vec![
            ("disc/dense1/u".into(), self.dense1.u.clone()),
            ("disc/dense2/u".into(), self.dense2.u.clone()),
            ("disc/head_gan/u".into(), self.head_gan.u.clone()),
            ("disc/head_age/u".into(), self.head_age.u.clone()),
        ]
    }

    pub fn load_buffers(&mut self, get: &dyn Fn(&str) -> Option<Tensor<F>>) -> Result<()> {
        for (name, slot) in [
            ("disc/dense1/u", &mut self.dense1.u),
            ("disc/dense2/u", &mut self.dense2.u),
            ("disc/head_gan/u", &mut self.head_gan.u),
            ("disc/head_age/u", &mut self.head_age.u),
        ] {
            *slot = get(name).ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?;
        }
        Ok(())
    }
}

// ── losses ──────────────────────────────────────────────────────────────

/// Least-squares generator loss: mean of (D(z') - 1)^2 / 2.
pub fn generator_adv_loss(scores_fake: &[f64]) -> f64 {
    let n = scores_fake.len() as f64;
    scores_fake.iter().map(|s| (s - 1.0) * (s - 1.0)).sum::<f64>() * 0.5 / n
}

pub fn generator_adv_loss_backward(scores_fake: &[f64]) -> Vec<f64> {
    let n = scores_fake.len() as f64;
    scores_fake.iter().map(|s| (s - 1.0) / n).collect()
}

/// Softmax cross-entropy with natural log for one sample.
pub fn age_cls_loss<F: Scalar>(logits: &Tensor<F>, target: usize) -> f64 {
    let vals: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - vals[target]
}

/// d(CE)/d(logits) = softmax(logits) - onehot(target).
pub fn age_cls_loss_backward<F: Scalar>(logits: &Tensor<F>, target: usize) -> Tensor<F> {
    let vals: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::from_vec(
        logits.shape(),
        exps.iter()
            .enumerate()
            .map(|(i, e)| F::from_f64(e / sum - if i == target { 1.0 } else { 0.0 }))
            .collect(),
    )
}

/// The four translation-loss components before weighting.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeneratorLossParts {
    pub akd: f64,
    pub al: f64,
    pub acl: f64,
    pub cl: f64,
}

/// Weighted sum of the translation-loss components.
pub fn total_generator_loss(parts: &GeneratorLossParts, weights: &LossWeights) -> f64 {
    weights.akd * parts.akd + weights.al * parts.al + weights.acl * parts.acl + weights.cl * parts.cl
}

/// Discriminator objective: real scores toward 1, fake scores toward 0,
/// plus weighted age cross-entropy on real latents.
pub fn discriminator_loss<F: Scalar>(
    scores_real: &[f64],
    scores_fake: &[f64],
    real_age_logits: &Tensor<F>,
    real_targets: &[usize],
    weights: &LossWeights,
) -> f64 {
    let nr = scores_real.len() as f64;
    let nf = scores_fake.len() as f64;
    let real_term = scores_real.iter().map(|s| (s - 1.0) * (s - 1.0)).sum::<f64>() * 0.5 / nr;
    let fake_term = scores_fake.iter().map(|s| s * s).sum::<f64>() * 0.5 / nf;
    let n = real_targets.len();
    let ce: f64 = (0..n)
        .map(|i| {
            let row = Tensor::from_vec(&[real_age_logits.shape()[1]], real_age_logits.sample(i).to_vec());
            age_cls_loss(&row, real_targets[i])
        })
        .sum::<f64>()
        / n as f64;
    real_term + fake_term + weights.acl_d * ce
}
