//! Invertible conditional translation module: additive coupling flows over
//! the packed latent concatenated with broadcast condition channels, plus
//! the prior generator that turns one-hot age groups into Gaussian
//! condition parameters, and the cycle-consistency loss.
//!
//! Condition-channel updates are spatially averaged inside each coupling,
//! so condition channels stay spatially constant through the whole stack.
//! That makes the vector read-out at the output exact and the full
//! pipeline cycle invertible for any parameter values, not just trained
//! ones.

use crate::error::{Error, Result};
use crate::layers::{ConvCache, ConvLayer, DenseCache, DenseLayer, SqueezeExcite, SqueezeExciteCache};
use crate::numerics::ops;
use crate::numerics::tensor::{gather_channels, scatter_channels};
use crate::numerics::{ParamRefs, Rng, Scalar, Tensor};

/// Pairwise summation: exact for a power-of-two count of equal values, so
/// the spatial mean of a broadcast channel reproduces the input bit-exactly.
fn pairwise_sum<F: Scalar>(v: &[F]) -> F {
    match v.len() {
        0 => F::zero(),
        1 => v[0],
        n => {
            let (a, b) = v.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

// ── condition distribution ──────────────────────────────────────────────

/// Per-channel (mu, log_sigma) pair encoding an age-group condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionGaussian<F> {
    pub mu: Tensor<F>,
    pub log_sigma: Tensor<F>,
}

impl<F: Scalar> ConditionGaussian<F> {
    pub fn zeros(cond_dim: usize) -> Self {
        ConditionGaussian { mu: Tensor::zeros(&[cond_dim]), log_sigma: Tensor::zeros(&[cond_dim]) }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Concatenated (mu, log_sigma) vector.
    pub fn flat(&self) -> Vec<F> {
        let mut v = self.mu.data().to_vec();
        v.extend_from_slice(self.log_sigma.data());
        v
    }

    pub fn from_flat(vals: &[F]) -> Self {
        let half = vals.len() / 2;
        ConditionGaussian {
            mu: Tensor::from_vec(&[half], vals[..half].to_vec()),
            log_sigma: Tensor::from_vec(&[half], vals[half..].to_vec()),
        }
    }

    pub fn l2_distance(&self, other: &Self) -> f64 {
        self.flat()
            .iter()
            .zip(other.flat())
            .map(|(a, b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

// ── prior generator ─────────────────────────────────────────────────────

/// Two dense layers mapping a one-hot age group to (mu, log_sigma).
#[derive(Debug, Clone)]
pub struct PriorGenerator<F> {
    pub hidden: DenseLayer<F>,
    pub out: DenseLayer<F>,
    pub groups: usize,
    pub cond_dim: usize,
}

pub struct PriorCache<F> {
    hidden: DenseCache<F>,
    hidden_pre: Tensor<F>,
    out: DenseCache<F>,
}

impl<F: Scalar> PriorGenerator<F> {
    /// Hidden layer randomly initialized, output layer zeroed: every class
    /// starts at (mu, log_sigma) = (0, 0) and differentiates in training.
    pub fn new(groups: usize, cond_dim: usize, rng: &mut Rng) -> Self {
        PriorGenerator {
            hidden: DenseLayer::new(groups, 32, rng),
            out: DenseLayer::zeroed(32, 2 * cond_dim),
            groups,
            cond_dim,
        }
    }

    fn validate_onehot(&self, onehot: &Tensor<F>) -> Result<usize> {
        if onehot.len() != self.groups {
            return Err(Error::invalid(format!(
                "one-hot length {} != {} groups",
                onehot.len(),
                self.groups
            )));
        }
        let mut hot = None;
        for (i, &v) in onehot.data().iter().enumerate() {
            if v == F::one() {
                if hot.is_some() {
                    return Err(Error::invalid("one-hot has more than one 1"));
                }
                hot = Some(i);
            } else if v != F::zero() {
                return Err(Error::invalid(format!("one-hot entry {i} is {v}, not 0 or 1")));
            }
        }
        hot.ok_or_else(|| Error::invalid("one-hot has no 1"))
    }

    /// Deterministic (mu, log_sigma) for a one-hot encoded group.
    pub fn generate(&self, onehot: &Tensor<F>) -> Result<ConditionGaussian<F>> {
        let g = self.validate_onehot(onehot)?;
        Ok(self.generate_for_groups(&[g])?.remove(0))
    }

    /// Batched forward for plain group indices.
    pub fn generate_for_groups(&self, groups: &[usize]) -> Result<Vec<ConditionGaussian<F>>> {
        let (out, _) = self.forward_cached(groups)?;
        Ok(out)
    }

    pub fn forward_cached(&self, groups: &[usize]) -> Result<(Vec<ConditionGaussian<F>>, PriorCache<F>)> {
        let n = groups.len();
        let mut onehot = Tensor::zeros(&[n, self.groups]);
        for (row, &g) in groups.iter().enumerate() {
            if g >= self.groups {
                return Err(Error::invalid(format!("group {g} out of range")));
            }
            onehot.data_mut()[row * self.groups + g] = F::one();
        }
        let (hidden_pre, hcache) = self.hidden.forward_cached(&onehot)?;
        let hidden = ops::relu(&hidden_pre);
        let (raw, ocache) = self.out.forward_cached(&hidden)?;
        let conds = (0..n)
            .map(|row| ConditionGaussian::from_flat(raw.sample(row)))
            .collect();
        Ok((conds, PriorCache { hidden: hcache, hidden_pre, out: ocache }))
    }

    /// dconds: per-sample gradient of the flat (mu, log_sigma) output.
    pub fn backward(&mut self, cache: &PriorCache<F>, dconds: &[Vec<F>]) {
        let n = dconds.len();
        let d = 2 * self.cond_dim;
        let mut dy = Tensor::zeros(&[n, d]);
        for (row, g) in dconds.iter().enumerate() {
            dy.sample_mut(row).copy_from_slice(g);
        }
        let dhidden = self.out.backward(&cache.out, &dy);
        let dhidden_pre = ops::relu_backward(&cache.hidden_pre, &dhidden);
        self.hidden.backward(&cache.hidden, &dhidden_pre);
    }

    pub fn params_mut(&mut self) -> ParamRefs<'_, F> {
        vec![
            ("prior/hidden/weight".into(), &mut self.hidden.weight),
            ("prior/hidden/bias".into(), &mut self.hidden.bias),
            ("prior/out/weight".into(), &mut self.out.weight),
            ("prior/out/bias".into(), &mut self.out.bias),
        ]
    }
}

// ── ICTM ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct IctmConfig {
    /// flow count m
    pub flows: usize,
    /// packed latent channels C_z
    pub latent_channels: usize,
    /// condition channels per half (mu and log_sigma each get this many)
    pub cond_dim: usize,
    pub hidden_width: usize,
    /// number of age groups n
    pub groups: usize,
}

impl Default for IctmConfig {
    fn default() -> Self {
        IctmConfig { flows: 32, latent_channels: 64, cond_dim: 8, hidden_width: 64, groups: 4 }
    }
}

impl IctmConfig {
    pub fn combined_channels(&self) -> usize {
        self.latent_channels + 2 * self.cond_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.flows == 0 {
            return Err(Error::Config("ictm needs at least one flow".into()));
        }
        if self.combined_channels() % 2 != 0 {
            return Err(Error::Config(format!(
                "combined channels {} must be even",
                self.combined_channels()
            )));
        }
        if self.groups < 2 {
            return Err(Error::Config("need at least two age groups".into()));
        }
        Ok(())
    }
}

/// Coupling subnet: conv3x3 -> ReLU -> conv3x3 -> ReLU -> channel
/// attention -> zero-initialized conv3x3.
#[derive(Debug, Clone)]
pub struct IctmSubnet<F> {
    pub conv1: ConvLayer<F>,
    pub conv2: ConvLayer<F>,
    pub attention: SqueezeExcite<F>,
    pub conv_out: ConvLayer<F>,
}

pub struct IctmSubnetCache<F> {
    c1: ConvCache<F>,
    a1: Tensor<F>,
    c2: ConvCache<F>,
    a2: Tensor<F>,
    att: SqueezeExciteCache<F>,
    c3: ConvCache<F>,
}

impl<F: Scalar> IctmSubnet<F> {
    pub fn new(c_in: usize, c_out: usize, width: usize, rng: &mut Rng) -> Self {
        IctmSubnet {
            conv1: ConvLayer::new(c_in, width, 3, rng),
            conv2: ConvLayer::new(width, width, 3, rng),
            attention: SqueezeExcite::new(width, rng),
            conv_out: ConvLayer::zeroed(width, c_out, 3),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let a1 = ops::relu(&self.conv1.forward(x)?);
        let a2 = ops::relu(&self.conv2.forward(&a1)?);
        let g = self.attention.forward(&a2)?;
        self.conv_out.forward(&g)
    }

    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<(Tensor<F>, IctmSubnetCache<F>)> {
        let (h1, c1) = self.conv1.forward_cached(x)?;
        let a1 = ops::relu(&h1);
        let (h2, c2) = self.conv2.forward_cached(&a1)?;
        let a2 = ops::relu(&h2);
        let (g, att) = self.attention.forward_cached(&a2)?;
        let (y, c3) = self.conv_out.forward_cached(&g)?;
        Ok((y, IctmSubnetCache { c1, a1, c2, a2, att, c3 }))
    }

    pub fn backward(&mut self, cache: &IctmSubnetCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let dg = self.conv_out.backward(&cache.c3, dy);
        let da2 = self.attention.backward(&cache.att, &dg);
        let dh2 = ops::relu_backward(&cache.a2, &da2);
        let da1 = self.conv2.backward(&cache.c2, &dh2);
        let dh1 = ops::relu_backward(&cache.a1, &da1);
        self.conv1.backward(&cache.c1, &dh1)
    }
}

#[derive(Debug, Clone)]
pub struct IctmFlow<F> {
    pub subnet: IctmSubnet<F>,
    pub swap: bool,
}

pub struct IctmFlowCache<F> {
    subnet: IctmSubnetCache<F>,
}

/// The translation module: m additive coupling flows over the combined
/// (latent, condition) tensor with a channel-interleaved partition.
#[derive(Debug, Clone)]
pub struct Ictm<F> {
    pub config: IctmConfig,
    pub flows: Vec<IctmFlow<F>>,
    /// even channel indices of the combined tensor
    part_a: Vec<usize>,
    /// odd channel indices
    part_b: Vec<usize>,
}

pub struct IctmCache<F> {
    flows: Vec<IctmFlowCache<F>>,
}

impl<F: Scalar> Ictm<F> {
    pub fn new(config: IctmConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.combined_channels();
        let part_a: Vec<usize> = (0..c).step_by(2).collect();
        let part_b: Vec<usize> = (1..c).step_by(2).collect();
        let half = c / 2;
        let mut flows = Vec::with_capacity(config.flows);
        for i in 0..config.flows {
            let mut flow_rng = rng.fork(i as u64);
            flows.push(IctmFlow {
                subnet: IctmSubnet::new(half, half, config.hidden_width, &mut flow_rng),
                swap: i % 2 == 1,
            });
        }
        Ok(Ictm { config, flows, part_a, part_b })
    }

    /// True while every flow's output conv is still zero.
    pub fn is_identity(&self) -> bool {
        self.flows.iter().all(|f| f.subnet.conv_out.is_zero())
    }

    fn partition<'a>(&'a self, flow: &IctmFlow<F>) -> (&'a [usize], &'a [usize]) {
        if flow.swap {
            (&self.part_b, &self.part_a)
        } else {
            (&self.part_a, &self.part_b)
        }
    }

    /// Spatially average the update rows that land on condition channels;
    /// latent rows pass through. Symmetric and idempotent, so it is its own
    /// transpose in the backward pass.
    fn project_cond_rows(&self, update: &Tensor<F>, transformed_idx: &[usize]) -> Tensor<F> {
        let (n, _, h, w) = update.dim4();
        let plane = h * w;
        let inv = F::from_f64(1.0 / plane as f64);
        let mut out = update.clone();
        for ni in 0..n {
            let s = out.sample_mut(ni);
            for (row, &orig) in transformed_idx.iter().enumerate() {
                if orig >= self.config.latent_channels {
                    let mean = pairwise_sum(&s[row * plane..(row + 1) * plane]) * inv;
                    for v in &mut s[row * plane..(row + 1) * plane] {
                        *v = mean;
                    }
                }
            }
        }
        out
    }

    fn check_combined(&self, u: &Tensor<F>) -> Result<()> {
        let (_, c, _, _) = u.dim4();
        if c != self.config.combined_channels() {
            return Err(Error::shape(format!(
                "combined tensor needs {} channels, got {c}",
                self.config.combined_channels()
            )));
        }
        Ok(())
    }

    /// Bijective map on the combined tensor; logdet is exactly 0.
    pub fn forward_combined(&self, u: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_combined(u)?;
        let mut h = u.clone();
        for flow in &self.flows {
            let (drv_idx, tr_idx) = self.partition(flow);
            let driver = gather_channels(&h, drv_idx);
            let transformed = gather_channels(&h, tr_idx);
            let update = self.project_cond_rows(&flow.subnet.forward(&driver)?, tr_idx);
            let shifted = transformed.add(&update);
            scatter_channels(&mut h, tr_idx, &shifted);
        }
        Ok(h)
    }

    /// Exact inverse of `forward_combined`.
    pub fn inverse_combined(&self, u: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_combined(u)?;
        let mut h = u.clone();
        for flow in self.flows.iter().rev() {
            let (drv_idx, tr_idx) = self.partition(flow);
            let driver = gather_channels(&h, drv_idx);
            let shifted = gather_channels(&h, tr_idx);
            let update = self.project_cond_rows(&flow.subnet.forward(&driver)?, tr_idx);
            let transformed = shifted.sub(&update);
            scatter_channels(&mut h, tr_idx, &transformed);
        }
        Ok(h)
    }

    pub fn forward_combined_cached(&self, u: &Tensor<F>) -> Result<(Tensor<F>, IctmCache<F>)> {
        self.check_combined(u)?;
        let mut h = u.clone();
        let mut caches = Vec::with_capacity(self.flows.len());
        for flow in &self.flows {
            let (drv_idx, tr_idx) = self.partition(flow);
            let driver = gather_channels(&h, drv_idx);
            let transformed = gather_channels(&h, tr_idx);
            let (raw, subnet) = flow.subnet.forward_cached(&driver)?;
            let update = self.project_cond_rows(&raw, tr_idx);
            let shifted = transformed.add(&update);
            scatter_channels(&mut h, tr_idx, &shifted);
            caches.push(IctmFlowCache { subnet });
        }
        Ok((h, IctmCache { flows: caches }))
    }

    /// Accumulates subnet parameter grads; returns gradient w.r.t. the
    /// combined input tensor.
    pub fn backward_combined(&mut self, cache: &IctmCache<F>, du_out: &Tensor<F>) -> Tensor<F> {
        let mut dh = du_out.clone();
        let part_a = self.part_a.clone();
        let part_b = self.part_b.clone();
        let latent_channels = self.config.latent_channels;
        for (i, flow) in self.flows.iter_mut().enumerate().rev() {
            let (drv_idx, tr_idx): (&[usize], &[usize]) = if flow.swap {
                (&part_b, &part_a)
            } else {
                (&part_a, &part_b)
            };
            let d_shifted = gather_channels(&dh, tr_idx);
            // transpose of the cond-row projection is itself
            let d_raw = project_cond_rows_static(&d_shifted, tr_idx, latent_channels);
            let d_driver_subnet = flow.subnet.backward(&cache.flows[i].subnet, &d_raw);
            let d_driver_direct = gather_channels(&dh, drv_idx);
            let d_driver = d_driver_direct.add(&d_driver_subnet);
            scatter_channels(&mut dh, drv_idx, &d_driver);
            // d_transformed flows through unchanged (identity branch)
        }
        dh
    }

    /// Broadcast conditions into channels and concatenate after the latent.
    pub fn build_combined(&self, z: &Tensor<F>, conds: &[ConditionGaussian<F>]) -> Result<Tensor<F>> {
        let (n, c_z, h, w) = z.dim4();
        if c_z != self.config.latent_channels {
            return Err(Error::shape(format!(
                "latent should have {} channels, got {c_z}",
                self.config.latent_channels
            )));
        }
        if conds.len() != n {
            return Err(Error::shape(format!("{} conditions for batch of {n}", conds.len())));
        }
        let cd = self.config.cond_dim;
        let plane = h * w;
        let mut u = Tensor::zeros(&[n, self.config.combined_channels(), h, w]);
        for ni in 0..n {
            if conds[ni].dim() != cd {
                return Err(Error::shape(format!(
                    "condition dim {} != {cd}",
                    conds[ni].dim()
                )));
            }
            let dst = u.sample_mut(ni);
            dst[..c_z * plane].copy_from_slice(z.sample(ni));
            for d in 0..cd {
                let mu = conds[ni].mu.data()[d];
                let ls = conds[ni].log_sigma.data()[d];
                for p in 0..plane {
                    dst[(c_z + d) * plane + p] = mu;
                    dst[(c_z + cd + d) * plane + p] = ls;
                }
            }
        }
        Ok(u)
    }

    /// Split the combined tensor into the latent and the spatially averaged
    /// condition vectors.
    pub fn split_combined(&self, u: &Tensor<F>) -> (Tensor<F>, Vec<ConditionGaussian<F>>) {
        let (n, _, h, w) = u.dim4();
        let c_z = self.config.latent_channels;
        let cd = self.config.cond_dim;
        let plane = h * w;
        let inv = F::from_f64(1.0 / plane as f64);
        let mut z = Tensor::zeros(&[n, c_z, h, w]);
        let mut conds = Vec::with_capacity(n);
        for ni in 0..n {
            let src = u.sample(ni);
            z.sample_mut(ni).copy_from_slice(&src[..c_z * plane]);
            let mut flat = vec![F::zero(); 2 * cd];
            for (d, slot) in flat.iter_mut().enumerate() {
                let ch = &src[(c_z + d) * plane..(c_z + d + 1) * plane];
                *slot = pairwise_sum(ch) * inv;
            }
            conds.push(ConditionGaussian::from_flat(&flat));
        }
        (z, conds)
    }

    /// Translate source latents under target conditions; also returns the
    /// recovered source conditions read off the two-way output.
    pub fn forward(
        &self,
        z_s: &Tensor<F>,
        cond_t: &[ConditionGaussian<F>],
    ) -> Result<(Tensor<F>, Vec<ConditionGaussian<F>>)> {
        let u = self.build_combined(z_s, cond_t)?;
        let out = self.forward_combined(&u)?;
        let (z_t, rec) = self.split_combined(&out);
        Ok((z_t, rec))
    }

    /// Regression direction: exact inverse of `forward` given the source
    /// conditions it reported.
    pub fn inverse(
        &self,
        z_t: &Tensor<F>,
        cond_s: &[ConditionGaussian<F>],
    ) -> Result<(Tensor<F>, Vec<ConditionGaussian<F>>)> {
        let u = self.build_combined(z_t, cond_s)?;
        let out = self.inverse_combined(&u)?;
        let (z_s, rec) = self.split_combined(&out);
        Ok((z_s, rec))
    }

    pub fn params_mut(&mut self) -> ParamRefs<'_, F> {
        let mut out: ParamRefs<'_, F> = Vec::new();
        for (i, flow) in self.flows.iter_mut().enumerate() {
            let p = format!("ictm/f{i}");
            let s = &mut flow.subnet;
            out.push((format!("{p}/conv1/weight"), &mut s.conv1.weight));
            out.push((format!("{p}/conv1/bias"), &mut s.conv1.bias));
            out.push((format!("{p}/conv2/weight"), &mut s.conv2.weight));
            out.push((format!("{p}/conv2/bias"), &mut s.conv2.bias));
            out.push((format!("{p}/attention/squeeze/weight"), &mut s.attention.squeeze.weight));
            out.push((format!("{p}/attention/squeeze/bias"), &mut s.attention.squeeze.bias));
            out.push((format!("{p}/attention/excite/weight"), &mut s.attention.excite.weight));
            out.push((format!("{p}/attention/excite/bias"), &mut s.attention.excite.bias));
            out.push((format!("{p}/conv_out/weight"), &mut s.conv_out.weight));
            out.push((format!("{p}/conv_out/bias"), &mut s.conv_out.bias));
        }
        out
    }
}

fn project_cond_rows_static<F: Scalar>(
    update: &Tensor<F>,
    transformed_idx: &[usize],
    latent_channels: usize,
) -> Tensor<F> {
    let (n, _, h, w) = update.dim4();
    let plane = h * w;
    let inv = F::from_f64(1.0 / plane as f64);
    let mut out = update.clone();
    for ni in 0..n {
        let s = out.sample_mut(ni);
        for (row, &orig) in transformed_idx.iter().enumerate() {
            if orig >= latent_channels {
                let mean = pairwise_sum(&s[row * plane..(row + 1) * plane]) * inv;
                for v in &mut s[row * plane..(row + 1) * plane] {
                    *v = mean;
                }
            }
        }
    }
    out
}

// ── consistency loss ────────────────────────────────────────────────────

/// Unit-variance Gaussian NLL of the recovered condition around the prior
/// generator's output for the true source label:
/// L = sum_d [ (u'_d - u_d)^2 / 2 + ln(2 pi) / 2 ].
pub fn consistency_loss<F: Scalar>(rec: &ConditionGaussian<F>, truth: &ConditionGaussian<F>) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    rec.flat()
        .iter()
        .zip(truth.flat())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            0.5 * d * d + half_ln_2pi
        })
        .sum()
}

/// Gradients w.r.t. (recovered, truth) flat vectors: (u' - u, u - u').
pub fn consistency_loss_backward<F: Scalar>(
    rec: &ConditionGaussian<F>,
    truth: &ConditionGaussian<F>,
) -> (Vec<F>, Vec<F>) {
    let drec: Vec<F> = rec
        .flat()
        .iter()
        .zip(truth.flat())
        .map(|(&a, b)| a - b)
        .collect();
    let dtruth: Vec<F> = drec.iter().map(|&v| -v).collect();
    (drec, dtruth)
}
