//! Multi-scale composition of flow steps into an encoder/decoder pair with
//! exact likelihood, sampling, and latent packing.

use crate::error::{Error, Result};
use crate::flow_layers::{squeeze, unsqueeze, ActNorm, ActNormCache, Coupling, CouplingCache, InvConv, InvConvCache};
use crate::numerics::tensor::{concat_channels, split_channels};
use crate::numerics::{ParamRefs, Rng, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GlowConfig {
    /// number of scales (l)
    pub scales: usize,
    /// flow steps per scale (k)
    pub flows_per_scale: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub subnet_width: usize,
    pub dequant_bins: usize,
}

impl Default for GlowConfig {
    fn default() -> Self {
        // desk-scale: 32x32 single-channel, 3 scales of 8 flows
        GlowConfig {
            scales: 3,
            flows_per_scale: 8,
            channels: 1,
            height: 32,
            width: 32,
            subnet_width: 64,
            dequant_bins: 256,
        }
    }
}

impl GlowConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.scales;
        if self.scales == 0 || self.flows_per_scale == 0 {
            return Err(Error::Config("glow needs at least one scale and one flow".into()));
        }
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::Config(format!(
                "spatial dims {}x{} not divisible by 2^{}",
                self.height, self.width, self.scales
            )));
        }
        if self.dequant_bins < 2 {
            return Err(Error::Config("dequant_bins must be >= 2".into()));
        }
        Ok(())
    }

    /// Elements per image.
    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Channels seen by the flow steps at each scale.
    pub fn scale_channels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.scales);
        let mut c = self.channels;
        for s in 0..self.scales {
            c *= 4;
            out.push(c);
            if s + 1 < self.scales {
                c /= 2;
            }
        }
        out
    }

    /// Spatial side-channel counts of the packed latent: (channels, h, w).
    pub fn packed_shape(&self) -> (usize, usize, usize) {
        let hf = self.height >> self.scales;
        let wf = self.width >> self.scales;
        let mut packed_c = 0;
        let chans = self.scale_channels();
        for (i, &c) in chans.iter().enumerate() {
            if i + 1 < self.scales {
                let squeezes = self.scales - 1 - i;
                packed_c += (c / 2) << (2 * squeezes);
            } else {
                packed_c += c;
            }
        }
        (packed_c, hf, wf)
    }
}

/// Per-scale split latents plus the deepest-scale tensor; element count
/// always equals the input image element count.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<F> {
    pub splits: Vec<Tensor<F>>,
    pub final_z: Tensor<F>,
}

impl<F: Scalar> LatentState<F> {
    pub fn total_elements(&self) -> usize {
        self.splits.iter().map(|t| t.len()).sum::<usize>() + self.final_z.len()
    }

    pub fn batch(&self) -> usize {
        self.final_z.shape()[0]
    }

    pub fn map_tensors(&self, f: impl Fn(&Tensor<F>) -> Tensor<F>) -> Self {
        LatentState {
            splits: self.splits.iter().map(&f).collect(),
            final_z: f(&self.final_z),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowStep<F> {
    pub actnorm: ActNorm<F>,
    pub invconv: InvConv<F>,
    pub coupling: Coupling<F>,
}

pub struct FlowStepCache<F> {
    actnorm: ActNormCache<F>,
    invconv: InvConvCache<F>,
    coupling: CouplingCache<F>,
}

pub struct EncodeCache<F> {
    steps: Vec<Vec<FlowStepCache<F>>>,
}

#[derive(Debug, Clone)]
pub struct Glow<F> {
    pub config: GlowConfig,
    pub scales: Vec<Vec<FlowStep<F>>>,
}

impl<F: Scalar> Glow<F> {
    /// Random rotations for the 1x1 convs; coupling output convs start at
    /// zero so every step is an identity-plus-rotation at init.
    pub fn new(config: GlowConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut scales = Vec::new();
        for (s, c) in config.scale_channels().into_iter().enumerate() {
            let mut steps = Vec::new();
            for k in 0..config.flows_per_scale {
                let mut step_rng = rng.fork((s * 1000 + k) as u64);
                steps.push(FlowStep {
                    actnorm: ActNorm::new(c),
                    invconv: InvConv::new(c, &mut step_rng),
                    coupling: Coupling::new(c, config.subnet_width, k % 2 == 1, &mut step_rng)?,
                });
            }
            scales.push(steps);
        }
        Ok(Glow { config, scales })
    }

    /// Identity 1x1 convs and zero subnets; ActNorm still needs data init.
    pub fn identity(config: GlowConfig) -> Result<Self> {
        config.validate()?;
        let seed = Rng::new(0);
        let mut scales = Vec::new();
        for (s, c) in config.scale_channels().into_iter().enumerate() {
            let mut steps = Vec::new();
            for k in 0..config.flows_per_scale {
                let mut step_rng = seed.fork((s * 1000 + k) as u64);
                let mut coupling = Coupling::new(c, config.subnet_width, k % 2 == 1, &mut step_rng)?;
                // zero the whole subnet so even hidden layers are inert
                coupling.subnet.conv1.weight.value.fill(F::zero());
                coupling.subnet.conv2.weight.value.fill(F::zero());
                steps.push(FlowStep {
                    actnorm: ActNorm::new(c),
                    invconv: InvConv::identity(c),
                    coupling,
                });
            }
            scales.push(steps);
        }
        Ok(Glow { config, scales })
    }

    /// Give the coupling output convs small random weights. Used to exercise
    /// non-identity flows in verification suites without training.
    pub fn randomize_couplings(&mut self, rng: &mut Rng, std: f64) {
        for steps in &mut self.scales {
            for step in steps {
                let shape = step.coupling.subnet.conv_out.weight.value.shape().to_vec();
                step.coupling.subnet.conv_out.weight.value = rng.normal_tensor(&shape, std);
                let bshape = step.coupling.subnet.conv_out.bias.value.shape().to_vec();
                step.coupling.subnet.conv_out.bias.value = rng.normal_tensor(&bshape, std * 0.1);
            }
        }
    }

    /// Mark every ActNorm initialized with identity parameters (tests and
    /// synthetic checkpoints only; training uses data init).
    pub fn set_actnorm_identity(&mut self) {
        for steps in &mut self.scales {
            for step in steps {
                step.actnorm.initialized = true;
            }
        }
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.scales.iter().all(|s| s.iter().all(|f| f.actnorm.initialized))
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let (_, c, h, w) = x.dim4();
        if c != self.config.channels || h != self.config.height || w != self.config.width {
            return Err(Error::shape(format!(
                "glow expects [N,{},{},{}], got {:?}",
                self.config.channels, self.config.height, self.config.width,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Data-dependent ActNorm init as the batch flows through, then encode.
    pub fn encode_with_init(&mut self, x: &Tensor<F>) -> Result<(LatentState<F>, f64)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut logdet = 0.0;
        let mut splits = Vec::new();
        let n_scales = self.config.scales;
        for s in 0..n_scales {
            h = squeeze(&h)?;
            for (k, step) in self.scales[s].iter_mut().enumerate() {
                if !step.actnorm.initialized {
                    step.actnorm.init_from_batch(&h)?;
                }
                let (h1, ld1) = step.actnorm.forward(&h)?;
                let (h2, ld2) = step.invconv.forward(&h1)?;
                let (h3, ld3) = step.coupling.forward(&h2)?;
                h3.ensure_finite(&format!("glow scale {s} step {k}"))?;
                logdet += ld1 + ld2 + ld3;
                h = h3;
            }
            if s + 1 < n_scales {
                let c = h.shape()[1];
                let (z_out, h_next) = split_channels(&h, c / 2);
                splits.push(z_out);
                h = h_next;
            }
        }
        Ok((LatentState { splits, final_z: h }, logdet))
    }

    /// Encode x into the multi-scale latent; returns the per-sample logdet.
    pub fn encode(&self, x: &Tensor<F>) -> Result<(LatentState<F>, f64)> {
        if !self.actnorm_initialized() {
            return Err(Error::Uninitialized("glow actnorm"));
        }
        self.check_input(x)?;
        let mut h = x.clone();
        let mut logdet = 0.0;
        let mut splits = Vec::new();
        let n_scales = self.config.scales;
        for s in 0..n_scales {
            h = squeeze(&h)?;
            for (k, step) in self.scales[s].iter().enumerate() {
                let (h1, ld1) = step.actnorm.forward(&h)?;
                let (h2, ld2) = step.invconv.forward(&h1)?;
                let (h3, ld3) = step.coupling.forward(&h2)?;
                h3.ensure_finite(&format!("glow scale {s} step {k}"))?;
                logdet += ld1 + ld2 + ld3;
                h = h3;
            }
            if s + 1 < n_scales {
                let c = h.shape()[1];
                let (z_out, h_next) = split_channels(&h, c / 2);
                splits.push(z_out);
                h = h_next;
            }
        }
        Ok((LatentState { splits, final_z: h }, logdet))
    }

    /// Training-path encode that retains caches for backward.
    pub fn encode_cached(&self, x: &Tensor<F>) -> Result<(LatentState<F>, f64, EncodeCache<F>)> {
        if !self.actnorm_initialized() {
            return Err(Error::Uninitialized("glow actnorm"));
        }
        self.check_input(x)?;
        let mut h = x.clone();
        let mut logdet = 0.0;
        let mut splits = Vec::new();
        let mut caches = Vec::new();
        let n_scales = self.config.scales;
        for s in 0..n_scales {
            h = squeeze(&h)?;
            let mut scale_caches = Vec::new();
            for (k, step) in self.scales[s].iter().enumerate() {
                let (h1, ld1, c1) = step.actnorm.forward_cached(&h)?;
                let (h2, ld2, c2) = step.invconv.forward_cached(&h1)?;
                let (h3, ld3, c3) = step.coupling.forward_cached(&h2)?;
                h3.ensure_finite(&format!("glow scale {s} step {k}"))?;
                logdet += ld1 + ld2 + ld3;
                h = h3;
                scale_caches.push(FlowStepCache { actnorm: c1, invconv: c2, coupling: c3 });
            }
            caches.push(scale_caches);
            if s + 1 < n_scales {
                let c = h.shape()[1];
                let (z_out, h_next) = split_channels(&h, c / 2);
                splits.push(z_out);
                h = h_next;
            }
        }
        Ok((LatentState { splits, final_z: h }, logdet, EncodeCache { steps: caches }))
    }

    /// Reverse-mode pass through the encoder: given gradients w.r.t. every
    /// latent tensor and w.r.t. the per-sample logdet (summed over batch),
    /// accumulate parameter gradients and return the input gradient.
    pub fn encode_backward(
        &mut self,
        cache: &EncodeCache<F>,
        dz: &LatentState<F>,
        dlogdet: f64,
    ) -> Result<Tensor<F>> {
        let n_scales = self.config.scales;
        let mut dh = dz.final_z.clone();
        for s in (0..n_scales).rev() {
            if s + 1 < n_scales {
                // invert the channel split: grads of (z_out, h_next)
                dh = concat_channels(&[&dz.splits[s], &dh]);
            }
            for (k, step) in self.scales[s].iter_mut().enumerate().rev() {
                let sc = &cache.steps[s][k];
                let d3 = step.coupling.backward(&sc.coupling, &dh);
                let d2 = step.invconv.backward(&sc.invconv, &d3, dlogdet);
                let d1 = step.actnorm.backward(&sc.actnorm, &d2, dlogdet);
                dh = d1;
            }
            dh = unsqueeze(&dh)?;
        }
        Ok(dh)
    }

    /// Exact inverse of encode.
    pub fn decode(&self, z: &LatentState<F>) -> Result<Tensor<F>> {
        let n_scales = self.config.scales;
        if z.splits.len() + 1 != n_scales {
            return Err(Error::shape(format!(
                "latent has {} splits, model expects {}",
                z.splits.len(),
                n_scales - 1
            )));
        }
        let mut h = z.final_z.clone();
        for s in (0..n_scales).rev() {
            if s + 1 < n_scales {
                h = concat_channels(&[&z.splits[s], &h]);
            }
            for step in self.scales[s].iter().rev() {
                let h2 = step.coupling.inverse(&h)?;
                let h1 = step.invconv.inverse(&h2)?;
                h = step.actnorm.inverse(&h1)?;
            }
            h = unsqueeze(&h)?;
        }
        Ok(h)
    }

    /// Draw z ~ N(0, T^2 I) and decode.
    pub fn sample(&self, rng: &mut Rng, temperature: f64, count: usize) -> Result<Tensor<F>> {
        let z = self.sample_latent(rng, temperature, count);
        self.decode(&z)
    }

    pub fn sample_latent(&self, rng: &mut Rng, temperature: f64, count: usize) -> LatentState<F> {
        let (hf, wf) = (self.config.height >> self.config.scales, self.config.width >> self.config.scales);
        let chans = self.config.scale_channels();
        let mut splits = Vec::new();
        for (i, &c) in chans.iter().enumerate().take(self.config.scales - 1) {
            let side_h = self.config.height >> (i + 1);
            let side_w = self.config.width >> (i + 1);
            splits.push(rng.normal_tensor(&[count, c / 2, side_h, side_w], temperature));
        }
        let final_z = rng.normal_tensor(&[count, chans[self.config.scales - 1], hf, wf], temperature);
        LatentState { splits, final_z }
    }

    pub fn params_mut(&mut self) -> ParamRefs<'_, F> {
        let mut out: ParamRefs<'_, F> = Vec::new();
        for (s, steps) in self.scales.iter_mut().enumerate() {
            for (k, step) in steps.iter_mut().enumerate() {
                let p = format!("glow/s{s}/f{k}");
                out.push((format!("{p}/actnorm/log_s"), &mut step.actnorm.log_s));
                out.push((format!("{p}/actnorm/b"), &mut step.actnorm.b));
                out.push((format!("{p}/invconv/lower"), &mut step.invconv.lower));
                out.push((format!("{p}/invconv/upper"), &mut step.invconv.upper));
                out.push((format!("{p}/invconv/log_diag"), &mut step.invconv.log_diag));
                let sub = &mut step.coupling.subnet;
                out.push((format!("{p}/coupling/conv1/weight"), &mut sub.conv1.weight));
                out.push((format!("{p}/coupling/conv1/bias"), &mut sub.conv1.bias));
                out.push((format!("{p}/coupling/conv2/weight"), &mut sub.conv2.weight));
                out.push((format!("{p}/coupling/conv2/bias"), &mut sub.conv2.bias));
                out.push((format!("{p}/coupling/conv_out/weight"), &mut sub.conv_out.weight));
                out.push((format!("{p}/coupling/conv_out/bias"), &mut sub.conv_out.bias));
            }
        }
        out
    }

    /// Fixed (non-learnable) state that must persist with the model.
    pub fn buffers(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        for (s, steps) in self.scales.iter().enumerate() {
            for (k, step) in steps.iter().enumerate() {
                let p = format!("glow/s{s}/f{k}");
                out.push((
                    format!("{p}/actnorm/initialized"),
                    Tensor::scalar(if step.actnorm.initialized { F::one() } else { F::zero() }),
                ));
                out.push((
                    format!("{p}/invconv/perm"),
                    Tensor::from_vec(
                        &[step.invconv.perm.len()],
                        step.invconv.perm.iter().map(|&i| F::from_f64(i as f64)).collect(),
                    ),
                ));
                out.push((
                    format!("{p}/invconv/sign"),
                    Tensor::from_vec(
                        &[step.invconv.sign.len()],
                        step.invconv.sign.iter().map(|&v| F::from_f64(v)).collect(),
                    ),
                ));
            }
        }
        out
    }

    pub fn load_buffers(&mut self, get: &dyn Fn(&str) -> Option<Tensor<F>>) -> Result<()> {
        for (s, steps) in self.scales.iter_mut().enumerate() {
            for (k, step) in steps.iter_mut().enumerate() {
                let p = format!("glow/s{s}/f{k}");
                let init = get(&format!("{p}/actnorm/initialized"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {p}/actnorm/initialized")))?;
                step.actnorm.initialized = init.data()[0].as_f64() != 0.0;
                let perm = get(&format!("{p}/invconv/perm"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {p}/invconv/perm")))?;
                step.invconv.perm = perm.data().iter().map(|v| v.as_f64() as usize).collect();
                let sign = get(&format!("{p}/invconv/sign"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {p}/invconv/sign")))?;
                step.invconv.sign = sign.data().iter().map(|v| v.as_f64()).collect();
            }
        }
        Ok(())
    }
}

// ── dequantization ──────────────────────────────────────────────────────

/// x = (image + u) / bins - 0.5 with u ~ U[0,1); logdet_pre = -D ln(bins).
pub fn preprocess<F: Scalar>(
    image: &Tensor<F>,
    bins: usize,
    rng: &mut Rng,
) -> Result<(Tensor<F>, f64)> {
    let u = rng.uniform_tensor::<F>(image.shape(), 0.0, 1.0);
    preprocess_with_u(image, bins, &u)
}

/// Deterministic midpoint dequantization (u = 0.5) for inference paths.
pub fn preprocess_midpoint<F: Scalar>(image: &Tensor<F>, bins: usize) -> Result<(Tensor<F>, f64)> {
    let u = Tensor::filled(image.shape(), F::from_f64(0.5));
    preprocess_with_u(image, bins, &u)
}

pub fn preprocess_with_u<F: Scalar>(
    image: &Tensor<F>,
    bins: usize,
    u: &Tensor<F>,
) -> Result<(Tensor<F>, f64)> {
    let max = F::from_f64((bins - 1) as f64);
    for &v in image.data() {
        if v < F::zero() || v > max {
            return Err(Error::invalid(format!("pixel value {v} outside [0, {}]", bins - 1)));
        }
    }
    let binsf = F::from_f64(bins as f64);
    let half = F::from_f64(0.5);
    let x = image.zip_map(u, |img, uu| (img + uu) / binsf - half);
    let per_sample_dim: usize = image.shape()[1..].iter().product();
    let logdet_pre = -(per_sample_dim as f64) * (bins as f64).ln();
    Ok((x, logdet_pre))
}

/// Map continuous x back to the integer bin index, clamped to [0, bins-1].
pub fn postprocess<F: Scalar>(x: &Tensor<F>, bins: usize) -> Tensor<F> {
    let binsf = bins as f64;
    x.map(|v| {
        let raw = ((v.as_f64() + 0.5) * binsf).floor();
        F::from_f64(raw.clamp(0.0, binsf - 1.0))
    })
}

// ── likelihood ──────────────────────────────────────────────────────────

/// Standard-normal log density of a whole latent state, per sample.
pub fn gaussian_log_density<F: Scalar>(z: &LatentState<F>) -> Vec<f64> {
    let n = z.batch();
    let dim = z.total_elements() / n;
    let norm = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut out = vec![norm; n];
    let mut add = |t: &Tensor<F>| {
        for ni in 0..n {
            let s: f64 = t.sample(ni).iter().map(|v| {
                let x = v.as_f64();
                x * x
            }).sum();
            out[ni] -= 0.5 * s;
        }
    };
    for t in &z.splits {
        add(t);
    }
    add(&z.final_z);
    out
}

/// nll in nats per sample from its parts (Gaussian prior + logdets).
pub fn nll_from_parts(log_pz: f64, logdet: f64, logdet_pre: f64) -> f64 {
    -(log_pz + logdet + logdet_pre)
}

pub fn bits_per_dim(nll_nats: f64, dim: usize) -> f64 {
    nll_nats / (dim as f64 * std::f64::consts::LN_2)
}

/// Per-sample negative log-likelihood of preprocessed inputs.
pub fn nll<F: Scalar>(glow: &Glow<F>, x: &Tensor<F>, logdet_pre: f64) -> Result<Vec<f64>> {
    let (z, logdet) = glow.encode(x)?;
    let log_pz = gaussian_log_density(&z);
    let out: Vec<f64> = log_pz
        .into_iter()
        .map(|lp| nll_from_parts(lp, logdet, logdet_pre))
        .collect();
    for v in &out {
        if !v.is_finite() {
            return Err(Error::NonFinite("glow nll".into()));
        }
    }
    Ok(out)
}

// ── latent packing ──────────────────────────────────────────────────────

/// Flatten the multi-scale latent into one [N, C_packed, Hf, Wf] tensor via
/// repeated squeeze; a pure index permutation with an exact inverse.
pub fn pack_latent<F: Scalar>(z: &LatentState<F>, config: &GlowConfig) -> Result<Tensor<F>> {
    let mut parts: Vec<Tensor<F>> = Vec::new();
    for (i, split) in z.splits.iter().enumerate() {
        let mut t = split.clone();
        let squeezes = config.scales - 1 - i;
        for _ in 0..squeezes {
            t = squeeze(&t)?;
        }
        parts.push(t);
    }
    parts.push(z.final_z.clone());
    let refs: Vec<&Tensor<F>> = parts.iter().collect();
    Ok(concat_channels(&refs))
}

/// Exact inverse of `pack_latent`.
pub fn unpack_latent<F: Scalar>(packed: &Tensor<F>, config: &GlowConfig) -> Result<LatentState<F>> {
    let (packed_c, hf, wf) = config.packed_shape();
    let (_, c, h, w) = packed.dim4();
    if c != packed_c || h != hf || w != wf {
        return Err(Error::shape(format!(
            "packed latent should be [N,{packed_c},{hf},{wf}], got {:?}",
            packed.shape()
        )));
    }
    let chans = config.scale_channels();
    let mut rest = packed.clone();
    let mut splits = Vec::new();
    for (i, &cs) in chans.iter().enumerate().take(config.scales - 1) {
        let squeezes = config.scales - 1 - i;
        let packed_channels = (cs / 2) << (2 * squeezes);
        let (part, remaining) = split_channels(&rest, packed_channels);
        rest = remaining;
        let mut t = part;
        for _ in 0..squeezes {
            t = unsqueeze(&t)?;
        }
        splits.push(t);
    }
    Ok(LatentState { splits, final_z: rest })
}
