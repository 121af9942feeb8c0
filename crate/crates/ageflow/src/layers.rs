//! Parameterized building blocks shared by the flow subnets, the latent
//! translation module, the prior generator, and the discriminator.
//!
//! Batch elements run in parallel where profitable; every reduction
//! happens in sample-index order, so results are bit-identical to the
//! serial path.

use rayon::prelude::*;

use crate::error::Result;
use crate::numerics::ops;
use crate::numerics::{Param, Rng, Scalar, Tensor};

// ── batched 3x3/1x1 convolution layer ───────────────────────────────────

#[derive(Debug, Clone)]
pub struct ConvLayer<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub padding: usize,
}

pub struct ConvCache<F> {
    input: Tensor<F>,
}

impl<F: Scalar> ConvLayer<F> {
    /// He-style init scaled by fan-in.
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        ConvLayer {
            weight: Param::new(rng.normal_tensor(&[c_out, c_in, k, k], std)),
            bias: Param::zeros(&[c_out]),
            padding: k / 2,
        }
    }

    /// All-zero weights and bias: the layer outputs exactly zero.
    pub fn zeroed(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvLayer {
            weight: Param::zeros(&[c_out, c_in, k, k]),
            bias: Param::zeros(&[c_out]),
            padding: k / 2,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weight.value.data().iter().all(|v| *v == F::zero())
            && self.bias.value.data().iter().all(|v| *v == F::zero())
    }

    /// Forward on a [N,C,H,W] batch; samples run in parallel.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, c, h, w) = x.dim4();
        let c_out = self.weight.value.shape()[0];
        let per_sample: Result<Vec<Vec<F>>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let xs = Tensor::from_vec(&[c, h, w], x.sample(ni).to_vec());
                ops::conv2d(&xs, &self.weight.value, &self.bias.value, self.padding)
                    .map(Tensor::into_data)
            })
            .collect();
        let mut out = Tensor::zeros(&[n, c_out, h, w]);
        for (ni, data) in per_sample?.into_iter().enumerate() {
            out.sample_mut(ni).copy_from_slice(&data);
        }
        Ok(out)
    }

    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<(Tensor<F>, ConvCache<F>)> {
        let y = self.forward(x)?;
        Ok((y, ConvCache { input: x.clone() }))
    }

    /// Accumulates weight/bias grads in sample order, returns input grad.
    pub fn backward(&mut self, cache: &ConvCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let (n, c, h, w) = cache.input.dim4();
        let c_out = self.weight.value.shape()[0];
        let weight = &self.weight.value;
        let padding = self.padding;
        let per_sample: Vec<(Tensor<F>, Tensor<F>, Tensor<F>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let xs = Tensor::from_vec(&[c, h, w], cache.input.sample(ni).to_vec());
                let dys = Tensor::from_vec(&[c_out, h, w], dy.sample(ni).to_vec());
                ops::conv2d_backward(&xs, weight, padding, &dys)
            })
            .collect();
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for (ni, (dxs, dw, db)) in per_sample.into_iter().enumerate() {
            dx.sample_mut(ni).copy_from_slice(dxs.data());
            self.weight.accumulate(&dw);
            self.bias.accumulate(&db);
        }
        dx
    }
}

// ── dense layer ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DenseLayer<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

pub struct DenseCache<F> {
    input: Tensor<F>,
}

impl<F: Scalar> DenseLayer<F> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / d_in as f64).sqrt();
        DenseLayer {
            weight: Param::new(rng.normal_tensor(&[d_out, d_in], std)),
            bias: Param::zeros(&[d_out]),
        }
    }

    pub fn zeroed(d_in: usize, d_out: usize) -> Self {
        DenseLayer { weight: Param::zeros(&[d_out, d_in]), bias: Param::zeros(&[d_out]) }
    }

    /// Forward on [N, d_in].
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        ops::dense(x, &self.weight.value, &self.bias.value)
    }

    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<(Tensor<F>, DenseCache<F>)> {
        let y = self.forward(x)?;
        Ok((y, DenseCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: &DenseCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let (dx, dw, db) = ops::dense_backward(&cache.input, &self.weight.value, dy);
        self.weight.accumulate(&dw);
        self.bias.accumulate(&db);
        dx
    }
}

// ── squeeze-and-excitation channel attention ────────────────────────────

/// Global-average-pooled features gate each channel through a sigmoid.
#[derive(Debug, Clone)]
pub struct SqueezeExcite<F> {
    pub squeeze: DenseLayer<F>,
    pub excite: DenseLayer<F>,
}

pub struct SqueezeExciteCache<F> {
    input: Tensor<F>,
    pooled: DenseCache<F>,
    hidden_pre: Tensor<F>,
    hidden: DenseCache<F>,
    gate: Tensor<F>,
}

impl<F: Scalar> SqueezeExcite<F> {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        let reduced = (channels / 4).max(1);
        SqueezeExcite {
            squeeze: DenseLayer::new(channels, reduced, rng),
            excite: DenseLayer::new(reduced, channels, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<(Tensor<F>, SqueezeExciteCache<F>)> {
        let (n, c, h, w) = x.dim4();
        let pooled = ops::global_avg_pool(x);
        let (hidden_pre, pooled_cache) = self.squeeze.forward_cached(&pooled)?;
        let hidden = ops::relu(&hidden_pre);
        let (gate_pre, hidden_cache) = self.excite.forward_cached(&hidden)?;
        let gate = ops::sigmoid(&gate_pre);
        let mut y = Tensor::zeros(&[n, c, h, w]);
        let plane = h * w;
        for ni in 0..n {
            let xs = x.sample(ni);
            let ys = y.sample_mut(ni);
            for ci in 0..c {
                let g = gate.data()[ni * c + ci];
                for i in ci * plane..(ci + 1) * plane {
                    ys[i] = xs[i] * g;
                }
            }
        }
        Ok((y, SqueezeExciteCache { input: x.clone(), pooled: pooled_cache, hidden_pre, hidden: hidden_cache, gate }))
    }

    pub fn backward(&mut self, cache: &SqueezeExciteCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let (n, c, h, w) = cache.input.dim4();
        let plane = h * w;

        // direct path: dx += dy * gate; gate path: dgate = sum_hw dy * x
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let mut dgate = Tensor::zeros(&[n, c]);
        for ni in 0..n {
            let xs = cache.input.sample(ni);
            let dys = dy.sample(ni);
            let dxs = dx.sample_mut(ni);
            for ci in 0..c {
                let g = cache.gate.data()[ni * c + ci];
                let mut acc = F::zero();
                for i in ci * plane..(ci + 1) * plane {
                    dxs[i] = dys[i] * g;
                    acc = acc + dys[i] * xs[i];
                }
                dgate.data_mut()[ni * c + ci] = acc;
            }
        }

        let dgate_pre = ops::sigmoid_backward(&cache.gate, &dgate);
        let dhidden = self.excite.backward(&cache.hidden, &dgate_pre);
        let dhidden_pre = ops::relu_backward(&cache.hidden_pre, &dhidden);
        let dpooled = self.squeeze.backward(&cache.pooled, &dhidden_pre);
        let dx_pool = ops::global_avg_pool_backward(&dpooled, h, w);
        dx.add_assign(&dx_pool);
        dx
    }
}
