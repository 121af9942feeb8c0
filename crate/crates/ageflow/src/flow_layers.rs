//! The invertible building blocks: ActNorm, LU-parameterized 1x1
//! convolution, additive coupling, and the squeeze permutation. Every layer
//! exposes an exact forward with log-determinant, an exact inverse, and an
//! explicit backward for (output, logdet) gradients.

use crate::error::{Error, Result};
use crate::layers::{ConvCache, ConvLayer};
use crate::numerics::ops;
use crate::numerics::{Param, Rng, Scalar, Tensor};

// ── ActNorm ─────────────────────────────────────────────────────────────

/// Per-channel affine y = exp(log_s) * x + b with data-dependent init.
#[derive(Debug, Clone)]
pub struct ActNorm<F> {
    pub log_s: Param<F>,
    pub b: Param<F>,
    pub initialized: bool,
}

pub struct ActNormCache<F> {
    input: Tensor<F>,
}

impl<F: Scalar> ActNorm<F> {
    pub fn new(channels: usize) -> Self {
        ActNorm { log_s: Param::zeros(&[channels]), b: Param::zeros(&[channels]), initialized: false }
    }

    pub fn channels(&self) -> usize {
        self.log_s.value.len()
    }

    /// Data-dependent init: after forward on this batch every channel has
    /// zero mean, unit variance.
    pub fn init_from_batch(&mut self, batch: &Tensor<F>) -> Result<()> {
        if self.initialized {
            return Err(Error::invalid("actnorm already initialized"));
        }
        let (n, c, h, w) = batch.dim4();
        let count = n * h * w;
        if count < 2 {
            return Err(Error::Degenerate("actnorm init needs at least 2 values per channel".into()));
        }
        let plane = h * w;
        for ci in 0..c {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for ni in 0..n {
                for &v in &batch.sample(ni)[ci * plane..(ci + 1) * plane] {
                    let v = v.as_f64();
                    sum += v;
                    sum_sq += v * v;
                }
            }
            let mean = sum / count as f64;
            let var = (sum_sq / count as f64 - mean * mean).max(0.0);
            if var < 1e-12 {
                return Err(Error::Degenerate(format!("actnorm channel {ci} has zero variance")));
            }
            let std = var.sqrt();
            self.log_s.value.data_mut()[ci] = F::from_f64(-std.ln());
            self.b.value.data_mut()[ci] = F::from_f64(-mean / std);
        }
        self.initialized = true;
        Ok(())
    }

    /// (y, per-sample logdet).
    pub fn forward(&self, x: &Tensor<F>) -> Result<(Tensor<F>, f64)> {
        if !self.initialized {
            return Err(Error::Uninitialized("actnorm"));
        }
        let (n, c, h, w) = x.dim4();
        let plane = h * w;
        let mut y = Tensor::zeros(&[n, c, h, w]);
        for ni in 0..n {
            let xs = x.sample(ni);
            let ys = y.sample_mut(ni);
            for ci in 0..c {
                let s = self.log_s.value.data()[ci].exp();
                let b = self.b.value.data()[ci];
                for i in ci * plane..(ci + 1) * plane {
                    ys[i] = s * xs[i] + b;
                }
            }
        }
        Ok((y, self.logdet_per_sample(h, w)))
    }

    pub fn logdet_per_sample(&self, h: usize, w: usize) -> f64 {
        (h * w) as f64 * self.log_s.value.data().iter().map(|v| v.as_f64()).sum::<f64>()
    }

    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<(Tensor<F>, f64, ActNormCache<F>)> {
        let (y, logdet) = self.forward(x)?;
        Ok((y, logdet, ActNormCache { input: x.clone() }))
    }

    /// x = (y - b) / exp(log_s)
    pub fn inverse(&self, y: &Tensor<F>) -> Result<Tensor<F>> {
        if !self.initialized {
            return Err(Error::Uninitialized("actnorm"));
        }
        let (n, c, h, w) = y.dim4();
        let plane = h * w;
        let mut x = Tensor::zeros(&[n, c, h, w]);
        for ni in 0..n {
            let ys = y.sample(ni);
            let xs = x.sample_mut(ni);
            for ci in 0..c {
                let s_inv = (-self.log_s.value.data()[ci]).exp();
                let b = self.b.value.data()[ci];
                for i in ci * plane..(ci + 1) * plane {
                    xs[i] = (ys[i] - b) * s_inv;
                }
            }
        }
        Ok(x)
    }

    /// dlogdet is dL/d(per-sample logdet) summed over the batch.
    pub fn backward(&mut self, cache: &ActNormCache<F>, dy: &Tensor<F>, dlogdet: f64) -> Tensor<F> {
        let (n, c, h, w) = cache.input.dim4();
        let plane = h * w;
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for ci in 0..c {
            let s = self.log_s.value.data()[ci].exp();
            let mut dls = F::from_f64(dlogdet * plane as f64);
            let mut db = F::zero();
            for ni in 0..n {
                let xs = cache.input.sample(ni);
                let dys = dy.sample(ni);
                let dxs = dx.sample_mut(ni);
                for i in ci * plane..(ci + 1) * plane {
                    dxs[i] = dys[i] * s;
                    dls = dls + dys[i] * s * xs[i];
                    db = db + dys[i];
                }
            }
            self.log_s.grad.data_mut()[ci] = self.log_s.grad.data()[ci] + dls;
            self.b.grad.data_mut()[ci] = self.b.grad.data()[ci] + db;
        }
        dx
    }
}

// ── invertible 1x1 convolution (fixed-P LU parameterization) ───────────

/// W = P · L · (U_strict + diag(sign * exp(log_diag))); invertible for any
/// parameter values, logdet is H*W*sum(log_diag).
#[derive(Debug, Clone)]
pub struct InvConv<F> {
    /// y[i] = (L U' x)[perm[i]]
    pub perm: Vec<usize>,
    /// fixed diagonal signs of U'
    pub sign: Vec<f64>,
    pub lower: Param<F>,
    pub upper: Param<F>,
    pub log_diag: Param<F>,
}

pub struct InvConvCache<F> {
    input: Tensor<F>,
}

fn lu_decompose(a: &[Vec<f64>]) -> Option<(Vec<usize>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = a.len();
    let mut lu: Vec<Vec<f64>> = a.to_vec();
    let mut piv: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut best = col;
        for row in col + 1..n {
            if lu[row][col].abs() > lu[best][col].abs() {
                best = row;
            }
        }
        if lu[best][col].abs() < 1e-10 {
            return None;
        }
        lu.swap(col, best);
        piv.swap(col, best);
        for row in col + 1..n {
            let f = lu[row][col] / lu[col][col];
            lu[row][col] = f;
            for k in col + 1..n {
                lu[row][k] -= f * lu[col][k];
            }
        }
    }
    let mut l = vec![vec![0.0; n]; n];
    let mut u = vec![vec![0.0; n]; n];
    for i in 0..n {
        l[i][i] = 1.0;
        for j in 0..i {
            l[i][j] = lu[i][j];
        }
        for j in i..n {
            u[i][j] = lu[i][j];
        }
    }
    Some((piv, l, u))
}

impl<F: Scalar> InvConv<F> {
    /// Identity weight matrix.
    pub fn identity(channels: usize) -> Self {
        InvConv {
            perm: (0..channels).collect(),
            sign: vec![1.0; channels],
            lower: Param::zeros(&[channels, channels]),
            upper: Param::zeros(&[channels, channels]),
            log_diag: Param::zeros(&[channels]),
        }
    }

    /// Random rotation init, LU-decomposed once; P and signs stay fixed.
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        let c = channels;
        // Gram-Schmidt on a random Gaussian matrix -> orthogonal W0
        loop {
            let mut q: Vec<Vec<f64>> = (0..c).map(|_| (0..c).map(|_| rng.normal()).collect()).collect();
            let mut ok = true;
            for i in 0..c {
                for j in 0..i {
                    let dot: f64 = (0..c).map(|k| q[i][k] * q[j][k]).sum();
                    for k in 0..c {
                        q[i][k] -= dot * q[j][k];
                    }
                }
                let norm: f64 = (0..c).map(|k| q[i][k] * q[i][k]).sum::<f64>().sqrt();
                if norm < 1e-6 {
                    ok = false;
                    break;
                }
                for k in 0..c {
                    q[i][k] /= norm;
                }
            }
            if !ok {
                continue;
            }
            // rows of q are orthonormal; use q as W0
            let Some((piv, l, u)) = lu_decompose(&q) else { continue };
            // piv: q[piv[i]] = (L U)[i]  =>  q[i] = (L U)[perm[i]] with perm inverse of piv
            let mut perm = vec![0usize; c];
            for (i, &p) in piv.iter().enumerate() {
                perm[p] = i;
            }
            let mut lower = Tensor::zeros(&[c, c]);
            let mut upper = Tensor::zeros(&[c, c]);
            let mut log_diag = Tensor::zeros(&[c]);
            let mut sign = vec![0.0f64; c];
            for i in 0..c {
                for j in 0..i {
                    lower.data_mut()[i * c + j] = F::from_f64(l[i][j]);
                }
                for j in i + 1..c {
                    upper.data_mut()[i * c + j] = F::from_f64(u[i][j]);
                }
                sign[i] = u[i][i].signum();
                log_diag.data_mut()[i] = F::from_f64(u[i][i].abs().ln());
            }
            return InvConv {
                perm,
                sign,
                lower: Param::new(lower),
                upper: Param::new(upper),
                log_diag: Param::new(log_diag),
            };
        }
    }

    pub fn channels(&self) -> usize {
        self.perm.len()
    }

    /// Assemble the dense weight matrix W (row-major C x C).
    pub fn weight(&self) -> Tensor<F> {
        let c = self.channels();
        // U' = strict upper + diag(sign * exp(log_diag))
        let mut u = vec![F::zero(); c * c];
        for i in 0..c {
            for j in i + 1..c {
                u[i * c + j] = self.upper.value.data()[i * c + j];
            }
            u[i * c + i] = F::from_f64(self.sign[i]) * self.log_diag.value.data()[i].exp();
        }
        // M = L · U' with L unit-lower
        let mut l = vec![F::zero(); c * c];
        for i in 0..c {
            for j in 0..i {
                l[i * c + j] = self.lower.value.data()[i * c + j];
            }
            l[i * c + i] = F::one();
        }
        let mut m = vec![F::zero(); c * c];
        ops::gemm(c, c, c, &l, &u, &mut m);
        // W = P · M : row i of W is row perm-source of M; y[i] = m_row(perm[i]) · x
        let mut w = Tensor::zeros(&[c, c]);
        for i in 0..c {
            let src = self.perm[i];
            w.data_mut()[i * c..(i + 1) * c].copy_from_slice(&m[src * c..(src + 1) * c]);
        }
        w
    }

    pub fn logdet_per_sample(&self, h: usize, w: usize) -> f64 {
        (h * w) as f64 * self.log_diag.value.data().iter().map(|v| v.as_f64()).sum::<f64>()
    }

    /// Per-pixel y = W x; (y, per-sample logdet).
    pub fn forward(&self, x: &Tensor<F>) -> Result<(Tensor<F>, f64)> {
        let (n, c, h, w) = x.dim4();
        if c != self.channels() {
            return Err(Error::shape(format!("invconv expects {} channels, got {c}", self.channels())));
        }
        let wmat = self.weight();
        let mut y = Tensor::zeros(&[n, c, h, w]);
        let p = h * w;
        for ni in 0..n {
            ops::gemm(c, c, p, wmat.data(), x.sample(ni), y.sample_mut(ni));
        }
        Ok((y, self.logdet_per_sample(h, w)))
    }

    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<(Tensor<F>, f64, InvConvCache<F>)> {
        let (y, logdet) = self.forward(x)?;
        Ok((y, logdet, InvConvCache { input: x.clone() }))
    }

    /// Solve W x = y via permutation transpose and triangular substitution.
    pub fn inverse(&self, y: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, c, h, w) = y.dim4();
        if c != self.channels() {
            return Err(Error::shape(format!("invconv expects {} channels, got {c}", self.channels())));
        }
        let plane = h * w;
        let low = self.lower.value.data();
        let up = self.upper.value.data();
        let mut diag = vec![F::zero(); c];
        for i in 0..c {
            diag[i] = F::from_f64(self.sign[i]) * self.log_diag.value.data()[i].exp();
        }
        let mut x = Tensor::zeros(&[n, c, h, w]);
        let mut s = vec![F::zero(); c];
        let mut t = vec![F::zero(); c];
        for ni in 0..n {
            let ys = y.sample(ni).to_vec();
            let xs = x.sample_mut(ni);
            for pix in 0..plane {
                // s = P^T y  (y[i] = s[perm[i]])
                for i in 0..c {
                    s[self.perm[i]] = ys[i * plane + pix];
                }
                // L t = s (unit lower, forward substitution)
                for i in 0..c {
                    let mut acc = s[i];
                    for j in 0..i {
                        acc = acc - low[i * c + j] * t[j];
                    }
                    t[i] = acc;
                }
                // U' z = t (back substitution)
                for i in (0..c).rev() {
                    let mut acc = t[i];
                    for j in i + 1..c {
                        acc = acc - up[i * c + j] * xs[j * plane + pix];
                    }
                    xs[i * plane + pix] = acc / diag[i];
                }
            }
        }
        Ok(x)
    }

    pub fn backward(&mut self, cache: &InvConvCache<F>, dy: &Tensor<F>, dlogdet: f64) -> Tensor<F> {
        let (n, c, h, w) = cache.input.dim4();
        let p = h * w;
        let wmat = self.weight();

        // dX = W^T dY ; dW = sum_n dY_n X_n^T
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let mut dw = vec![F::zero(); c * c];
        for ni in 0..n {
            ops::gemm_tn(c, c, p, wmat.data(), dy.sample(ni), dx.sample_mut(ni), false);
            ops::gemm_nt_acc(c, p, c, dy.sample(ni), cache.input.sample(ni), &mut dw);
        }

        // un-permute rows: dM[perm[i]] = dW[i]
        let mut dm = vec![F::zero(); c * c];
        for i in 0..c {
            dm[self.perm[i] * c..(self.perm[i] + 1) * c].copy_from_slice(&dw[i * c..(i + 1) * c]);
        }

        // M = L U' : dL = dM U'^T (strict lower), dU' = L^T dM
        let mut uprime = vec![F::zero(); c * c];
        for i in 0..c {
            for j in i + 1..c {
                uprime[i * c + j] = self.upper.value.data()[i * c + j];
            }
            uprime[i * c + i] = F::from_f64(self.sign[i]) * self.log_diag.value.data()[i].exp();
        }
        let mut lmat = vec![F::zero(); c * c];
        for i in 0..c {
            for j in 0..i {
                lmat[i * c + j] = self.lower.value.data()[i * c + j];
            }
            lmat[i * c + i] = F::one();
        }
        let mut dl = vec![F::zero(); c * c];
        ops::gemm_nt(c, c, c, &dm, &uprime, &mut dl);
        let mut duprime = vec![F::zero(); c * c];
        ops::gemm_tn(c, c, c, &lmat, &dm, &mut duprime, false);

        for i in 0..c {
            for j in 0..i {
                let g = self.lower.grad.data()[i * c + j] + dl[i * c + j];
                self.lower.grad.data_mut()[i * c + j] = g;
            }
            for j in i + 1..c {
                let g = self.upper.grad.data()[i * c + j] + duprime[i * c + j];
                self.upper.grad.data_mut()[i * c + j] = g;
            }
            // d log_diag = dU'_ii * sign * exp(log_diag) + dlogdet * H*W
            let dd = duprime[i * c + i] * F::from_f64(self.sign[i]) * self.log_diag.value.data()[i].exp()
                + F::from_f64(dlogdet * p as f64);
            self.log_diag.grad.data_mut()[i] = self.log_diag.grad.data()[i] + dd;
        }
        dx
    }
}

// ── additive coupling ───────────────────────────────────────────────────

/// Two 3x3 convs with ReLU and a zero-initialized 3x3 output conv.
/// At construction the subnet output is exactly zero.
#[derive(Debug, Clone)]
pub struct CouplingSubnet<F> {
    pub conv1: ConvLayer<F>,
    pub conv2: ConvLayer<F>,
    pub conv_out: ConvLayer<F>,
}

pub struct CouplingSubnetCache<F> {
    c1: ConvCache<F>,
    a1: Tensor<F>,
    c2: ConvCache<F>,
    a2: Tensor<F>,
    c3: ConvCache<F>,
}

impl<F: Scalar> CouplingSubnet<F> {
    pub fn new(c_in: usize, c_out: usize, width: usize, rng: &mut Rng) -> Self {
        CouplingSubnet {
            conv1: ConvLayer::new(c_in, width, 3, rng),
            conv2: ConvLayer::new(width, width, 3, rng),
            conv_out: ConvLayer::zeroed(width, c_out, 3),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let h1 = self.conv1.forward(x)?;
        let a1 = ops::relu(&h1);
        let h2 = self.conv2.forward(&a1)?;
        let a2 = ops::relu(&h2);
        self.conv_out.forward(&a2)
    }

    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<(Tensor<F>, CouplingSubnetCache<F>)> {
        let (h1, c1) = self.conv1.forward_cached(x)?;
        let a1 = ops::relu(&h1);
        let (h2, c2) = self.conv2.forward_cached(&a1)?;
        let a2 = ops::relu(&h2);
        let (out, c3) = self.conv_out.forward_cached(&a2)?;
        Ok((out, CouplingSubnetCache { c1, a1, c2, a2, c3 }))
    }

    pub fn backward(&mut self, cache: &CouplingSubnetCache<F>, dout: &Tensor<F>) -> Tensor<F> {
        let da2 = self.conv_out.backward(&cache.c3, dout);
        let dh2 = ops::relu_backward(&cache.a2, &da2);
        let da1 = self.conv2.backward(&cache.c2, &dh2);
        let dh1 = ops::relu_backward(&cache.a1, &da1);
        self.conv1.backward(&cache.c1, &dh1)
    }
}

/// y_a = x_a, y_b = x_b + S(x_a); `swap` exchanges which half drives.
#[derive(Debug, Clone)]
pub struct Coupling<F> {
    pub subnet: CouplingSubnet<F>,
    pub swap: bool,
}

pub struct CouplingCache<F> {
    subnet: CouplingSubnetCache<F>,
    channels: usize,
}

impl<F: Scalar> Coupling<F> {
    pub fn new(channels: usize, width: usize, swap: bool, rng: &mut Rng) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::shape(format!("coupling needs an even channel count, got {channels}")));
        }
        let half = channels / 2;
        Ok(Coupling { subnet: CouplingSubnet::new(half, half, width, rng), swap })
    }

    fn halves(&self, x: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
        let c = x.shape()[1];
        let (a, b) = crate::numerics::tensor::split_channels(x, c / 2);
        if self.swap {
            (b, a)
        } else {
            (a, b)
        }
    }

    fn join(&self, driver: &Tensor<F>, shifted: &Tensor<F>) -> Tensor<F> {
        if self.swap {
            crate::numerics::tensor::concat_channels(&[shifted, driver])
        } else {
            crate::numerics::tensor::concat_channels(&[driver, shifted])
        }
    }

    /// (y, logdet = 0 exactly).
    pub fn forward(&self, x: &Tensor<F>) -> Result<(Tensor<F>, f64)> {
        let (driver, other) = self.halves(x);
        let shift = self.subnet.forward(&driver)?;
        let shifted = other.add(&shift);
        Ok((self.join(&driver, &shifted), 0.0))
    }

    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<(Tensor<F>, f64, CouplingCache<F>)> {
        let (driver, other) = self.halves(x);
        let (shift, subnet) = self.subnet.forward_cached(&driver)?;
        let shifted = other.add(&shift);
        Ok((self.join(&driver, &shifted), 0.0, CouplingCache { subnet, channels: x.shape()[1] }))
    }

    /// x_b = y_b - S(y_a): exact inverse by recomputation.
    pub fn inverse(&self, y: &Tensor<F>) -> Result<Tensor<F>> {
        let (driver, shifted) = self.halves(y);
        let shift = self.subnet.forward(&driver)?;
        let other = shifted.sub(&shift);
        Ok(self.join(&driver, &other))
    }

    pub fn backward(&mut self, cache: &CouplingCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let c = cache.channels;
        let (da, db) = crate::numerics::tensor::split_channels(dy, c / 2);
        let (d_driver_direct, d_shifted) = if self.swap { (db, da) } else { (da, db) };
        let d_driver_subnet = self.subnet.backward(&cache.subnet, &d_shifted);
        let d_driver = d_driver_direct.add(&d_driver_subnet);
        // dx_other = d_shifted unchanged
        if self.swap {
            crate::numerics::tensor::concat_channels(&[&d_shifted, &d_driver])
        } else {
            crate::numerics::tensor::concat_channels(&[&d_driver, &d_shifted])
        }
    }
}

// ── squeeze / unsqueeze ─────────────────────────────────────────────────

/// y[n, 4i+c, h, w] = x[n, i, 2h + c/2, 2w + c%2]; pure permutation.
pub fn squeeze<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dim4();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("squeeze needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, 4 * c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for sub in 0..4usize {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let v = x.at4(ni, ci, 2 * yy + sub / 2, 2 * xx + sub % 2);
                        y.set4(ni, 4 * ci + sub, yy, xx, v);
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Exact inverse of `squeeze`.
pub fn unsqueeze<F: Scalar>(y: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c4, oh, ow) = y.dim4();
    if c4 % 4 != 0 {
        return Err(Error::shape(format!("unsqueeze needs channels divisible by 4, got {c4}")));
    }
    let c = c4 / 4;
    let mut x = Tensor::zeros(&[n, c, oh * 2, ow * 2]);
    for ni in 0..n {
        for ci in 0..c {
            for sub in 0..4usize {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let v = y.at4(ni, 4 * ci + sub, yy, xx);
                        x.set4(ni, ci, 2 * yy + sub / 2, 2 * xx + sub % 2, v);
                    }
                }
            }
        }
    }
    Ok(x)
}
