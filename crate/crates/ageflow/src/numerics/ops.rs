//! Deterministic tensor kernels with explicit reverse-mode backward
//! functions. Each kernel is pure; training composes them by hand.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

// ── matmul wrappers ─────────────────────────────────────────────────────

/// C(m,n) = A(m,k) · B(k,n), overwriting C.
pub fn gemm<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    F::gemm_strided(
        m, k, n,
        F::one(),
        a, k as isize, 1,
        b, n as isize, 1,
        F::zero(),
        c, n as isize, 1,
    );
}

/// C(m,n) = A(m,k) · B(n,k)ᵀ, overwriting C.
pub fn gemm_nt<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    F::gemm_strided(
        m, k, n,
        F::one(),
        a, k as isize, 1,
        b, 1, k as isize,
        F::zero(),
        c, n as isize, 1,
    );
}

/// C(m,n) += A(m,k) · B(n,k)ᵀ.
pub fn gemm_nt_acc<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    F::gemm_strided(
        m, k, n,
        F::one(),
        a, k as isize, 1,
        b, 1, k as isize,
        F::one(),
        c, n as isize, 1,
    );
}

/// C(m,n) = A(k,m)ᵀ · B(k,n); `accumulate` adds into C instead of overwriting.
pub fn gemm_tn<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], accumulate: bool) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm_strided(
        m, k, n,
        F::one(),
        a, 1, m as isize,
        b, n as isize, 1,
        beta,
        c, n as isize, 1,
    );
}

// ── 2-d convolution (cross-correlation) ─────────────────────────────────

fn im2col<F: Scalar>(x: &[F], c_in: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<F> {
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    let mut col = vec![F::zero(); c_in * k * k * oh * ow];
    for ci in 0..c_in {
        for dh in 0..k {
            for dw in 0..k {
                let row = (ci * k + dh) * k + dw;
                for out_y in 0..oh {
                    let in_y = out_y as isize + dh as isize - pad as isize;
                    if in_y < 0 || in_y >= h as isize {
                        continue;
                    }
                    // contiguous run of valid input columns
                    let shift = dw as isize - pad as isize;
                    let x0 = (-shift).max(0) as usize;
                    let x1 = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let src_base = (ci * h + in_y as usize) * w;
                    let dst_base = row * oh * ow + out_y * ow;
                    let src = &x[src_base + (x0 as isize + shift) as usize
                        ..src_base + (x1 as isize + shift) as usize];
                    col[dst_base + x0..dst_base + x1].copy_from_slice(src);
                }
            }
        }
    }
    col
}

fn col2im<F: Scalar>(col: &[F], c_in: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<F> {
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    let mut x = vec![F::zero(); c_in * h * w];
    for ci in 0..c_in {
        for dh in 0..k {
            for dw in 0..k {
                let row = (ci * k + dh) * k + dw;
                for out_y in 0..oh {
                    let in_y = out_y as isize + dh as isize - pad as isize;
                    if in_y < 0 || in_y >= h as isize {
                        continue;
                    }
                    let shift = dw as isize - pad as isize;
                    let x0 = (-shift).max(0) as usize;
                    let x1 = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let src_base = row * oh * ow + out_y * ow;
                    let dst_base = (ci * h + in_y as usize) * w;
                    for ox in x0..x1 {
                        let d = dst_base + (ox as isize + shift) as usize;
                        x[d] = x[d] + col[src_base + ox];
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation of one sample: input [C_in,H,W], kernel
/// [C_out,C_in,kH,kW] (kH = kW odd), bias [C_out].
pub fn conv2d<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
    padding: usize,
) -> Result<Tensor<F>> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    if ishape.len() != 3 || kshape.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects input [C,H,W] and kernel [Co,Ci,kH,kW], got {ishape:?} / {kshape:?}"
        )));
    }
    let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (c_out, kc_in, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if kc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {c_in}, kernel expects {kc_in}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(format!("conv2d kernel must be square and odd, got {kh}x{kw}")));
    }
    if bias.len() != c_out {
        return Err(Error::shape(format!("conv2d bias length {} != {c_out}", bias.len())));
    }
    let oh = h + 2 * padding - kh + 1;
    let ow = w + 2 * padding - kw + 1;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("conv2d output would be empty"));
    }

    let col = im2col(input.data(), c_in, h, w, kh, padding);
    let mut out = vec![F::zero(); c_out * oh * ow];
    gemm(c_out, c_in * kh * kw, oh * ow, kernel.data(), &col, &mut out);
    for co in 0..c_out {
        let b = bias.data()[co];
        for v in &mut out[co * oh * ow..(co + 1) * oh * ow] {
            *v = *v + b;
        }
    }
    Ok(Tensor::from_vec(&[c_out, oh, ow], out))
}

/// Gradients of `conv2d` w.r.t. input, kernel, and bias.
pub fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    padding: usize,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, _, kh, _) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let kdim = c_in * kh * kh;
    let p = oh * ow;

    // db
    let mut db = Tensor::zeros(&[c_out]);
    for co in 0..c_out {
        let mut s = F::zero();
        for &v in &dy.data()[co * p..(co + 1) * p] {
            s = s + v;
        }
        db.data_mut()[co] = s;
    }

    // dW = dY (c_out, p) · colᵀ (p, kdim)
    let col = im2col(input.data(), c_in, h, w, kh, padding);
    let mut dw = vec![F::zero(); c_out * kdim];
    gemm_nt(c_out, p, kdim, dy.data(), &col, &mut dw);

    // dX = col2im(Wᵀ · dY)
    let mut dcol = vec![F::zero(); kdim * p];
    gemm_tn(kdim, c_out, p, kernel.data(), dy.data(), &mut dcol, false);
    let dx = col2im(&dcol, c_in, h, w, kh, padding);

    (
        Tensor::from_vec(&[c_in, h, w], dx),
        Tensor::from_vec(kernel.shape(), dw),
        db,
    )
}

// ── dense (fully connected) ─────────────────────────────────────────────

/// Y(n, out) = X(n, in) · W(out, in)ᵀ + b.
pub fn dense<F: Scalar>(x: &Tensor<F>, weight: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let (d_out, wk) = (weight.shape()[0], weight.shape()[1]);
    if wk != d_in || bias.len() != d_out {
        return Err(Error::shape(format!(
            "dense: x {:?} vs weight {:?} / bias {}",
            x.shape(),
            weight.shape(),
            bias.len()
        )));
    }
    let mut y = vec![F::zero(); n * d_out];
    gemm_nt(n, d_in, d_out, x.data(), weight.data(), &mut y);
    for row in 0..n {
        for (j, v) in y[row * d_out..(row + 1) * d_out].iter_mut().enumerate() {
            *v = *v + bias.data()[j];
        }
    }
    Ok(Tensor::from_vec(&[n, d_out], y))
}

/// Gradients of `dense` w.r.t. x, weight, bias.
pub fn dense_backward<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = weight.shape()[0];

    let mut dx = vec![F::zero(); n * d_in];
    gemm(n, d_out, d_in, dy.data(), weight.data(), &mut dx);

    let mut dw = vec![F::zero(); d_out * d_in];
    gemm_tn(d_out, n, d_in, dy.data(), x.data(), &mut dw, false);

    let mut db = Tensor::zeros(&[d_out]);
    for row in 0..n {
        for j in 0..d_out {
            db.data_mut()[j] = db.data_mut()[j] + dy.data()[row * d_out + j];
        }
    }
    (
        Tensor::from_vec(&[n, d_in], dx),
        Tensor::from_vec(weight.shape(), dw),
        db,
    )
}

// ── activations ─────────────────────────────────────────────────────────

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.max(F::zero()))
}

/// dx from dy and the forward *input*.
pub fn relu_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    x.zip_map(dy, |xi, di| if xi > F::zero() { di } else { F::zero() })
}

pub fn leaky_relu<F: Scalar>(x: &Tensor<F>, slope: F) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<F: Scalar>(x: &Tensor<F>, slope: F, dy: &Tensor<F>) -> Tensor<F> {
    x.zip_map(dy, |xi, di| if xi > F::zero() { di } else { di * slope })
}

pub fn sigmoid<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// dx from dy and the forward *output*.
pub fn sigmoid_backward<F: Scalar>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    y.zip_map(dy, |yi, di| di * yi * (F::one() - yi))
}

pub fn softplus<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.max(F::zero()) + (-v.abs()).exp().ln_1p())
}

pub fn softplus_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    x.zip_map(dy, |xi, di| di * sigmoid_scalar(xi))
}

// ── pooling / broadcast over space ──────────────────────────────────────

/// [N,C,H,W] → [N,C] spatial mean.
pub fn global_avg_pool<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = x.dim4();
    let plane = h * w;
    let inv = F::from_f64(1.0 / plane as f64);
    let mut out = Tensor::zeros(&[n, c]);
    for ni in 0..n {
        let s = x.sample(ni);
        for ci in 0..c {
            let mut acc = F::zero();
            for &v in &s[ci * plane..(ci + 1) * plane] {
                acc = acc + v;
            }
            out.data_mut()[ni * c + ci] = acc * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<F: Scalar>(
    dy: &Tensor<F>,
    h: usize,
    w: usize,
) -> Tensor<F> {
    let (n, c) = (dy.shape()[0], dy.shape()[1]);
    let inv = F::from_f64(1.0 / (h * w) as f64);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let g = dy.data()[ni * c + ci] * inv;
            for v in &mut dx.sample_mut(ni)[ci * h * w..(ci + 1) * h * w] {
                *v = g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution used as the independent oracle.
    fn conv2d_naive(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        let mut y = Tensor::zeros(&[c_out, oh, ow]);
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..c_in {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = oy as isize + dy as isize - pad as isize;
                                let ix = ox as isize + dx as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data()[(ci * h + iy as usize) * w + ix as usize]
                                    * k.data()[((co * c_in + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    y.data_mut()[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_identity_1x1() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 3], |i| i as f64 - 4.0);
        // 1x1 kernel selecting each input channel
        let mut k = Tensor::zeros(&[2, 2, 1, 1]);
        k.data_mut()[0] = 1.0; // out0 <- in0
        k.data_mut()[3] = 1.0; // out1 <- in1
        let b = Tensor::zeros(&[2]);
        let y = conv2d(&x, &k, &b, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_kernel_constant_bias() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
        let k = Tensor::zeros(&[3, 1, 3, 3]);
        let b = Tensor::from_vec(&[3], vec![2.5, -1.0, 0.0]);
        let y = conv2d(&x, &k, &b, 1).unwrap();
        for co in 0..3 {
            for &v in &y.data()[co * 16..(co + 1) * 16] {
                assert_eq!(v, b.data()[co]);
            }
        }
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = crate::numerics::rng::Rng::new(11);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 5, 6], 1.0);
        let k: Tensor<f64> = rng.normal_tensor(&[4, 3, 3, 3], 0.5);
        let b: Tensor<f64> = rng.normal_tensor(&[4], 0.3);
        let fast = conv2d(&x, &k, &b, 1).unwrap();
        let slow = conv2d_naive(&x, &k, &b, 1);
        assert_eq!(fast.shape(), slow.shape());
        for (a, n) in fast.data().iter().zip(slow.data()) {
            let rel = (a - n).abs() / n.abs().max(1.0);
            assert!(rel < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        assert!(conv2d(&x, &k, &b, 1).is_err());
    }

    #[test]
    fn dense_matches_manual() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let w = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let b = Tensor::<f64>::from_vec(&[2], vec![0.1, -0.2]);
        let y = dense(&x, &w, &b).unwrap();
        assert!((y.data()[0] - (1.0 - 3.0 + 0.1)).abs() < 1e-12);
        assert!((y.data()[1] - (0.5 + 1.0 + 1.5 - 0.2)).abs() < 1e-12);
        assert!((y.data()[2] - (-1.0 - 2.0 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn kernels_are_pure() {
        let mut rng = crate::numerics::rng::Rng::new(3);
        let x: Tensor<f32> = rng.normal_tensor(&[2, 4, 4], 1.0);
        let k: Tensor<f32> = rng.normal_tensor(&[2, 2, 3, 3], 1.0);
        let b: Tensor<f32> = rng.normal_tensor(&[2], 1.0);
        let y1 = conv2d(&x, &k, &b, 1).unwrap();
        let y2 = conv2d(&x, &k, &b, 1).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn activations_match_finite_difference_gradients() {
        use crate::numerics::gradcheck::{compare_grads, finite_diff_grad};
        let mut rng = crate::numerics::rng::Rng::new(7);
        // keep values away from the ReLU kink so central differences are valid
        let x = rng.normal_tensor::<f64>(&[12], 1.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let r: Tensor<f64> = rng.normal_tensor(&[12], 1.0);
        let slope = 0.2;

        let check = |name: &str, analytic: Tensor<f64>, numeric: Tensor<f64>| {
            let chk = compare_grads(&analytic, &numeric, 1e-4, 1e-8);
            assert!(chk.ok, "{name}: rel {}", chk.max_rel_diff);
        };
        check("relu", relu_backward(&x, &r), finite_diff_grad(|t| relu(t).dot(&r), &x, 1e-5));
        check(
            "leaky_relu",
            leaky_relu_backward(&x, slope, &r),
            finite_diff_grad(|t| leaky_relu(t, slope).dot(&r), &x, 1e-5),
        );
        check(
            "sigmoid",
            sigmoid_backward(&sigmoid(&x), &r),
            finite_diff_grad(|t| sigmoid(t).dot(&r), &x, 1e-5),
        );
        check(
            "softplus",
            softplus_backward(&x, &r),
            finite_diff_grad(|t| softplus(t).dot(&r), &x, 1e-5),
        );

        // global average pooling
        let x4: Tensor<f64> = rng.normal_tensor(&[2, 3, 2, 2], 1.0);
        let r4: Tensor<f64> = rng.normal_tensor(&[2, 3], 1.0);
        let analytic = global_avg_pool_backward(&r4, 2, 2);
        let numeric = finite_diff_grad(|t| global_avg_pool(t).dot(&r4), &x4, 1e-6);
        assert!(compare_grads(&analytic, &numeric, 1e-4, 1e-9).ok);

        // dense layer input and parameter gradients
        let xd: Tensor<f64> = rng.normal_tensor(&[3, 4], 1.0);
        let w: Tensor<f64> = rng.normal_tensor(&[2, 4], 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[2], 1.0);
        let rd: Tensor<f64> = rng.normal_tensor(&[3, 2], 1.0);
        let (dx, dw, db) = dense_backward(&xd, &w, &rd);
        let num_dx = finite_diff_grad(|t| dense(t, &w, &b).unwrap().dot(&rd), &xd, 1e-6);
        let num_dw = finite_diff_grad(|t| dense(&xd, t, &b).unwrap().dot(&rd), &w, 1e-6);
        let num_db = finite_diff_grad(|t| dense(&xd, &w, t).unwrap().dot(&rd), &b, 1e-6);
        assert!(compare_grads(&dx, &num_dx, 1e-4, 1e-9).ok);
        assert!(compare_grads(&dw, &num_dw, 1e-4, 1e-9).ok);
        assert!(compare_grads(&db, &num_db, 1e-4, 1e-9).ok);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        use crate::numerics::gradcheck::{compare_grads, finite_diff_grad};
        let mut rng = crate::numerics::rng::Rng::new(8);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 4, 5], 1.0);
        let k: Tensor<f64> = rng.normal_tensor(&[3, 2, 3, 3], 0.5);
        let b: Tensor<f64> = rng.normal_tensor(&[3], 0.3);
        let r: Tensor<f64> = rng.normal_tensor(&[3, 4, 5], 1.0);
        let (dx, dw, db) = conv2d_backward(&x, &k, 1, &r);
        let num_dx = finite_diff_grad(|t| conv2d(t, &k, &b, 1).unwrap().dot(&r), &x, 1e-6);
        let num_dw = finite_diff_grad(|t| conv2d(&x, t, &b, 1).unwrap().dot(&r), &k, 1e-6);
        let num_db = finite_diff_grad(|t| conv2d(&x, &k, t, 1).unwrap().dot(&r), &b, 1e-6);
        assert!(compare_grads(&dx, &num_dx, 1e-4, 1e-8).ok);
        assert!(compare_grads(&dw, &num_dw, 1e-4, 1e-8).ok);
        assert!(compare_grads(&db, &num_db, 1e-4, 1e-8).ok);
    }
}
