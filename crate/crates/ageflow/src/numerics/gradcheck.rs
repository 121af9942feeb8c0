//! Verification oracles: central-difference gradients, numerically
//! assembled Jacobians, and a dense slogdet. These never call the analytic
//! backward paths they are used to check.

use super::tensor::Tensor;

/// Central-difference gradient of a scalar function, one element at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Central-difference Jacobian of a vector map f: R^n → R^m, column by column.
pub fn numeric_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], eps: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut probe = x.to_vec();
    probe[0] += 0.0;
    let m = f(x).len();
    let mut jac = vec![vec![0.0; n]; m];
    for j in 0..n {
        let orig = probe[j];
        probe[j] = orig + eps;
        let fp = f(&probe);
        probe[j] = orig - eps;
        let fm = f(&probe);
        probe[j] = orig;
        for i in 0..m {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * eps);
        }
    }
    jac
}

/// (sign, log|det|) of a dense square matrix via LU with partial pivoting.
pub fn slogdet(matrix: &[Vec<f64>]) -> (f64, f64) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut sign = 1.0;
    let mut logdet = 0.0;
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col] == 0.0 {
            return (0.0, f64::NEG_INFINITY);
        }
        if pivot != col {
            a.swap(pivot, col);
            sign = -sign;
        }
        let d = a[col][col];
        sign *= d.signum();
        logdet += d.abs().ln();
        for row in col + 1..n {
            let factor = a[row][col] / d;
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    (sign, logdet)
}

/// Result of comparing an analytic gradient against the central-difference
/// oracle with the usual combined absolute/relative tolerance.
pub struct GradCheck {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub ok: bool,
}

pub fn compare_grads(analytic: &Tensor<f64>, numeric: &Tensor<f64>, rtol: f64, atol: f64) -> GradCheck {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut ok = true;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        max_abs = max_abs.max(diff);
        if scale > 0.0 {
            max_rel = max_rel.max(diff / scale);
        }
        if diff > atol + rtol * scale {
            ok = false;
        }
    }
    GradCheck { max_abs_diff: max_abs, max_rel_diff: max_rel, ok }
}

/// Convenience wrapper: check analytic gradient of `f` at `x`.
pub fn check_gradient(
    f: impl Fn(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
) -> GradCheck {
    let numeric = finite_diff_grad(f, x, 1e-5);
    compare_grads(analytic, &numeric, 1e-4, 1e-7)
}
