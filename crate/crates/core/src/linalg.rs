//! Small dense linear algebra for d×d covariance matrices.
//!
//! Matrices are row-major `Vec<f64>` of length `d * d`. The dimensions in
//! this crate are tiny (1, 2, 8), so nothing here tries to be clever.

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub(crate) struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
    log_det: f64,
}

impl Cholesky {
    /// Returns `None` when a pivot is not strictly positive.
    pub fn new(a: &[f64], dim: usize) -> Option<Self> {
        debug_assert_eq!(a.len(), dim * dim);
        let mut l = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut sum = a[i * dim + j];
                for k in 0..j {
                    sum -= l[i * dim + k] * l[j * dim + k];
                }
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return None;
                    }
                    l[i * dim + i] = sum.sqrt();
                } else {
                    l[i * dim + j] = sum / l[j * dim + j];
                }
            }
        }
        let log_det = 2.0 * (0..dim).map(|i| l[i * dim + i].ln()).sum::<f64>();
        Some(Self {
            dim,
            lower: l,
            log_det,
        })
    }

    /// Solves `L y = b` in place.
    fn forward_substitute(&self, b: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lower[i * d + k] * b[k];
            }
            b[i] = s / self.lower[i * d + i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    fn back_substitute(&self, y: &mut [f64]) {
        let d = self.dim;
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in i + 1..d {
                s -= self.lower[k * d + i] * y[k];
            }
            y[i] = s / self.lower[i * d + i];
        }
    }

    /// `(x - mean)ᵀ A⁻¹ (x - mean)`.
    pub fn mahalanobis_sq(&self, x: &[f64], mean: &[f64]) -> f64 {
        let mut r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        self.forward_substitute(&mut r);
        r.iter().map(|v| v * v).sum()
    }

    /// `log N(x; mean, A)`.
    pub fn log_normal_density(&self, x: &[f64], mean: &[f64]) -> f64 {
        let d = self.dim as f64;
        -0.5 * (d * LN_2PI + self.log_det + self.mahalanobis_sq(x, mean))
    }

    /// `A⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let mut r = v.to_vec();
        self.forward_substitute(&mut r);
        self.back_substitute(&mut r);
        r
    }

    pub fn inverse(&self) -> Vec<f64> {
        let d = self.dim;
        let mut inv = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        for j in 0..d {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..d {
                inv[i * d + j] = col[i];
            }
        }
        symmetrize(&mut inv, d);
        inv
    }

    /// `mean + L z`.
    pub fn transform(&self, mean: &[f64], z: &[f64]) -> Vec<f64> {
        lower_transform(&self.lower, self.dim, mean, z)
    }
}

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Square root factor of a symmetric positive-semidefinite matrix.
///
/// Pivots below `tol * max_diag` zero their column instead of failing, so a
/// zero covariance yields a zero factor. Returns `None` for matrices with a
/// clearly negative pivot.
pub(crate) fn psd_factor(a: &[f64], dim: usize) -> Option<Vec<f64>> {
    let max_diag = (0..dim).map(|i| a[i * dim + i].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; dim * dim];
    for j in 0..dim {
        let mut diag = a[j * dim + j];
        for k in 0..j {
            diag -= l[j * dim + k] * l[j * dim + k];
        }
        if !diag.is_finite() || diag < -tol.max(1e-10 * max_diag) {
            return None;
        }
        if diag <= tol {
            continue;
        }
        let pivot = diag.sqrt();
        l[j * dim + j] = pivot;
        for i in j + 1..dim {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            l[i * dim + j] = s / pivot;
        }
    }
    Some(l)
}

pub(crate) fn lower_transform(lower: &[f64], dim: usize, mean: &[f64], z: &[f64]) -> Vec<f64> {
    (0..dim)
        .map(|i| mean[i] + (0..=i).map(|k| lower[i * dim + k] * z[k]).sum::<f64>())
        .collect()
}

pub(crate) fn mat_vec(a: &[f64], dim: usize, v: &[f64]) -> Vec<f64> {
    (0..dim)
        .map(|i| (0..dim).map(|k| a[i * dim + k] * v[k]).sum())
        .collect()
}

#[cfg(test)]
pub(crate) fn mat_mul(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for k in 0..dim {
            let aik = a[i * dim + k];
            for j in 0..dim {
                out[i * dim + j] += aik * b[k * dim + j];
            }
        }
    }
    out
}

pub(crate) fn identity(dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = 1.0;
    }
    m
}

pub(crate) fn add_diagonal(a: &mut [f64], dim: usize, value: f64) {
    for i in 0..dim {
        a[i * dim + i] += value;
    }
}

pub(crate) fn symmetrize(a: &mut [f64], dim: usize) {
    for i in 0..dim {
        for j in 0..i {
            let m = 0.5 * (a[i * dim + j] + a[j * dim + i]);
            a[i * dim + j] = m;
            a[j * dim + i] = m;
        }
    }
}

/// `log Σ exp(v)` over finite entries; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_inverse_roundtrip() {
        let a = vec![4.0, 1.2, 0.5, 1.2, 3.0, -0.4, 0.5, -0.4, 2.0];
        let c = Cholesky::new(&a, 3).unwrap();
        let prod = mat_mul(&a, &c.inverse(), 3);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * 3 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_matrix_has_no_cholesky_but_has_psd_factor() {
        let a = vec![1.0, 1.0, 1.0, 1.0];
        assert!(Cholesky::new(&a, 2).is_none());
        let l = psd_factor(&a, 2).unwrap();
        let back = mat_mul(&l, &transpose(&l, 2), 2);
        for (x, y) in back.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(psd_factor(&[0.0; 4], 2).unwrap(), vec![0.0; 4]);
        assert!(psd_factor(&[-1.0], 1).is_none());
    }

    fn transpose(a: &[f64], d: usize) -> Vec<f64> {
        let mut t = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                t[j * d + i] = a[i * d + j];
            }
        }
        t
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0, f64::NEG_INFINITY]) - 0.0).abs() < 1e-15);
    }
}
