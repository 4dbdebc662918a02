//! Thin helpers over LAPACK for the few dense operations the engine needs.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, UPLO};
use num_complex::Complex64;

use crate::error::Result;

/// exp(-s * h) for real symmetric h.
pub fn expm_neg_sym(h: &Array2<f64>, s: f64) -> Result<Array2<f64>> {
    let (w, v) = h.eigh(UPLO::Lower)?;
    let scaled = Array2::from_shape_fn(v.raw_dim(), |(i, k)| v[[i, k]] * (-s * w[k]).exp());
    Ok(scaled.dot(&v.t()))
}

/// exp(-i * s * h) for complex Hermitian h.
pub fn expm_neg_i_herm(h: &Array2<Complex64>, s: f64) -> Result<Array2<Complex64>> {
    let (w, v) = h.eigh(UPLO::Lower)?;
    let phase: Array1<Complex64> = w.mapv(|e| Complex64::from_polar(1.0, -s * e));
    let scaled = Array2::from_shape_fn(v.raw_dim(), |(i, k)| v[[i, k]] * phase[k]);
    Ok(scaled.dot(&v.t().mapv(|z| z.conj())))
}

/// exp(-s * h) for complex Hermitian h (imaginary time).
pub fn expm_neg_herm(h: &Array2<Complex64>, s: f64) -> Result<Array2<Complex64>> {
    let (w, v) = h.eigh(UPLO::Lower)?;
    let scaled = Array2::from_shape_fn(v.raw_dim(), |(i, k)| v[[i, k]] * (-s * w[k]).exp());
    Ok(scaled.dot(&v.t().mapv(|z| z.conj())))
}

pub fn kron<T>(a: &Array2<T>, b: &Array2<T>) -> Array2<T>
where
    T: Copy + std::ops::Mul<Output = T>,
{
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| a[[i / br, j / bc]] * b[[i % br, j % bc]])
}

/// Largest |a_ij - conj(a_ji)|.
pub fn hermiticity_defect(a: &Array2<Complex64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((a[[i, j]] - a[[j, i]].conj()).norm());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_diagonal() {
        let h = Array2::from_diag(&ndarray::arr1(&[0.0, 1.0, 2.0]));
        let e = expm_neg_sym(&h, 0.5).unwrap();
        for k in 0..3 {
            assert!((e[[k, k]] - (-0.5 * k as f64).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn unitary_exponential_is_unitary() {
        let h = Array2::from_shape_fn((4, 4), |(i, j)| {
            let re = ((i + 2 * j) as f64).cos() + ((j + 2 * i) as f64).cos();
            let im = ((i * j) as f64).sin() - ((j * i) as f64).sin() + (i as f64 - j as f64) * 0.3;
            Complex64::new(re, im)
        });
        let u = expm_neg_i_herm(&h, 0.7).unwrap();
        let prod = u.t().mapv(|z| z.conj()).dot(&u);
        for i in 0..4 {
            for j in 0..4 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - Complex64::new(target, 0.0)).norm() < 1e-12);
            }
        }
    }
}
