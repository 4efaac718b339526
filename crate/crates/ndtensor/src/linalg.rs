//! Small dense linear algebra on square `[n, n]` tensors.

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// LU factorisation with partial pivoting, `P·A = L·U` packed in one matrix.
#[derive(Clone, Debug)]
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
    sign: T,
}

fn square_dim<T: Scalar>(a: &Tensor<T>) -> Result<usize> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => shape_err(format!("expected square matrix, got {:?}", s)),
    }
}

impl<T: Scalar> Lu<T> {
    pub fn new(a: &Tensor<T>) -> Result<Self> {
        let n = square_dim(a)?;
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    lu[i * n + col]
                        .abs()
                        .partial_cmp(&lu[j * n + col].abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(col);
            if pivot != col {
                for k in 0..n {
                    lu.swap(pivot * n + k, col * n + k);
                }
                perm.swap(pivot, col);
                sign = -sign;
            }
            let d = lu[col * n + col];
            if d == T::zero() {
                continue;
            }
            for row in col + 1..n {
                let f = lu[row * n + col] / d;
                lu[row * n + col] = f;
                for k in col + 1..n {
                    let u = lu[col * n + k];
                    lu[row * n + k] -= f * u;
                }
            }
        }
        Ok(Self { n, lu, perm, sign })
    }

    pub fn det(&self) -> T {
        (0..self.n).fold(self.sign, |acc, i| acc * self.lu[i * self.n + i])
    }

    /// `log|det A|`, accumulated in log space.
    pub fn log_abs_det(&self) -> T {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[i * n + k];
                let xk = x[k];
                x[i] -= l * xk;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.lu[i * n + k];
                let xk = x[k];
                x[i] -= u * xk;
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Tensor<T> {
        let n = self.n;
        let mut inv = vec![T::zero(); n * n];
        let mut e = vec![T::zero(); n];
        for col in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[col] = T::one();
            let x = self.solve(&e);
            for row in 0..n {
                inv[row * n + col] = x[row];
            }
        }
        Tensor::new([n, n], inv).expect("square")
    }
}

pub fn det<T: Scalar>(a: &Tensor<T>) -> Result<T> {
    Ok(Lu::new(a)?.det())
}

/// Inverse of a square matrix; errors when `|det A|` falls below `tol`.
pub fn inverse<T: Scalar>(a: &Tensor<T>, tol: f64) -> Result<Tensor<T>> {
    let lu = Lu::new(a)?;
    let d = lu.det();
    if !(d.abs().as_f64() >= tol) {
        return Err(TensorError::Singular(format!("|det| = {:e} below {:e}", d.as_f64(), tol)));
    }
    Ok(lu.inverse())
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => {
            let mut c = vec![T::zero(); m * n];
            crate::kernels::gemm(*m, *k, *n, a.data(), b.data(), &mut c);
            Tensor::new([*m, *n], c)
        }
        (sa, sb) => shape_err(format!("matmul shapes {:?} x {:?}", sa, sb)),
    }
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    match a.shape() {
        [r, c] => {
            let (r, c) = (*r, *c);
            Ok(Tensor::from_fn([c, r], |i| a.data()[(i % r) * c + i / r]))
        }
        s => shape_err(format!("transpose needs a matrix, got {:?}", s)),
    }
}

/// Orthonormalises the columns of a square matrix (modified Gram-Schmidt).
/// Used to turn a Gaussian draw into a random orthogonal matrix.
pub fn orthonormalize<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let n = square_dim(a)?;
    let mut q = a.data().to_vec();
    for j in 0..n {
        for k in 0..j {
            let dot: T = (0..n).map(|i| q[i * n + j] * q[i * n + k]).sum();
            for i in 0..n {
                let qk = q[i * n + k];
                q[i * n + j] -= dot * qk;
            }
        }
        let norm = (0..n).map(|i| q[i * n + j] * q[i * n + j]).sum::<T>().sqrt();
        if norm.as_f64() < 1e-12 {
            return Err(TensorError::Singular("rank-deficient matrix".into()));
        }
        for i in 0..n {
            q[i * n + j] /= norm;
        }
    }
    Tensor::new([n, n], q)
}
