//! Scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar the toolkit is generic over: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Lossy widening used by reports and serialization.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for [`Real::lit`].
#[inline]
pub(crate) fn lit<T: Real>(x: f64) -> T {
    T::lit(x)
}

/// Converts a count into the scalar type.
#[inline]
pub(crate) fn count<T: Real>(n: usize) -> T {
    T::from_usize(n).expect("count representable in scalar type")
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations.
///
/// `a` is a dense row-major `n × n` symmetric matrix. Returns eigenvalues and
/// the row-major matrix whose columns are the corresponding eigenvectors.
pub fn symmetric_eigen<T: Real>(a: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    assert_eq!(a.len(), n * n, "matrix shape mismatch");
    let mut m = a.to_vec();
    let mut vecs = vec![T::zero(); n * n];
    for i in 0..n {
        vecs[i * n + i] = T::one();
    }
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..n {
            diag = diag + m[i * n + i] * m[i * n + i];
            for j in (i + 1)..n {
                off = off + m[i * n + j] * m[i * n + j];
            }
        }
        if off <= eps * eps * diag || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (lit::<T>(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = vecs[k * n + p];
                    let vkq = vecs[k * n + q];
                    vecs[k * n + p] = c * vkp - s * vkq;
                    vecs[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| m[i * n + i]).collect();
    (vals, vecs)
}

/// Applies `f` to the eigenvalues of a symmetric matrix: `V f(Λ) Vᵀ`.
pub(crate) fn symmetric_apply<T: Real>(a: &[T], n: usize, f: impl Fn(T) -> T) -> Vec<T> {
    let (vals, vecs) = symmetric_eigen(a, n);
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = T::zero();
            for k in 0..n {
                acc = acc + vecs[i * n + k] * f(vals[k]) * vecs[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Ordinary least squares fit of `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit<T> {
    pub slope: T,
    pub intercept: T,
    pub slope_se: T,
    pub r2: T,
}

pub(crate) fn fit_line<T: Real>(xs: &[T], ys: &[T]) -> LineFit<T> {
    let n = count::<T>(xs.len());
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let mut sxx = T::zero();
    let mut sxy = T::zero();
    let mut syy = T::zero();
    for (&x, &y) in xs.iter().zip(ys) {
        sxx = sxx + (x - mx) * (x - mx);
        sxy = sxy + (x - mx) * (y - my);
        syy = syy + (y - my) * (y - my);
    }
    let slope = if sxx > T::zero() { sxy / sxx } else { T::zero() };
    let intercept = my - slope * mx;
    let ss_res = ys
        .iter()
        .zip(xs)
        .map(|(&y, &x)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum::<T>();
    let r2 = if syy > T::zero() {
        (T::one() - ss_res / syy).max(T::zero()).min(T::one())
    } else {
        T::zero()
    };
    let slope_se = if xs.len() > 2 && sxx > T::zero() {
        (ss_res / (n - lit(2.0)) / sxx).sqrt()
    } else {
        T::zero()
    };
    LineFit {
        slope,
        intercept,
        slope_se,
        r2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let a = [1.125_f64, -0.125, -0.125, 1.125];
        let (mut vals, _) = symmetric_eigen(&a, 2);
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((vals[0] - 1.0).abs() < 1e-14);
        assert!((vals[1] - 1.25).abs() < 1e-14);
    }

    #[test]
    fn matrix_square_root_squares_back() {
        let a = [2.0_f64, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0];
        let r = symmetric_apply(&a, 3, |x| x.sqrt());
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| r[i * 3 + k] * r[k * 3 + j]).sum();
                assert!((v - a[i * 3 + j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn line_fit_is_exact_on_a_line() {
        let xs = [0.0_f64, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x).collect();
        let fit = fit_line(&xs, &ys);
        assert!((fit.slope + 2.0).abs() < 1e-14);
        assert!((fit.r2 - 1.0).abs() < 1e-14);
    }
}
