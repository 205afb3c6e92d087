//! Small dense linear algebra on square matrices stored as rank-2 tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn square_dim<S: Scalar>(a: &Tensor<S>, op: &'static str) -> Result<usize> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

pub fn identity<S: Scalar>(n: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = S::one();
    }
    t
}

pub fn diag<S: Scalar>(d: &[S]) -> Tensor<S> {
    let n = d.len();
    let mut t = Tensor::zeros(vec![n, n]);
    for (i, &v) in d.iter().enumerate() {
        t.data_mut()[i * n + i] = v;
    }
    t
}

pub fn diagonal<S: Scalar>(a: &Tensor<S>) -> Vec<S> {
    let n = a.rows().min(a.cols());
    (0..n).map(|i| a.data()[i * a.cols() + i]).collect()
}

pub fn trace<S: Scalar>(a: &Tensor<S>) -> S {
    diagonal(a).into_iter().sum()
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn scale<S: Scalar>(a: &Tensor<S>, c: S) -> Tensor<S> {
    a.map(|x| x * c)
}

/// Matrix-vector product.
pub fn matvec<S: Scalar>(a: &Tensor<S>, x: &[S]) -> Result<Vec<S>> {
    if a.rank() != 2 || a.cols() != x.len() {
        return Err(Error::Dimension {
            op: "matvec",
            lhs: a.shape().to_vec(),
            rhs: vec![x.len()],
        });
    }
    Ok((0..a.rows())
        .map(|i| a.row_slice(i).iter().zip(x).map(|(&p, &q)| p * q).sum())
        .collect())
}

pub fn symmetrize<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let at = a.transpose()?;
    Ok(add(a, &at)?.map(|x| x * S::c(0.5)))
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let n = square_dim(a, "inverse")?;
    let mut m = a.data().to_vec();
    let mut inv = identity::<S>(n).into_data();
    let scale_ref = m.iter().fold(S::zero(), |acc, &x| acc.max(x.abs()));
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().partial_cmp(&m[j * n + col].abs()).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(col);
        let p = m[pivot * n + col];
        if !(p.abs() > scale_ref * S::epsilon() * S::c(n as f64)) {
            return Err(Error::Numeric(format!("singular matrix (pivot {:e} in column {col})", p.to_f64_lossy())));
        }
        if pivot != col {
            for j in 0..n {
                m.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m[i * n + col];
            if f == S::zero() {
                continue;
            }
            for j in 0..n {
                let mv = m[col * n + j];
                let iv = inv[col * n + j];
                m[i * n + j] -= f * mv;
                inv[i * n + j] -= f * iv;
            }
        }
    }
    Tensor::new(vec![n, n], inv)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues (ascending) and the matrix whose columns are the
/// corresponding eigenvectors.
pub fn sym_eigen<S: Scalar>(a: &Tensor<S>) -> Result<(Vec<S>, Tensor<S>)> {
    let n = square_dim(a, "sym_eigen")?;
    let mut m = symmetrize(a)?.into_data();
    let mut v = identity::<S>(n).into_data();
    let total: S = m.iter().map(|&x| x * x).sum();
    let tol = S::epsilon() * S::epsilon() * total.max(S::min_positive_value());
    for _sweep in 0..100 {
        let mut off = S::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[i * n + j] * m[i * n + j];
                }
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == S::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (apq + apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let t = if theta == S::zero() { S::one() } else { t };
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].partial_cmp(&m[j * n + j]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![S::zero(); n * n];
    for (newc, &oldc) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + newc] = v[r * n + oldc];
        }
    }
    Ok((vals, Tensor::new(vec![n, n], vecs)?))
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn sym_apply<S: Scalar>(a: &Tensor<S>, f: impl Fn(S) -> S) -> Result<Tensor<S>> {
    let (vals, vecs) = sym_eigen(a)?;
    let n = vals.len();
    let mut out = vec![S::zero(); n * n];
    for k in 0..n {
        let fk = f(vals[k]);
        for i in 0..n {
            let vik = vecs.data()[i * n + k] * fk;
            for j in 0..n {
                out[i * n + j] += vik * vecs.data()[j * n + k];
            }
        }
    }
    Tensor::new(vec![n, n], out)
}

/// Tolerance below which a negative eigenvalue counts as round-off.
fn psd_tol<S: Scalar>(vals: &[S]) -> S {
    let scale = vals.iter().fold(S::one(), |m, &x| m.max(x.abs()));
    scale * S::c(1e-10)
}

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues within round-off of zero are clamped; clearly negative ones are
/// reported.
pub fn sqrt_psd<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (vals, _) = sym_eigen(a)?;
    let min = vals.first().copied().unwrap_or_else(S::zero);
    if min < -psd_tol(&vals) {
        return Err(Error::NotPsd {
            min_eigenvalue: min.to_f64_lossy(),
        });
    }
    sym_apply(a, |x| x.max(S::zero()).sqrt())
}

/// Ratio of largest to smallest absolute eigenvalue of a symmetric matrix.
pub fn condition_number<S: Scalar>(a: &Tensor<S>) -> Result<S> {
    let (vals, _) = sym_eigen(a)?;
    let abs: Vec<S> = vals.iter().map(|x| x.abs()).collect();
    let hi = abs.iter().copied().fold(S::zero(), S::max);
    let lo = abs.iter().copied().fold(S::infinity(), S::min);
    Ok(if lo == S::zero() { S::infinity() } else { hi / lo })
}

/// `log det` of a symmetric positive definite matrix.
pub fn logdet_spd<S: Scalar>(a: &Tensor<S>) -> Result<S> {
    let (vals, _) = sym_eigen(a)?;
    if vals.iter().any(|&x| x <= S::zero()) {
        return Err(Error::NotPsd {
            min_eigenvalue: vals[0].to_f64_lossy(),
        });
    }
    Ok(vals.iter().map(|x| x.ln()).sum())
}
