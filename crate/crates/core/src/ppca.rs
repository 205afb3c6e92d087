//! Closed forms for the linear-Gaussian (probabilistic PCA) model
//! `p(z) = N(0, I)`, `p(x|z) = N(W z, v I)` and its exact encoder.

use crate::error::{Error, Result};
use crate::gaussian::FullGaussian;
use crate::linalg::{self, identity, inverse, matvec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest accepted condition number of `W^T W + v I`.
pub const CONDITION_LIMIT: f64 = 1e8;

#[derive(Clone, Debug, PartialEq)]
pub struct PpcaModel<S> {
    /// `[obs, latent]`
    pub w: Tensor<S>,
    pub v: S,
}

impl<S: Scalar> PpcaModel<S> {
    pub fn new(w: Tensor<S>, v: S) -> Result<Self> {
        if w.rank() != 2 || w.cols() > w.rows() {
            return Err(Error::Dimension {
                op: "ppca",
                lhs: w.shape().to_vec(),
                rhs: vec![],
            });
        }
        if !(v >= S::zero()) {
            return Err(Error::Domain(format!("noise variance {v} must be non-negative")));
        }
        let m = Self { w, v };
        m.normal_matrix()?;
        Ok(m)
    }

    pub fn obs_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.cols()
    }

    /// Condition number of `W^T W + v I`.
    pub fn condition(&self) -> Result<S> {
        let wt = self.w.transpose()?;
        let m = linalg::add(&wt.matmul(&self.w)?, &linalg::scale(&identity(self.latent_dim()), self.v))?;
        linalg::condition_number(&m)
    }

    /// `M = W^T W + v I`, refused when ill-conditioned or rank deficient.
    pub fn normal_matrix(&self) -> Result<Tensor<S>> {
        let wt = self.w.transpose()?;
        let m = linalg::add(&wt.matmul(&self.w)?, &linalg::scale(&identity(self.latent_dim()), self.v))?;
        let c = linalg::condition_number(&m)?;
        if !(c <= S::c(CONDITION_LIMIT)) {
            return Err(Error::Numeric(format!(
                "W^T W + vI has condition number {:e} (limit {CONDITION_LIMIT:e})",
                c.to_f64_lossy()
            )));
        }
        Ok(m)
    }

    fn m_inv(&self) -> Result<Tensor<S>> {
        inverse(&self.normal_matrix()?)
    }

    /// Linear map of the exact posterior mean, `M^-1 W^T` (`[latent, obs]`).
    pub fn encoder_matrix(&self) -> Result<Tensor<S>> {
        self.m_inv()?.matmul(&self.w.transpose()?)
    }

    /// Exact posterior covariance `v M^-1`.
    pub fn posterior_cov(&self) -> Result<Tensor<S>> {
        Ok(linalg::scale(&self.m_inv()?, self.v))
    }

    /// `P = W M^-1 W^T`.
    pub fn projection(&self) -> Result<Tensor<S>> {
        self.w.matmul(&self.encoder_matrix()?)
    }

    /// Latent kernel `(J, S)` with `J = M^-1 W^T W`, `S = v (J + I) M^-1`.
    pub fn z_kernel(&self) -> Result<(Tensor<S>, Tensor<S>)> {
        let minv = self.m_inv()?;
        let j = minv.matmul(&self.w.transpose()?.matmul(&self.w)?)?;
        let jp = linalg::add(&j, &identity(self.latent_dim()))?;
        let s = linalg::scale(&jp.matmul(&minv)?, self.v);
        Ok((j, s))
    }

    /// Projector onto `range(W)`, independent of `v`.
    pub fn range_projector(&self) -> Result<Tensor<S>> {
        let wt = self.w.transpose()?;
        self.w.matmul(&inverse(&wt.matmul(&self.w)?)?)?.matmul(&wt)
    }
}

fn check_len(n: usize, expected: usize, op: &'static str) -> Result<()> {
    if n != expected {
        return Err(Error::Dimension {
            op,
            lhs: vec![expected],
            rhs: vec![n],
        });
    }
    Ok(())
}

/// `q(z|x) = N(M^-1 W^T x, v M^-1)`.
pub fn exact_posterior<S: Scalar>(m: &PpcaModel<S>, x: &[S]) -> Result<FullGaussian<S>> {
    check_len(x.len(), m.obs_dim(), "exact_posterior")?;
    let mean = matvec(&m.encoder_matrix()?, x)?;
    FullGaussian::new(mean, m.posterior_cov()?)
}

/// `Q(x'|x) = N(P x, v (P + I))`.
pub fn x_transition<S: Scalar>(m: &PpcaModel<S>, x: &[S]) -> Result<FullGaussian<S>> {
    check_len(x.len(), m.obs_dim(), "x_transition")?;
    let p = m.projection()?;
    let mean = matvec(&p, x)?;
    let cov = linalg::scale(&linalg::add(&p, &identity(m.obs_dim()))?, m.v);
    FullGaussian::new(mean, cov)
}

/// `Q(z'|z) = N(J z, S)`.
pub fn z_transition<S: Scalar>(m: &PpcaModel<S>, z: &[S]) -> Result<FullGaussian<S>> {
    check_len(z.len(), m.latent_dim(), "z_transition")?;
    let (j, s) = m.z_kernel()?;
    FullGaussian::new(matvec(&j, z)?, s)
}

/// Iterates of the perturbed mean map and two distances per step.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftTrace<S> {
    /// `x_0, ..., x_steps`.
    pub states: Vec<Vec<S>>,
    /// Norm of the component of `x_t` orthogonal to `range(W)`.
    pub orthogonal: Vec<S>,
    /// `||x_t - P x_0||`: distance from where the unperturbed chain settles.
    pub drift: Vec<S>,
}

/// Runs `x_{t+1} = W (M^-1 W^T + delta) x_t`.
pub fn perturbed_drift<S: Scalar>(m: &PpcaModel<S>, delta: &Tensor<S>, x0: &[S], steps: usize) -> Result<DriftTrace<S>> {
    check_len(x0.len(), m.obs_dim(), "perturbed_drift")?;
    if delta.shape() != [m.latent_dim(), m.obs_dim()] {
        return Err(Error::Dimension {
            op: "perturbed_drift",
            lhs: vec![m.latent_dim(), m.obs_dim()],
            rhs: delta.shape().to_vec(),
        });
    }
    let enc = linalg::add(&m.encoder_matrix()?, delta)?;
    let map = m.w.matmul(&enc)?;
    let proj = m.range_projector()?;
    let anchor = matvec(&m.projection()?, x0)?;
    let orth = |x: &[S]| -> Result<S> {
        let px = matvec(&proj, x)?;
        Ok(x.iter().zip(&px).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>().sqrt())
    };
    let dist = |x: &[S]| -> S { x.iter().zip(&anchor).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>().sqrt() };
    let mut states = vec![x0.to_vec()];
    let mut orthogonal = vec![orth(x0)?];
    let mut drift = vec![dist(x0)];
    for _ in 0..steps {
        let next = matvec(&map, states.last().expect("non-empty"))?;
        orthogonal.push(orth(&next)?);
        drift.push(dist(&next));
        states.push(next);
    }
    Ok(DriftTrace {
        states,
        orthogonal,
        drift,
    })
}

/// Closed-form identities of the exact linear-Gaussian pair, as residuals.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IdentityResiduals {
    /// `max |P^2 - P|` at `v = 0`.
    pub idempotence: f64,
    /// `max |P P x - P x|` for a probe vector at `v = 0`.
    pub fixed_point: f64,
    /// Exact posterior against conditioning the joint of `(Z, X)`.
    pub posterior_vs_conditioning: f64,
    /// `max |Cov(X, X') - Cov(X', X)|` under `p(X) Q(X'|X)`.
    pub x_joint_symmetry: f64,
    /// `max |Cov(X') - Cov(X)|` under `p(X) Q(X'|X)`.
    pub x_marginal_invariance: f64,
    /// `max |J J^T + S - I|`.
    pub z_marginal_invariance: f64,
    /// `max |J - I|` at `v = 1e-8`.
    pub small_noise_identity: f64,
}

impl IdentityResiduals {
    pub fn max(&self) -> f64 {
        [
            self.idempotence,
            self.fixed_point,
            self.posterior_vs_conditioning,
            self.x_joint_symmetry,
            self.x_marginal_invariance,
            self.z_marginal_invariance,
            self.small_noise_identity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn max_abs<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    a.max_abs_diff(b).to_f64_lossy()
}

/// Evaluates every identity for loading `w` and noise `v > 0`; `probe` is an
/// observation-space vector.
pub fn identity_residuals<S: Scalar>(w: &Tensor<S>, v: S, probe: &[S]) -> Result<IdentityResiduals> {
    let exact = PpcaModel::new(w.clone(), S::zero())?;
    let p0 = exact.projection()?;
    let idempotence = max_abs(&p0.matmul(&p0)?, &p0);
    let px = matvec(&p0, probe)?;
    let ppx = matvec(&p0, &px)?;
    let fixed_point = px.iter().zip(&ppx).map(|(a, b)| (*a - *b).abs().to_f64_lossy()).fold(0.0, f64::max);

    let m = PpcaModel::new(w.clone(), v)?;
    let obs = m.obs_dim();
    let wt = w.transpose()?;
    // Joint of (Z, X): Cov(X) = W W^T + v I, Cov(Z, X) = W^T.
    let cx = linalg::add(&w.matmul(&wt)?, &linalg::scale(&identity(obs), v))?;
    let cx_inv = inverse(&cx)?;
    let gain = wt.matmul(&cx_inv)?;
    let cond_cov = linalg::sub(&identity(m.latent_dim()), &gain.matmul(w)?)?;
    let q = exact_posterior(&m, probe)?;
    let cond_mean = matvec(&gain, probe)?;
    let mean_err = q.mean.iter().zip(&cond_mean).map(|(a, b)| (*a - *b).abs().to_f64_lossy()).fold(0.0, f64::max);
    let posterior_vs_conditioning = mean_err.max(max_abs(&q.cov, &cond_cov));

    let p = m.projection()?;
    let cross = p.matmul(&cx)?;
    let x_joint_symmetry = max_abs(&cross, &cross.transpose()?);
    let trans_cov = linalg::scale(&linalg::add(&p, &identity(obs))?, v);
    let cx_next = linalg::add(&cross.matmul(&p.transpose()?)?, &trans_cov)?;
    let x_marginal_invariance = max_abs(&cx_next, &cx);

    let (j, s) = m.z_kernel()?;
    let z_marginal_invariance = max_abs(&linalg::add(&j.matmul(&j.transpose()?)?, &s)?, &identity(m.latent_dim()));

    let tiny = PpcaModel::new(w.clone(), S::c(1e-8))?;
    let (jt, _) = tiny.z_kernel()?;
    let small_noise_identity = max_abs(&jt, &identity(m.latent_dim()));

    Ok(IdentityResiduals {
        idempotence,
        fixed_point,
        posterior_vs_conditioning,
        x_joint_symmetry,
        x_marginal_invariance,
        z_marginal_invariance,
        small_noise_identity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_loading_unit_noise() {
        let m = PpcaModel::new(identity::<f64>(2), 1.0).unwrap();
        let q = exact_posterior(&m, &[2.0, -4.0]).unwrap();
        assert_eq!(q.mean, vec![1.0, -2.0]);
        assert!(q.cov.max_abs_diff(&linalg::scale(&identity(2), 0.5)) < 1e-15);
    }

    #[test]
    fn one_dimensional_kernel() {
        let m = PpcaModel::new(Tensor::matrix(1, 1, vec![1.0f64]).unwrap(), 1.0).unwrap();
        let (j, s) = m.z_kernel().unwrap();
        assert!((j.item().unwrap() - 0.5).abs() < 1e-15);
        assert!((s.item().unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rank_deficient_loading_is_refused() {
        let w = Tensor::matrix(3, 2, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0]).unwrap();
        assert!(matches!(PpcaModel::new(w, 0.0), Err(Error::Numeric(_))));
    }
}
