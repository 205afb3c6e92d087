//! Diagonal Gaussian algebra.
//!
//! Every closed form has one implementation written against the autodiff
//! graph (the `*_var` functions, operating on `[batch, dim]` variables and
//! returning `[batch, 1]` per-example values). The plain-value entry points
//! evaluate the same graph code on constants, so training losses and the
//! reference values used in tests cannot drift apart.

use std::f64::consts::{E, PI};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian<S> {
    pub mu: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> DiagGaussian<S> {
    pub fn new(mu: Vec<S>, var: Vec<S>) -> Result<Self> {
        if mu.len() != var.len() {
            return Err(Error::Dimension {
                op: "diag_gaussian",
                lhs: vec![mu.len()],
                rhs: vec![var.len()],
            });
        }
        if let Some(v) = var.iter().find(|v| !(**v > S::zero())) {
            return Err(Error::Domain(format!("variance must be positive, got {v}")));
        }
        Ok(Self { mu, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![S::zero(); dim],
            var: vec![S::one(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Vec<S> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }

    pub fn to_full(&self) -> FullGaussian<S> {
        FullGaussian {
            mean: self.mu.clone(),
            cov: linalg::diag(&self.var),
        }
    }

    /// Log-density at `x`.
    pub fn log_density(&self, x: &[S]) -> S {
        let half = S::c(0.5);
        self.mu
            .iter()
            .zip(&self.var)
            .zip(x)
            .map(|((&m, &v), &xi)| -half * (S::c(2.0 * PI) * v).ln() - (xi - m) * (xi - m) / (v + v))
            .sum()
    }

    fn as_vars<'g>(&self, g: &'g Graph<S>) -> (Var<'g, S>, Var<'g, S>) {
        let d = self.dim();
        let mu = g.constant_owned(Tensor::new(vec![1, d], self.mu.clone()).expect("row shape"));
        let var = g.constant_owned(Tensor::new(vec![1, d], self.var.clone()).expect("row shape"));
        (mu, var)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullGaussian<S> {
    pub mean: Vec<S>,
    pub cov: Tensor<S>,
}

impl<S: Scalar> FullGaussian<S> {
    pub fn new(mean: Vec<S>, cov: Tensor<S>) -> Result<Self> {
        if cov.shape() != [mean.len(), mean.len()] {
            return Err(Error::Dimension {
                op: "full_gaussian",
                lhs: vec![mean.len()],
                rhs: cov.shape().to_vec(),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Either covariance form; used where both are accepted.
#[derive(Clone, Debug)]
pub enum Gaussian<S> {
    Diag(DiagGaussian<S>),
    Full(FullGaussian<S>),
}

impl<S: Scalar> From<DiagGaussian<S>> for Gaussian<S> {
    fn from(g: DiagGaussian<S>) -> Self {
        Gaussian::Diag(g)
    }
}

impl<S: Scalar> From<FullGaussian<S>> for Gaussian<S> {
    fn from(g: FullGaussian<S>) -> Self {
        Gaussian::Full(g)
    }
}

/// `p_rho(Z'|Z) = N(Z'; rho Z, (1 - rho^2) I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingPrior<S> {
    pub rho: S,
    pub dim: usize,
}

impl<S: Scalar> CouplingPrior<S> {
    /// `rho == 1` is accepted and means `Z' = Z`; density evaluations reject it.
    pub fn new(rho: S, dim: usize) -> Result<Self> {
        if !(rho >= S::zero() && rho <= S::one()) {
            return Err(Error::Domain(format!("coupling strength {rho} outside [0, 1]")));
        }
        Ok(Self { rho, dim })
    }

    pub fn is_identity(&self) -> bool {
        self.rho == S::one()
    }

    fn density_rho(&self) -> Result<S> {
        if self.rho >= S::one() {
            return Err(Error::Domain("coupling strength 1 has no density".into()));
        }
        Ok(self.rho)
    }

    /// Joint log-density `log p(z) + log p_rho(z'|z)` with `p(z) = N(0, I)`.
    pub fn log_joint(&self, z: &[S], zp: &[S]) -> Result<S> {
        let rho = self.density_rho()?;
        let s2 = S::one() - rho * rho;
        let half = S::c(0.5);
        let l2p = S::c((2.0 * PI).ln());
        Ok(z.iter()
            .zip(zp)
            .map(|(&a, &b)| {
                let r = b - rho * a;
                -l2p - half * s2.ln() - half * a * a - r * r / (s2 + s2)
            })
            .sum())
    }
}

fn validate_pair<S: Scalar>(a: &DiagGaussian<S>, b: &DiagGaussian<S>, prior: &CouplingPrior<S>) -> Result<()> {
    if a.dim() != b.dim() || a.dim() != prior.dim {
        return Err(Error::Dimension {
            op: "coupling",
            lhs: vec![a.dim(), b.dim()],
            rhs: vec![prior.dim],
        });
    }
    Ok(())
}

/// `mu + sqrt(var) * noise`.
pub fn reparam_sample<S: Scalar>(q: &DiagGaussian<S>, noise: &[S]) -> Result<Vec<S>> {
    if noise.len() != q.dim() {
        return Err(Error::Dimension {
            op: "reparam_sample",
            lhs: vec![q.dim()],
            rhs: vec![noise.len()],
        });
    }
    let g = Graph::new();
    let (mu, var) = q.as_vars(&g);
    let eps = g.constant_owned(Tensor::new(vec![1, noise.len()], noise.to_vec())?);
    Ok(reparam_var(mu, var, eps)?.value().into_data())
}

pub fn kl_to_standard<S: Scalar>(q: &DiagGaussian<S>) -> S {
    let g = Graph::new();
    let (mu, var) = q.as_vars(&g);
    kl_to_standard_var(mu, var)
        .and_then(|v| v.item())
        .expect("kl of validated gaussian")
}

/// `E[log p_rho(Z'|Z)]` with `Z ~ q_z`, `Z' ~ q_zp` independent.
pub fn coupling_cross_expect<S: Scalar>(q_z: &DiagGaussian<S>, q_zp: &DiagGaussian<S>, prior: &CouplingPrior<S>) -> Result<S> {
    validate_pair(q_z, q_zp, prior)?;
    let rho = prior.density_rho()?;
    let g = Graph::new();
    let (mu, var) = q_z.as_vars(&g);
    let (mup, varp) = q_zp.as_vars(&g);
    coupling_cross_var(mu, var, mup, varp, rho)?.item()
}

/// Value of the correlated pairwise term and the cross-covariance it uses.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTerm<S> {
    /// `E[log p_rho(Z', Z)] + H[q(Z, Z')]`.
    pub value: S,
    pub expected_log_joint: S,
    pub entropy: S,
    pub psi: Vec<S>,
}

/// Pairwise SE term with the optimal cross-covariance `psi`.
pub fn coupled_pair_expect<S: Scalar>(q_z: &DiagGaussian<S>, q_zp: &DiagGaussian<S>, prior: &CouplingPrior<S>) -> Result<PairTerm<S>> {
    pair_term(q_z, q_zp, prior, true)
}

/// Same term with `psi = 0`, i.e. the factorized bound.
pub fn coupled_pair_expect_factorized<S: Scalar>(
    q_z: &DiagGaussian<S>,
    q_zp: &DiagGaussian<S>,
    prior: &CouplingPrior<S>,
) -> Result<PairTerm<S>> {
    pair_term(q_z, q_zp, prior, false)
}

fn pair_term<S: Scalar>(q_z: &DiagGaussian<S>, q_zp: &DiagGaussian<S>, prior: &CouplingPrior<S>, correlated: bool) -> Result<PairTerm<S>> {
    validate_pair(q_z, q_zp, prior)?;
    let rho = prior.density_rho()?;
    let g = Graph::new();
    let (mu, var) = q_z.as_vars(&g);
    let (mup, varp) = q_zp.as_vars(&g);
    let parts = coupled_pair_var(mu, var, mup, varp, rho, correlated)?;
    let elj = parts.expected_log_joint.item()?;
    let ent = parts.entropy.item()?;
    Ok(PairTerm {
        value: elj + ent,
        expected_log_joint: elj,
        entropy: ent,
        psi: parts.psi.value().into_data(),
    })
}

/// Closed-form optimal cross-covariance.
pub fn optimal_psi<S: Scalar>(var: S, var_p: S, rho: S) -> S {
    if rho == S::zero() {
        return S::zero();
    }
    let gamma = rho / (S::one() - rho * rho);
    let four = S::c(4.0);
    ((S::one() + four * gamma * gamma * var * var_p).sqrt() - S::one()) / (gamma + gamma)
}

/// 2-Wasserstein distance between two Gaussians.
///
/// Uses the closed form on standard deviations when both are diagonal, and the
/// matrix square root formula otherwise.
pub fn w2_distance<S: Scalar>(a: &Gaussian<S>, b: &Gaussian<S>) -> Result<S> {
    match (a, b) {
        (Gaussian::Diag(a), Gaussian::Diag(b)) => w2_distance_diag(a, b),
        _ => w2_distance_full(&to_full(a), &to_full(b)),
    }
}

fn to_full<S: Scalar>(g: &Gaussian<S>) -> FullGaussian<S> {
    match g {
        Gaussian::Diag(d) => d.to_full(),
        Gaussian::Full(f) => f.clone(),
    }
}

pub fn w2_distance_diag<S: Scalar>(a: &DiagGaussian<S>, b: &DiagGaussian<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            op: "w2_distance",
            lhs: vec![a.dim()],
            rhs: vec![b.dim()],
        });
    }
    let mut acc = S::zero();
    for i in 0..a.dim() {
        let dm = a.mu[i] - b.mu[i];
        let ds = a.var[i].sqrt() - b.var[i].sqrt();
        acc += dm * dm + ds * ds;
    }
    Ok(acc.sqrt())
}

pub fn w2_distance_full<S: Scalar>(a: &FullGaussian<S>, b: &FullGaussian<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            op: "w2_distance",
            lhs: vec![a.dim()],
            rhs: vec![b.dim()],
        });
    }
    // Fails with the smallest eigenvalue if either input is not PSD.
    linalg::sqrt_psd(&a.cov)?;
    let rb = linalg::sqrt_psd(&b.cov)?;
    let inner = rb.matmul(&a.cov)?.matmul(&rb)?;
    let cross = linalg::sqrt_psd(&inner)?;
    let tr = linalg::trace(&a.cov) + linalg::trace(&b.cov) - S::c(2.0) * linalg::trace(&cross);
    let dm: S = a.mean.iter().zip(&b.mean).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok((dm + tr.max(S::zero())).sqrt())
}

// ---- graph-level closed forms ------------------------------------------------

pub fn reparam_var<'g, S: Scalar>(mu: Var<'g, S>, var: Var<'g, S>, noise: Var<'g, S>) -> Result<Var<'g, S>> {
    mu.add(var.sqrt().mul(noise)?)
}

/// Per-example `0.5 * sum(var + mu^2 - 1 - log var)`.
pub fn kl_to_standard_var<'g, S: Scalar>(mu: Var<'g, S>, var: Var<'g, S>) -> Result<Var<'g, S>> {
    let t = var.add(mu.square())?.sub(var.log())?.add_scalar(-S::one());
    Ok(t.sum_axis(last_axis(&t))?.scale(S::c(0.5)))
}

/// Per-example entropy `0.5 * sum(log(2 pi e var))`.
pub fn entropy_var<'g, S: Scalar>(var: Var<'g, S>) -> Result<Var<'g, S>> {
    let t = var.log().add_scalar(S::c((2.0 * PI * E).ln()));
    Ok(t.sum_axis(last_axis(&t))?.scale(S::c(0.5)))
}

/// Per-example `E[log p_rho(Z'|Z)]` under independent factors.
pub fn coupling_cross_var<'g, S: Scalar>(
    mu: Var<'g, S>,
    var: Var<'g, S>,
    mu_p: Var<'g, S>,
    var_p: Var<'g, S>,
    rho: S,
) -> Result<Var<'g, S>> {
    if !(rho.abs() < S::one()) {
        return Err(Error::Domain(format!("coupling strength {rho} must be below 1")));
    }
    let s2 = S::one() - rho * rho;
    let d = mu.shape().last().copied().unwrap_or(1);
    let konst = -S::c(0.5) * (S::c(2.0 * PI) * s2).ln() * S::from_usize(d).unwrap_or_else(S::one);
    let resid = mu_p.sub(mu.scale(rho))?.square();
    let num = var_p.add(var.scale(rho * rho))?.add(resid)?;
    let summed = num.sum_axis(last_axis(&num))?;
    Ok(summed.scale(-S::one() / (s2 + s2)).add_scalar(konst))
}

/// Graph pieces of the correlated pairwise term, each `[batch, 1]` except `psi`.
pub struct PairVars<'g, S> {
    pub expected_log_joint: Var<'g, S>,
    pub entropy: Var<'g, S>,
    pub psi: Var<'g, S>,
}

/// `E[log p_rho(Z', Z)]` and the joint entropy for the Gaussian with marginals
/// `(mu, var)`, `(mu_p, var_p)` and cross-covariance `psi` (optimal when
/// `correlated`, zero otherwise).
pub fn coupled_pair_var<'g, S: Scalar>(
    mu: Var<'g, S>,
    var: Var<'g, S>,
    mu_p: Var<'g, S>,
    var_p: Var<'g, S>,
    rho: S,
    correlated: bool,
) -> Result<PairVars<'g, S>> {
    if !(rho >= S::zero() && rho < S::one()) {
        return Err(Error::Domain(format!("coupling strength {rho} outside [0, 1)")));
    }
    let g = mu.graph();
    let s2 = S::one() - rho * rho;
    let d = S::from_usize(mu.shape().last().copied().unwrap_or(1)).unwrap_or_else(S::one);
    let vv = var.mul(var_p)?;
    let psi = if correlated && rho > S::zero() {
        let gamma = rho / s2;
        vv.scale(S::c(4.0) * gamma * gamma)
            .add_scalar(S::one())
            .sqrt()
            .add_scalar(-S::one())
            .scale(S::one() / (gamma + gamma))
    } else {
        g.constant_owned(Tensor::zeros(vv.shape()))
    };
    let second = var.add(mu.square())?.add(var_p)?.add(mu_p.square())?;
    let cross = psi.add(mu.mul(mu_p)?)?.scale(rho + rho);
    let quad = second.sub(cross)?;
    let quad = quad.sum_axis(last_axis(&quad))?;
    let konst = d * (-S::c((2.0 * PI).ln()) - S::c(0.5) * s2.ln());
    let elj = quad.scale(-S::one() / (s2 + s2)).add_scalar(konst);
    let det = vv.sub(psi.square())?.log();
    let det = det.sum_axis(last_axis(&det))?;
    let entropy = det.scale(S::c(0.5)).add_scalar(d * S::c((2.0 * PI * E).ln()));
    Ok(PairVars {
        expected_log_joint: elj,
        entropy,
        psi,
    })
}

fn last_axis<S: Scalar>(v: &Var<'_, S>) -> usize {
    v.shape().len().saturating_sub(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dg(mu: &[f64], var: &[f64]) -> DiagGaussian<f64> {
        DiagGaussian::new(mu.to_vec(), var.to_vec()).unwrap()
    }

    #[test]
    fn reparam_is_affine_in_noise() {
        let q = dg(&[0.0], &[1.0]);
        assert_eq!(reparam_sample(&q, &[0.5]).unwrap(), vec![0.5]);
        let q = dg(&[2.0, -1.0], &[4.0, 1e-6]);
        let z = reparam_sample(&q, &[1.0, 3.0]).unwrap();
        assert_abs_diff_eq!(z[0], 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], -1.0, epsilon = 4e-3);
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_to_standard(&DiagGaussian::<f64>::standard(3)), 0.0);
        assert_abs_diff_eq!(kl_to_standard(&dg(&[1.0], &[1.0])), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn cross_at_zero_coupling_is_standard_normal_expectation() {
        let q = dg(&[0.3, -0.2], &[0.5, 2.0]);
        let qp = dg(&[1.0, 0.1], &[0.7, 0.4]);
        let prior = CouplingPrior::new(0.0, 2).unwrap();
        let expect = -0.5 * (0.7 + 1.0 + 0.4 + 0.01) - (2.0 / 2.0) * (2.0 * PI).ln();
        assert_abs_diff_eq!(coupling_cross_expect(&q, &qp, &prior).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn cross_hand_value_half_coupling() {
        let q = DiagGaussian::<f64>::standard(1);
        let prior = CouplingPrior::new(0.5, 1).unwrap();
        let expect = -0.5 * (2.0 * PI * 0.75).ln() - 1.25 / 1.5;
        assert_abs_diff_eq!(coupling_cross_expect(&q, &q, &prior).unwrap(), expect, epsilon = 1e-12);
        let one = CouplingPrior::new(1.0, 1).unwrap();
        assert!(matches!(coupling_cross_expect(&q, &q, &one), Err(Error::Domain(_))));
    }

    #[test]
    fn psi_hand_value_and_limit() {
        let q = DiagGaussian::<f64>::standard(1);
        let prior = CouplingPrior::new(0.5, 1).unwrap();
        let t = coupled_pair_expect(&q, &q, &prior).unwrap();
        let expect = ((1.0f64 + 16.0 / 9.0).sqrt() - 1.0) * 0.75;
        assert_abs_diff_eq!(t.psi[0], expect, epsilon = 1e-14);
        assert!(optimal_psi(1.0, 1.0, 1e-9) < 1e-8);
        assert_eq!(optimal_psi(1.0, 1.0, 0.0), 0.0);
    }

    #[test]
    fn w2_equal_and_shifted() {
        let a: Gaussian<f64> = dg(&[1.0, 2.0], &[1.0, 1.0]).into();
        assert_eq!(w2_distance(&a, &a).unwrap(), 0.0);
        let b: Gaussian<f64> = dg(&[4.0, 6.0], &[1.0, 1.0]).into();
        assert_abs_diff_eq!(w2_distance(&a, &b).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn w2_rejects_indefinite_covariance() {
        let bad = FullGaussian::new(vec![0.0, 0.0], linalg::diag(&[1.0, -2.0])).unwrap();
        let ok = FullGaussian::new(vec![0.0, 0.0], linalg::identity(2)).unwrap();
        match w2_distance(&bad.into(), &ok.into()) {
            Err(Error::NotPsd { min_eigenvalue }) => assert_abs_diff_eq!(min_eigenvalue, -2.0, epsilon = 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }
}
