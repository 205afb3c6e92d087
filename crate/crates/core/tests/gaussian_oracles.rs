//! Closed forms against Monte Carlo and brute-force references written here.

use std::f64::consts::PI;

use avae_core::gaussian::*;
use avae_core::linalg;
use avae_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SAMPLES: usize = 1_000_000;

fn random_q(rng: &mut ChaCha8Rng, d: usize) -> DiagGaussian<f64> {
    let mu = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let var = (0..d).map(|_| rng.random_range(0.2..2.0)).collect();
    DiagGaussian::new(mu, var).unwrap()
}

fn log_normal(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * (2.0 * PI * v).ln() - (x - m) * (x - m) / (2.0 * v)
}

/// Running mean and standard error.
#[derive(Default)]
struct Acc {
    n: f64,
    s: f64,
    s2: f64,
}

impl Acc {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.s += x;
        self.s2 += x * x;
    }
    fn mean(&self) -> f64 {
        self.s / self.n
    }
    fn se(&self) -> f64 {
        let m = self.mean();
        ((self.s2 / self.n - m * m) / self.n).sqrt()
    }
}

fn within_3se(closed: f64, acc: &Acc) -> bool {
    (closed - acc.mean()).abs() <= 3.0 * acc.se() + 1e-12
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut misses = 0;
    for _ in 0..10 {
        let q = random_q(&mut rng, 3);
        let mut acc = Acc::default();
        for _ in 0..SAMPLES {
            let mut v = 0.0;
            for i in 0..3 {
                let e: f64 = rng.sample(StandardNormal);
                let z = q.mu[i] + q.var[i].sqrt() * e;
                v += log_normal(z, q.mu[i], q.var[i]) - log_normal(z, 0.0, 1.0);
            }
            acc.push(v);
        }
        misses += usize::from(!within_3se(kl_to_standard(&q), &acc));
    }
    // 3 standard errors: a single miss in ten is expected noise
    assert!(misses <= 1, "{misses} misses");
}

#[test]
fn cross_term_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut misses = 0;
    for k in 0..10 {
        let (a, b) = (random_q(&mut rng, 2), random_q(&mut rng, 2));
        let rho = [0.0, 0.3, 0.5, 0.9, 0.975][k % 5];
        let closed = coupling_cross_expect(&a, &b, &CouplingPrior::new(rho, 2).unwrap()).unwrap();
        let mut acc = Acc::default();
        for _ in 0..SAMPLES {
            let mut v = 0.0;
            for i in 0..2 {
                let z = a.mu[i] + a.var[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
                let zp = b.mu[i] + b.var[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
                v += log_normal(zp, rho * z, 1.0 - rho * rho);
            }
            acc.push(v);
        }
        misses += usize::from(!within_3se(closed, &acc));
    }
    assert!(misses <= 1, "{misses} misses");
}

#[test]
fn cross_term_half_coupling_value() {
    let q = DiagGaussian::standard(1);
    let v = coupling_cross_expect(&q, &q, &CouplingPrior::new(0.5, 1).unwrap()).unwrap();
    let expect = -0.5 * (2.0 * PI * 0.75).ln() - 1.25 / 1.5;
    assert!((v - expect).abs() < 1e-14);
}

#[test]
fn coupling_one_is_rejected_for_densities() {
    let q = DiagGaussian::standard(2);
    let p = CouplingPrior::new(1.0, 2).unwrap();
    assert!(p.is_identity());
    assert!(coupling_cross_expect(&q, &q, &p).is_err());
    assert!(CouplingPrior::new(1.5, 2).is_err());
}

#[test]
fn pair_term_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut misses = 0;
    for k in 0..10 {
        let (a, b) = (random_q(&mut rng, 2), random_q(&mut rng, 2));
        let rho = [0.1, 0.5, 0.8, 0.95, 0.975][k % 5];
        let prior = CouplingPrior::new(rho, 2).unwrap();
        let t = coupled_pair_expect(&a, &b, &prior).unwrap();
        let mut acc = Acc::default();
        for _ in 0..SAMPLES {
            let mut v = 0.0;
            for i in 0..2 {
                // correlated pair with covariance [[s, psi], [psi, s']]
                let (s, sp, c) = (a.var[i], b.var[i], t.psi[i]);
                let l11 = s.sqrt();
                let l21 = c / l11;
                let l22 = (sp - l21 * l21).sqrt();
                let (e1, e2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                let (dz, dzp) = (l11 * e1, l21 * e1 + l22 * e2);
                let (z, zp) = (a.mu[i] + dz, b.mu[i] + dzp);
                let det = s * sp - c * c;
                let quad = (sp * dz * dz - 2.0 * c * dz * dzp + s * dzp * dzp) / det;
                let log_q = -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad;
                let log_p = log_normal(z, 0.0, 1.0) + log_normal(zp, rho * z, 1.0 - rho * rho);
                v += log_p - log_q;
            }
            acc.push(v);
        }
        misses += usize::from(!within_3se(t.value, &acc));
    }
    assert!(misses <= 1, "{misses} misses");
}

#[test]
fn psi_maximises_one_dimensional_objective() {
    let (var, var_p, rho) = (1.0, 1.0, 0.5);
    let psi = optimal_psi(var, var_p, rho);
    let expect = ((1.0f64 + 16.0 / 9.0).sqrt() - 1.0) * 0.75;
    assert!((psi - expect).abs() < 1e-14);
    // psi-dependent part of E[log p] + H: rho psi / (1 - rho^2) + 0.5 log(var var_p - psi^2)
    let f = |c: f64| rho * c / (1.0 - rho * rho) + 0.5 * (var * var_p - c * c).ln();
    let lim = (var * var_p).sqrt();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 1..200_000 {
        let c = -lim + 2.0 * lim * k as f64 / 200_000.0;
        if f(c) > best.0 {
            best = (f(c), c);
        }
    }
    assert!((best.1 - psi).abs() < 2.0 * lim / 200_000.0 + 1e-12, "{} vs {psi}", best.1);
}

#[test]
fn psi_vanishes_without_coupling() {
    assert_eq!(optimal_psi(0.7, 1.3, 0.0), 0.0);
    assert!(optimal_psi(0.7f64, 1.3, 1e-9).abs() < 1e-8);
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let a: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    let a = Tensor::matrix(d, d, a).unwrap();
    linalg::add(&a.matmul(&a.transpose().unwrap()).unwrap(), &linalg::scale(&linalg::identity(d), 0.1)).unwrap()
}

/// `tr(A + B - 2 (B^1/2 A B^1/2)^1/2)` through nalgebra's eigensolver.
fn w2_nalgebra(ma: &[f64], a: &Tensor, mb: &[f64], b: &Tensor) -> f64 {
    let d = ma.len();
    let to = |t: &Tensor| nalgebra::DMatrix::from_row_slice(d, d, t.data());
    let sqrt = |m: nalgebra::DMatrix<f64>| {
        let e = m.symmetric_eigen();
        let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
        &e.eigenvectors * nalgebra::DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
    };
    let (na, nb) = (to(a), to(b));
    let rb = sqrt(nb.clone());
    let cross = sqrt(&rb * &na * &rb);
    let tr = na.trace() + nb.trace() - 2.0 * cross.trace();
    let dm: f64 = ma.iter().zip(mb).map(|(x, y)| (x - y) * (x - y)).sum();
    (dm + tr.max(0.0)).sqrt()
}

#[test]
fn w2_full_matches_nalgebra_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for d in 1..6 {
        let (a, b) = (random_spd(&mut rng, d), random_spd(&mut rng, d));
        let ma: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mb: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let got = w2_distance_full(&FullGaussian::new(ma.clone(), a.clone()).unwrap(), &FullGaussian::new(mb.clone(), b.clone()).unwrap()).unwrap();
        let want = w2_nalgebra(&ma, &a, &mb, &b);
        assert!((got - want).abs() < 1e-9, "d={d}: {got} vs {want}");
    }
}

#[test]
fn w2_diag_fast_path_matches_matrix_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let (a, b) = (random_q(&mut rng, 4), random_q(&mut rng, 4));
        let fast = w2_distance(&Gaussian::Diag(a.clone()), &Gaussian::Diag(b.clone())).unwrap();
        let slow = w2_distance(&Gaussian::Full(a.to_full()), &Gaussian::Full(b.to_full())).unwrap();
        assert!((fast - slow).abs() < 1e-8);
    }
}

#[test]
fn w2_simple_cases() {
    let a = DiagGaussian::new(vec![1.0f64, 2.0], vec![1.0, 1.0]).unwrap();
    let b = DiagGaussian::new(vec![4.0, 6.0], vec![1.0, 1.0]).unwrap();
    assert_eq!(w2_distance_diag(&a, &a).unwrap(), 0.0);
    assert!((w2_distance_diag(&a, &b).unwrap() - 5.0).abs() < 1e-14);
}

#[test]
fn w2_reports_indefinite_covariance() {
    let bad = FullGaussian {
        mean: vec![0.0, 0.0],
        cov: Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap(),
    };
    let ok = DiagGaussian::standard(2).to_full();
    match w2_distance_full(&bad, &ok) {
        Err(avae_core::Error::NotPsd { min_eigenvalue }) => assert!((min_eigenvalue + 1.0).abs() < 1e-9),
        other => panic!("expected NotPsd, got {other:?}"),
    }
}

#[test]
fn reparam_sample_mean_converges() {
    let q = DiagGaussian::new(vec![0.3, -1.2], vec![0.5, 2.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let n = 100_000;
    let mut sum = [0.0; 2];
    for _ in 0..n {
        let e: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let z = reparam_sample(&q, &e).unwrap();
        sum[0] += z[0];
        sum[1] += z[1];
    }
    for i in 0..2 {
        assert!((sum[i] / n as f64 - q.mu[i]).abs() < 3.0 * (q.var[i] / n as f64).sqrt());
    }
    assert_eq!(reparam_sample(&q, &[0.0, 0.0]).unwrap(), q.mu);
}

fn q_strategy(d: usize) -> impl Strategy<Value = DiagGaussian<f64>> {
    (prop::collection::vec(-3.0..3.0f64, d), prop::collection::vec(0.01..5.0f64, d)).prop_map(|(m, v)| DiagGaussian::new(m, v).unwrap())
}

proptest! {
    #[test]
    fn kl_is_nonnegative(q in q_strategy(3)) {
        prop_assert!(kl_to_standard(&q) >= -1e-15);
    }

    #[test]
    fn w2_is_a_metric(a in q_strategy(3), b in q_strategy(3), c in q_strategy(3)) {
        let d = |x: &DiagGaussian<f64>, y: &DiagGaussian<f64>| w2_distance_diag(x, y).unwrap();
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn correlated_bound_dominates_factorized(a in q_strategy(3), b in q_strategy(3), rho in 0.0..0.99f64) {
        let p = CouplingPrior::new(rho, 3).unwrap();
        let tight = coupled_pair_expect(&a, &b, &p).unwrap();
        let loose = coupled_pair_expect_factorized(&a, &b, &p).unwrap();
        prop_assert!(tight.value >= loose.value - 1e-12);
        for ((&c, &s), &sp) in tight.psi.iter().zip(&a.var).zip(&b.var) {
            prop_assert!(c.abs() < (s * sp).sqrt());
        }
    }

    #[test]
    fn joint_prior_is_exchangeable(z in prop::collection::vec(-3.0..3.0f64, 3), zp in prop::collection::vec(-3.0..3.0f64, 3), rho in 0.0..0.99f64) {
        let p = CouplingPrior::new(rho, 3).unwrap();
        prop_assert!((p.log_joint(&z, &zp).unwrap() - p.log_joint(&zp, &z).unwrap()).abs() < 1e-10);
    }
}
