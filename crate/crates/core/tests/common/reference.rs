//! Plain-loop reimplementation of the networks and bounds, sharing no code
//! with the library beyond reading parameter tensors. Delusions are passed in
//! explicitly, which is what the library's stop-gradients promise.

#![allow(dead_code)]

use std::f64::consts::{E, PI};

use avae_core::nets::{Linear, ModelPair, VAR_FLOOR};
use avae_core::objectives::{Likelihood, Noise, ObjectiveConfig, ObjectiveKind};
use avae_core::Tensor;

fn affine(l: &Linear<f64>, x: &[f64]) -> Vec<f64> {
    let (fi, fo) = (l.w.shape()[0], l.w.shape()[1]);
    (0..fo)
        .map(|j| l.b.data()[j] + (0..fi).map(|i| x[i] * l.w.data()[i * fo + j]).sum::<f64>())
        .collect()
}

fn trunk(layers: &[Linear<f64>], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in layers {
        h = affine(l, &h).into_iter().map(f64::tanh).collect();
    }
    h
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn encode(m: &ModelPair<f64>, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = trunk(&m.enc.trunk, x);
    let mu = affine(&m.enc.head_mu, &h);
    let var = affine(&m.enc.head_var, &h).into_iter().map(|a| softplus(a) + VAR_FLOOR).collect();
    (mu, var)
}

pub fn decode(m: &ModelPair<f64>, z: &[f64]) -> Vec<f64> {
    affine(&m.dec.head, &trunk(&m.dec.trunk, z))
}

fn recon(x: &[f64], xhat: &[f64], v: f64, lik: Likelihood) -> f64 {
    let ss: f64 = x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum();
    match lik {
        Likelihood::Gaussian => -ss / (2.0 * v) - 0.5 * x.len() as f64 * (2.0 * PI * v).ln(),
        Likelihood::Mse { v_eval } => -ss / (2.0 * v_eval),
    }
}

pub fn kl(mu: &[f64], var: &[f64]) -> f64 {
    0.5 * mu.iter().zip(var).map(|(m, v)| v + m * m - 1.0 - v.ln()).sum::<f64>()
}

pub fn entropy(var: &[f64]) -> f64 {
    0.5 * var.iter().map(|v| (2.0 * PI * E * v).ln()).sum::<f64>()
}

/// `E[log p_rho(z'|z)]` under independent factors.
pub fn cross(mu: &[f64], var: &[f64], mu_p: &[f64], var_p: &[f64], rho: f64) -> f64 {
    let s2 = 1.0 - rho * rho;
    (0..mu.len())
        .map(|i| -0.5 * (2.0 * PI * s2).ln() - (var_p[i] + rho * rho * var[i] + (mu_p[i] - rho * mu[i]).powi(2)) / (2.0 * s2))
        .sum()
}

/// `E[log p_rho(z', z)] + H[q(z, z')]` for the correlated joint with optimal psi.
pub fn pair(mu: &[f64], var: &[f64], mu_p: &[f64], var_p: &[f64], rho: f64) -> f64 {
    let s2 = 1.0 - rho * rho;
    let mut acc = 0.0;
    for i in 0..mu.len() {
        let psi = if rho == 0.0 {
            0.0
        } else {
            let gamma = rho / s2;
            ((1.0 + 4.0 * gamma * gamma * var[i] * var_p[i]).sqrt() - 1.0) / (2.0 * gamma)
        };
        let tr = var_p[i] + var[i] + mu_p[i] * mu_p[i] + mu[i] * mu[i] - 2.0 * rho * (psi + mu_p[i] * mu[i]);
        let elj = -(2.0 * PI).ln() - 0.5 * s2.ln() - tr / (2.0 * s2);
        let ent = (2.0 * PI * E).ln() + 0.5 * (var[i] * var_p[i] - psi * psi).ln();
        acc += elj + ent;
    }
    acc
}

fn add_row(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sample(mu: &[f64], var: &[f64], eps: &[f64]) -> Vec<f64> {
    (0..mu.len()).map(|i| mu[i] + var[i].sqrt() * eps[i]).collect()
}

/// Inputs the library holds behind stop-gradients, per MC sample and row.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub x_in: Vec<Vec<Vec<f64>>>,
    pub x_tilde: Vec<Vec<Vec<f64>>>,
    pub x_se: Option<Tensor>,
}

pub fn freeze(m: &ModelPair<f64>, x: Option<&Tensor>, cfg: &ObjectiveConfig, noise: &Noise<f64>, x_se: Option<&Tensor>) -> Frozen {
    let v = m.dec.obs_var;
    let mut x_in = Vec::new();
    let mut x_tilde = Vec::new();
    for s in 0..noise.z.len() {
        let rows = noise.z[s].rows();
        let xs: Vec<Vec<f64>> = (0..rows)
            .map(|r| match cfg.kind {
                ObjectiveKind::AvaeSs => decode(m, noise.prior[s].row_slice(r)),
                _ => x.expect("data").row_slice(r).to_vec(),
            })
            .collect();
        let xt: Vec<Vec<f64>> = xs
            .iter()
            .enumerate()
            .map(|(r, xr)| {
                let (mu, var) = encode(m, xr);
                let d = decode(m, &sample(&mu, &var, noise.z[s].row_slice(r)));
                match noise.x.get(s) {
                    Some(ex) => add_row(&d, &ex.row_slice(r).iter().map(|e| e * v.sqrt()).collect::<Vec<_>>()),
                    None => d,
                }
            })
            .collect();
        x_in.push(xs);
        x_tilde.push(xt);
    }
    Frozen {
        x_in,
        x_tilde,
        x_se: x_se.cloned(),
    }
}

/// Minibatch loss: negated batch-mean bound averaged over MC samples.
pub fn loss(m: &ModelPair<f64>, cfg: &ObjectiveConfig, noise: &Noise<f64>, f: &Frozen) -> f64 {
    let v = m.dec.obs_var;
    let mc = noise.z.len();
    let mut total = 0.0;
    for s in 0..mc {
        let rows = f.x_in[s].len();
        let mut acc = 0.0;
        for r in 0..rows {
            let x = &f.x_in[s][r];
            let (mu, var) = encode(m, x);
            let z = sample(&mu, &var, noise.z[s].row_slice(r));
            let rec = || recon(x, &decode(m, &z), v, cfg.likelihood);
            let tilde = || encode(m, &f.x_tilde[s][r]);
            let se = || encode(m, f.x_se.as_ref().expect("attacked input").row_slice(r));
            acc += match cfg.kind {
                ObjectiveKind::Vae => rec() - kl(&mu, &var),
                ObjectiveKind::Avae => {
                    let (mp, vp) = tilde();
                    rec() - kl(&mu, &var) + cross(&mu, &var, &mp, &vp, cfg.rho) + entropy(&vp)
                }
                ObjectiveKind::Se => {
                    let (mp, vp) = se();
                    rec() + pair(&mu, &var, &mp, &vp, cfg.rho_se)
                }
                ObjectiveKind::SeAvae => {
                    let (mp, vp) = tilde();
                    let (mq, vq) = se();
                    let w = cfg.se_weight;
                    rec() - kl(&mu, &var)
                        + cross(&mu, &var, &mp, &vp, cfg.rho)
                        + entropy(&vp)
                        + w * (cross(&mu, &var, &mq, &vq, cfg.rho_se) + entropy(&vq))
                }
                ObjectiveKind::AvaeSs => {
                    let (mp, vp) = tilde();
                    -kl(&mu, &var) + cross(&mu, &var, &mp, &vp, cfg.rho) + entropy(&vp)
                }
            };
        }
        total += acc / rows as f64;
    }
    -total / mc as f64
}

/// Central differences of [`loss`] for every parameter entry, delusions held fixed.
pub fn fd_grads(m: &ModelPair<f64>, cfg: &ObjectiveConfig, noise: &Noise<f64>, f: &Frozen, h: f64) -> Vec<Tensor> {
    let n = m.params().len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let base = m.params()[k].1.clone();
        let mut g = Tensor::zeros(base.shape().to_vec());
        for i in 0..base.len() {
            let mut mp = m.clone();
            mp.params_mut()[k].data_mut()[i] += h;
            let mut mm = m.clone();
            mm.params_mut()[k].data_mut()[i] -= h;
            g.data_mut()[i] = (loss(&mp, cfg, noise, f) - loss(&mm, cfg, noise, f)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest entrywise relative error, with `floor` guarding near-zero entries.
pub fn max_rel_err(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(floor)))
        .fold(0.0, f64::max)
}
