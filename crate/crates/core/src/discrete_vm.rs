//! Tabular model on circular grids with von-Mises-shaped conditionals.
//!
//! Every expectation is an exact finite sum, so losses and their gradients
//! are exact. Tables are laid out with the conditioning variable on rows:
//! the decoder is `[n_z, n_x]` (`p(x|z)`), the encoder `[n_x, n_z]` (`q(z|x)`).

use std::f64::consts::PI;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Adam, AdamConfig};
use crate::rng::uniform_vec;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Largest number of `(x, z, x~, z')` cells an exact AVAE loss may span.
pub const ENUMERATION_BUDGET: u64 = 64 * 64 * 64 * 64;

/// Points `c, 2c, ..., n c` with `c = 2 pi / n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmGrid {
    pub n: usize,
}

impl VmGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("grid needs at least 2 points, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.n as f64
    }

    pub fn points<S: Scalar>(&self) -> Vec<S> {
        let c = self.spacing();
        (1..=self.n).map(|i| S::c(i as f64 * c)).collect()
    }
}

/// `p(x) ∝ exp(cos(x - mu) / v)` over the grid.
pub fn vm_density<S: Scalar>(grid: VmGrid, mu: S, v: S) -> Result<Vec<S>> {
    if !(v > S::zero()) {
        return Err(Error::Domain(format!("spread {v} must be positive")));
    }
    let g = Graph::new();
    let pts = g.constant_owned(Tensor::row(grid.points()));
    let logits = pts.add_scalar(-mu).cos().scale(S::one() / v);
    Ok(logits.log_softmax().exp().value().into_data())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularModel<S> {
    pub x_grid: VmGrid,
    pub z_grid: VmGrid,
    /// Decoder mean angle per latent state.
    pub g: Vec<S>,
    pub dec_spread: S,
    /// Encoder mean angle per observation.
    pub enc_mu: Vec<S>,
    /// Encoder spread is `exp(enc_log_sigma)`.
    pub enc_log_sigma: Vec<S>,
    pub nu_rho: S,
}

impl<S: Scalar> TabularModel<S> {
    /// Angles uniform on the circle, encoder spreads `init_sigma`.
    pub fn init<R: RngCore>(x_grid: VmGrid, z_grid: VmGrid, dec_spread: S, init_sigma: S, nu_rho: S, rng: &mut R) -> Self {
        let tau = 2.0 * PI;
        Self {
            x_grid,
            z_grid,
            g: uniform_vec(rng, z_grid.n, 0.0, tau),
            dec_spread,
            enc_mu: uniform_vec(rng, x_grid.n, 0.0, tau),
            enc_log_sigma: vec![init_sigma.ln(); x_grid.n],
            nu_rho,
        }
    }

    fn bind<'g>(&self, g: &'g Graph<S>) -> BoundTabular<'g, S> {
        BoundTabular {
            g: g.param_named("g", &Tensor::new(vec![self.z_grid.n, 1], self.g.clone()).expect("shape")),
            mu: g.param_named("enc_mu", &Tensor::new(vec![self.x_grid.n, 1], self.enc_mu.clone()).expect("shape")),
            log_sigma: g.param_named(
                "enc_log_sigma",
                &Tensor::new(vec![self.x_grid.n, 1], self.enc_log_sigma.clone()).expect("shape"),
            ),
        }
    }

    /// Decoder table `p(x|z)`, `[n_z, n_x]`.
    pub fn decoder_table(&self) -> Tensor<S> {
        let g = Graph::new();
        let b = self.bind(&g);
        self.log_decoder(&g, &b).exp().value()
    }

    /// Encoder table `q(z|x)`, `[n_x, n_z]`.
    pub fn encoder_table(&self) -> Tensor<S> {
        let g = Graph::new();
        let b = self.bind(&g);
        self.log_encoder(&g, &b).exp().value()
    }

    /// Coupling table `p(z'|z)`, `[n_z, n_z]`.
    pub fn coupling_table(&self) -> Tensor<S> {
        let g = Graph::new();
        self.log_coupling(&g).exp().value()
    }

    fn log_decoder<'g>(&self, g: &'g Graph<S>, b: &BoundTabular<'g, S>) -> Var<'g, S> {
        let xs = g.constant_owned(Tensor::row(self.x_grid.points()));
        xs.sub(b.g)
            .expect("broadcast")
            .cos()
            .scale(S::one() / self.dec_spread)
            .log_softmax()
    }

    fn log_encoder<'g>(&self, g: &'g Graph<S>, b: &BoundTabular<'g, S>) -> Var<'g, S> {
        let zs = g.constant_owned(Tensor::row(self.z_grid.points()));
        zs.sub(b.mu)
            .expect("broadcast")
            .cos()
            .div(b.log_sigma.exp())
            .expect("broadcast")
            .log_softmax()
    }

    fn log_coupling<'g>(&self, g: &'g Graph<S>) -> Var<'g, S> {
        let zs = g.constant_owned(Tensor::row(self.z_grid.points()));
        let zc = g.constant_owned(Tensor::new(vec![self.z_grid.n, 1], self.z_grid.points()).expect("shape"));
        zs.sub(zc).expect("broadcast").cos().scale(S::one() / self.nu_rho).log_softmax()
    }

    pub fn params(&self) -> [(&'static str, Tensor<S>); 3] {
        [
            ("g", Tensor::vector(self.g.clone())),
            ("enc_mu", Tensor::vector(self.enc_mu.clone())),
            ("enc_log_sigma", Tensor::vector(self.enc_log_sigma.clone())),
        ]
    }
}

struct BoundTabular<'g, S> {
    g: Var<'g, S>,
    mu: Var<'g, S>,
    log_sigma: Var<'g, S>,
}

fn check_hist<S: Scalar>(hist: &[S], n: usize) -> Result<()> {
    if hist.len() != n {
        return Err(Error::Dimension {
            op: "data_hist",
            lhs: vec![n],
            rhs: vec![hist.len()],
        });
    }
    let total: S = hist.iter().copied().sum();
    if hist.iter().any(|&p| p < S::zero()) || (total - S::one()).abs() > S::c(1e-9) {
        return Err(Error::Domain(format!("histogram must be a distribution (sum {total})")));
    }
    Ok(())
}

/// `sum_x pi(x) log pi(x)` with `0 log 0 = 0`.
fn neg_entropy<S: Scalar>(hist: &[S]) -> S {
    hist.iter().filter(|&&p| p > S::zero()).map(|&p| p * p.ln()).sum()
}

/// `KL(pi(x) q(z|x) || p(x|z) p(z))` with uniform `p(z)`, from log tables.
fn vae_kl_var<'g, S: Scalar>(log_q: Var<'g, S>, log_dec: Var<'g, S>, hist: &[S]) -> Result<Var<'g, S>> {
    let g = log_q.graph();
    let nz = log_q.shape()[1];
    let pi = g.constant_owned(Tensor::new(vec![hist.len(), 1], hist.to_vec())?);
    let q = log_q.exp();
    let integrand = log_q.sub(log_dec.transpose()?)?.add_scalar(S::c((nz as f64).ln()));
    Ok(q.mul(integrand)?.mul(pi)?.sum().add_scalar(neg_entropy(hist)))
}

/// Exact VAE loss (the KL form of the negative ELBO plus the data entropy).
pub fn exact_vae_loss<S: Scalar>(model: &TabularModel<S>, hist: &[S]) -> Result<S> {
    check_hist(hist, model.x_grid.n)?;
    let g = Graph::new();
    let b = model.bind(&g);
    vae_kl_var(model.log_encoder(&g, &b), model.log_decoder(&g, &b), hist)?.item()
}

/// Same KL for explicit tables (`q` is `[n_x, n_z]`, `dec` is `[n_z, n_x]`).
pub fn vae_kl_tables<S: Scalar>(q: &Tensor<S>, dec: &Tensor<S>, hist: &[S]) -> Result<S> {
    check_hist(hist, q.rows())?;
    let g = Graph::new();
    let lq = g.constant_owned(q.map(S::ln));
    let ld = g.constant_owned(dec.map(S::ln));
    vae_kl_var(lq, ld, hist)?.item()
}

/// Terms of the exact AVAE loss: `total = vae_kl - cross + delusion_neg_entropy`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvaeTerms {
    pub total: f64,
    pub vae_kl: f64,
    /// `E[log p(z'|z)]` under `q~(z) p(x~|z) q(z'|x~)`.
    pub cross: f64,
    /// `E[log q(z'|x~)]`, the negated delusion entropy.
    pub delusion_neg_entropy: f64,
}

struct AvaeVars<'g, S> {
    total: Var<'g, S>,
    vae: Var<'g, S>,
    cross: Var<'g, S>,
    neg_ent: Var<'g, S>,
}

fn check_budget(model_x: usize, model_z: usize) -> Result<()> {
    let cells = (model_x as u64).pow(2) * (model_z as u64).pow(2);
    if cells > ENUMERATION_BUDGET {
        return Err(Error::Config(format!(
            "exact AVAE enumeration spans {cells} cells (budget {ENUMERATION_BUDGET})"
        )));
    }
    Ok(())
}

fn avae_vars<'g, S: Scalar>(model: &TabularModel<S>, g: &'g Graph<S>, b: &BoundTabular<'g, S>, hist: &[S]) -> Result<AvaeVars<'g, S>> {
    let nx = model.x_grid.n;
    let nz = model.z_grid.n;
    let log_q = model.log_encoder(g, b);
    let log_dec = model.log_decoder(g, b);
    let vae = vae_kl_var(log_q, log_dec, hist)?;
    let q = log_q.exp();
    // The decoder enters the delusion distribution as a constant factor.
    let pbar = log_dec.exp().stop_gradient();
    let pi_row = g.constant_owned(Tensor::row(hist.to_vec()));
    let qz = pi_row.matmul(q)?;
    let trans = pbar.matmul(q)?;
    let log_c = model.log_coupling(g);
    let cross = trans.mul(qz.reshape(&[nz, 1])?)?.mul(log_c)?.sum();
    let qx = qz.matmul(pbar)?;
    let neg_ent = q.mul(log_q)?.mul(qx.reshape(&[nx, 1])?)?.sum();
    let total = vae.sub(cross)?.add(neg_ent)?;
    Ok(AvaeVars {
        total,
        vae,
        cross,
        neg_ent,
    })
}

/// Exact negative AVAE bound by summation over all four variables.
pub fn exact_avae_loss<S: Scalar>(model: &TabularModel<S>, hist: &[S]) -> Result<AvaeTerms> {
    check_hist(hist, model.x_grid.n)?;
    check_budget(model.x_grid.n, model.z_grid.n)?;
    let g = Graph::new();
    let b = model.bind(&g);
    let v = avae_vars(model, &g, &b, hist)?;
    Ok(AvaeTerms {
        total: v.total.item()?.to_f64_lossy(),
        vae_kl: v.vae.item()?.to_f64_lossy(),
        cross: v.cross.item()?.to_f64_lossy(),
        delusion_neg_entropy: v.neg_ent.item()?.to_f64_lossy(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TabularObjective {
    Vae,
    Avae,
}

/// Loss and gradients with respect to `(g, enc_mu, enc_log_sigma)`.
pub fn tabular_loss_and_grads<S: Scalar>(model: &TabularModel<S>, hist: &[S], objective: TabularObjective) -> Result<(S, [Tensor<S>; 3])> {
    check_hist(hist, model.x_grid.n)?;
    let g = Graph::new();
    let b = model.bind(&g);
    let loss = match objective {
        TabularObjective::Vae => vae_kl_var(model.log_encoder(&g, &b), model.log_decoder(&g, &b), hist)?,
        TabularObjective::Avae => {
            check_budget(model.x_grid.n, model.z_grid.n)?;
            avae_vars(model, &g, &b, hist)?.total
        }
    };
    let value = loss.item()?;
    let grads = g.backward(loss)?;
    let flat = |v: Var<'_, S>| {
        let t = grads.wrt(v);
        Tensor::vector(t.data().to_vec())
    };
    Ok((value, [flat(b.g), flat(b.mu), flat(b.log_sigma)]))
}

/// The four transition panels.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmaps<S> {
    /// `p(x'|z')`, rows `z'`.
    pub decoder: Tensor<S>,
    /// `p(x) Q(x'|x)`, rows `x`.
    pub x_joint: Tensor<S>,
    /// `q(z|x)`, rows `x`.
    pub encoder: Tensor<S>,
    /// `p(z') Q(z|z')`, rows `z'`.
    pub z_joint: Tensor<S>,
}

pub fn transition_heatmaps<S: Scalar>(model: &TabularModel<S>) -> Result<Heatmaps<S>> {
    let dec = model.decoder_table();
    let enc = model.encoder_table();
    let nz = S::from_usize(model.z_grid.n).unwrap_or_else(S::one);
    // p(x) = sum_z p(z) p(x|z)
    let px = dec.sum_axis(0)?.map(|v| v / nz);
    let q_xx = enc.matmul(&dec)?;
    let px_col = px.reshape(vec![model.x_grid.n, 1])?;
    let x_joint = q_xx.zip_map(&px_col, "mul", |a, b| a * b)?;
    let z_joint = dec.matmul(&enc)?.map(|v| v / nz);
    Ok(Heatmaps {
        decoder: dec,
        x_joint,
        encoder: enc,
        z_joint,
    })
}

/// Fraction of a square matrix's mass on its diagonal.
pub fn diag_mass<S: Scalar>(m: &Tensor<S>) -> S {
    let n = m.rows().min(m.cols());
    let tr: S = (0..n).map(|i| m.data()[i * m.cols() + i]).sum();
    tr / m.sum()
}

/// Largest deviation of any row sum from one.
pub fn row_stochastic_error<S: Scalar>(m: &Tensor<S>) -> S {
    (0..m.rows())
        .map(|i| (m.row_slice(i).iter().copied().sum::<S>() - S::one()).abs())
        .fold(S::zero(), S::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularTrainConfig {
    pub steps: usize,
    pub adam: AdamConfig,
}

/// Adam on the exact loss. Returns the loss before every step.
pub fn train_tabular<S: Scalar>(
    model: &mut TabularModel<S>,
    hist: &[S],
    objective: TabularObjective,
    cfg: &TabularTrainConfig,
) -> Result<Vec<f64>> {
    let names = ["g".to_string(), "enc_mu".to_string(), "enc_log_sigma".to_string()];
    let mut params = model.params().map(|(_, t)| t);
    let mut opt = Adam::new(cfg.adam.clone(), params.iter());
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grads) = tabular_loss_and_grads(model, hist, objective)?;
        let loss = loss.to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        history.push(loss);
        {
            let [a, b, c] = &mut params;
            opt.update(&mut [a, b, c], &names, &grads)?;
        }
        model.g = params[0].data().to_vec();
        model.enc_mu = params[1].data().to_vec();
        model.enc_log_sigma = params[2].data().to_vec();
    }
    Ok(history)
}

/// Mixture of von-Mises bumps on the grid, normalised.
pub fn bump_mixture<S: Scalar>(grid: VmGrid, centers: &[S], spread: S) -> Result<Vec<S>> {
    let mut h = vec![S::zero(); grid.n];
    for &c in centers {
        for (hi, p) in h.iter_mut().zip(vm_density(grid, c, spread)?) {
            *hi += p;
        }
    }
    let total: S = h.iter().copied().sum();
    Ok(h.into_iter().map(|p| p / total).collect())
}

/// Bayes posterior table of a decoder under the uniform prior.
pub fn posterior_table<S: Scalar>(dec: &Tensor<S>) -> Result<Tensor<S>> {
    let px = dec.sum_axis(0)?;
    dec.zip_map(&px, "div", |a, b| a / b)?.transpose()
}

/// Marginal `p(x) = mean_z p(x|z)`.
pub fn data_marginal<S: Scalar>(dec: &Tensor<S>) -> Result<Vec<S>> {
    let nz = S::from_usize(dec.rows()).unwrap_or_else(S::one);
    Ok(dec.sum_axis(0)?.map(|v| v / nz).into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    #[test]
    fn density_normalises_and_flattens() {
        let grid = VmGrid::new(16).unwrap();
        let p = vm_density(grid, 1.3f64, 0.2).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let flat = vm_density(grid, 0.4f64, 1e6).unwrap();
        assert!(flat.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-6));
        assert!(vm_density(grid, 0.0f64, 0.0).is_err());
        assert!(VmGrid::new(1).is_err());
    }

    #[test]
    fn consistent_pair_has_zero_kl() {
        let grid = VmGrid::new(8).unwrap();
        let m = TabularModel::<f64>::init(grid, grid, 0.5, 0.5, 1e-3, &mut Streams::new(0).stream("t"));
        let dec = m.decoder_table();
        let q = posterior_table(&dec).unwrap();
        let px = data_marginal(&dec).unwrap();
        assert!(vae_kl_tables(&q, &dec, &px).unwrap().abs() < 1e-12);
    }

    #[test]
    fn budget_guard() {
        let big = VmGrid::new(65).unwrap();
        let m = TabularModel::<f64>::init(big, big, 0.5, 0.5, 1e-3, &mut Streams::new(0).stream("t"));
        let h = vec![1.0 / 65.0; 65];
        assert!(matches!(exact_avae_loss(&m, &h), Err(Error::Config(_))));
    }
}
