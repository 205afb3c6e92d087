//! Training objectives: VAE, AVAE, SE, SE-AVAE and AVAE-SS, the PGD input
//! attack used by the SE variants, and the minibatch training loop.
//!
//! All bounds are computed per example (`[batch, 1]`) and the loss is the
//! negative batch mean. No additive constants are dropped, except for the
//! Gaussian normalizer in [`Likelihood::Mse`] mode.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{coupled_pair_var, coupling_cross_var, entropy_var, kl_to_standard_var, reparam_var};
use crate::nets::{collect_grads, Adam, BoundEncoder, BoundModel, Encoder, ModelPair};
use crate::rng::{normal_vec, uniform_vec, Streams};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Vae,
    Avae,
    Se,
    #[serde(alias = "se-avae")]
    SeAvae,
    #[serde(alias = "avae-ss")]
    AvaeSs,
}

impl ObjectiveKind {
    pub fn needs_attack(self) -> bool {
        matches!(self, ObjectiveKind::Se | ObjectiveKind::SeAvae)
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Vae => "vae",
            ObjectiveKind::Avae => "avae",
            ObjectiveKind::Se => "se",
            ObjectiveKind::SeAvae => "se_avae",
            ObjectiveKind::AvaeSs => "avae_ss",
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vae" => Ok(ObjectiveKind::Vae),
            "avae" => Ok(ObjectiveKind::Avae),
            "se" => Ok(ObjectiveKind::Se),
            "se_avae" => Ok(ObjectiveKind::SeAvae),
            "avae_ss" => Ok(ObjectiveKind::AvaeSs),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

/// L-infinity PGD settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    /// Data box the perturbed input must stay in, if any.
    pub clip: Option<(f64, f64)>,
}

impl PgdConfig {
    /// 20 steps of size eps/4, single start at the clean input.
    pub fn training(epsilon: f64) -> Self {
        Self {
            epsilon,
            steps: 20,
            step_size: epsilon / 4.0,
            restarts: 1,
            clip: Some((0.0, 1.0)),
        }
    }

    /// 40 steps of size eps/4 with 10 restarts.
    pub fn evaluation(epsilon: f64) -> Self {
        Self {
            epsilon,
            steps: 40,
            step_size: epsilon / 4.0,
            restarts: 10,
            clip: Some((0.0, 1.0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.step_size >= 0.0) || self.restarts == 0 {
            return Err(Error::Config(format!(
                "invalid attack: epsilon {}, step {}, restarts {}",
                self.epsilon, self.step_size, self.restarts
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Likelihood {
    /// `N(x; g(z), v I)` with the decoder's `v`.
    Gaussian,
    /// Small-noise limit: `-||x - g(z)||^2 / (2 v_eval)` without normalizer.
    Mse { v_eval: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub rho: f64,
    pub rho_se: f64,
    pub attack: Option<PgdConfig>,
    pub mc_samples: usize,
    /// Add `N(0, v I)` to decoder-generated delusions instead of using the mean.
    pub noisy_delusions: bool,
    /// Multiplier on the SE pairwise terms of SE-AVAE.
    pub se_weight: f64,
    pub likelihood: Likelihood,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            rho: 0.975,
            rho_se: 0.95,
            attack: None,
            mc_samples: 1,
            noisy_delusions: false,
            se_weight: 1.0,
            likelihood: Likelihood::Gaussian,
        }
    }

    pub fn with_attack(mut self, attack: PgdConfig) -> Self {
        self.attack = Some(attack);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("rho", self.rho), ("rho_se", self.rho_se)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1)")));
            }
        }
        match (&self.attack, self.kind.needs_attack()) {
            (None, true) => return Err(Error::Config(format!("objective {} needs an attack epsilon", self.kind.name()))),
            (Some(_), false) => return Err(Error::Config(format!("objective {} takes no attack", self.kind.name()))),
            (Some(a), true) => a.validate()?,
            (None, false) => {}
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if let Likelihood::Mse { v_eval } = self.likelihood {
            if !(v_eval > 0.0) {
                return Err(Error::Config(format!("v_eval = {v_eval} must be positive")));
            }
        }
        Ok(())
    }
}

/// Standard-normal draws consumed by one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise<S> {
    /// Reparameterization noise, one `[batch, latent]` tensor per MC sample.
    pub z: Vec<Tensor<S>>,
    /// Delusion observation noise, `[batch, obs]` per sample (noisy mode only).
    pub x: Vec<Tensor<S>>,
    /// Prior draws `z''` for AVAE-SS, `[batch, latent]` per sample.
    pub prior: Vec<Tensor<S>>,
}

impl<S: Scalar> Noise<S> {
    pub fn draw<R: rand::RngCore>(rng: &mut R, cfg: &ObjectiveConfig, batch: usize, latent: usize, obs: usize) -> Self {
        let mut n = Self {
            z: vec![],
            x: vec![],
            prior: vec![],
        };
        for _ in 0..cfg.mc_samples {
            if cfg.kind == ObjectiveKind::AvaeSs {
                n.prior.push(Tensor::new(vec![batch, latent], normal_vec(rng, batch * latent)).expect("shape"));
            }
            n.z.push(Tensor::new(vec![batch, latent], normal_vec(rng, batch * latent)).expect("shape"));
            if cfg.noisy_delusions && cfg.kind != ObjectiveKind::Vae && cfg.kind != ObjectiveKind::Se {
                n.x.push(Tensor::new(vec![batch, obs], normal_vec(rng, batch * obs)).expect("shape"));
            }
        }
        n
    }
}

/// Batch-mean value of every term of a bound; the loss is
/// `-(recon - kl + cross_avae + cross_se + entropy_terms)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub recon: f64,
    pub kl: f64,
    pub cross_avae: f64,
    pub cross_se: f64,
    pub entropy_terms: f64,
}

impl Terms {
    pub fn bound(&self) -> f64 {
        self.recon - self.kl + self.cross_avae + self.cross_se + self.entropy_terms
    }
}

/// Per-example term variables, each `[batch, 1]` or absent.
struct TermVars<'g, S> {
    recon: Option<Var<'g, S>>,
    kl: Option<Var<'g, S>>,
    cross_avae: Option<Var<'g, S>>,
    cross_se: Option<Var<'g, S>>,
    entropy: Option<Var<'g, S>>,
}

impl<'g, S: Scalar> TermVars<'g, S> {
    fn empty() -> Self {
        Self {
            recon: None,
            kl: None,
            cross_avae: None,
            cross_se: None,
            entropy: None,
        }
    }

    fn bound(&self) -> Result<Var<'g, S>> {
        let mut acc: Option<Var<'g, S>> = None;
        let parts = [
            (self.recon, false),
            (self.kl, true),
            (self.cross_avae, false),
            (self.cross_se, false),
            (self.entropy, false),
        ];
        for (v, negate) in parts {
            let Some(v) = v else { continue };
            let v = if negate { v.neg() } else { v };
            acc = Some(match acc {
                None => v,
                Some(a) => a.add(v)?,
            });
        }
        acc.ok_or_else(|| Error::Contract("bound with no terms".into()))
    }

    fn means(&self) -> Result<Terms> {
        let m = |v: Option<Var<'g, S>>| -> Result<f64> {
            match v {
                None => Ok(0.0),
                Some(v) => Ok(v.value().mean().to_f64_lossy()),
            }
        };
        Ok(Terms {
            recon: m(self.recon)?,
            kl: m(self.kl)?,
            cross_avae: m(self.cross_avae)?,
            cross_se: m(self.cross_se)?,
            entropy_terms: m(self.entropy)?,
        })
    }
}

/// Per-example `log p(x|z)`.
pub fn recon_var<'g, S: Scalar>(x: Var<'g, S>, xhat: Var<'g, S>, obs_var: S, lik: Likelihood) -> Result<Var<'g, S>> {
    let d2 = x.sub(xhat)?.square();
    let ss = d2.sum_axis(1)?;
    match lik {
        Likelihood::Gaussian => {
            let n = S::from_usize(x.shape()[1]).unwrap_or_else(S::one);
            let konst = -S::c(0.5) * n * (S::c(2.0 * PI) * obs_var).ln();
            Ok(ss.scale(-S::one() / (obs_var + obs_var)).add_scalar(konst))
        }
        Likelihood::Mse { v_eval } => Ok(ss.scale(-S::one() / S::c(2.0 * v_eval))),
    }
}

fn delusion<'g, S: Scalar>(model: &BoundModel<'g, S>, z: Var<'g, S>, obs_var: S, eps_x: Option<&Tensor<S>>) -> Result<Var<'g, S>> {
    let g = z.graph();
    let xt = model.dec.decode(z)?.stop_gradient();
    match eps_x {
        Some(e) => xt.add(g.constant(e).scale(obs_var.sqrt())),
        None => Ok(xt),
    }
}

/// Builds the per-example bound for one MC sample.
fn sample_terms<'g, S: Scalar>(
    model: &BoundModel<'g, S>,
    obs_var: S,
    x: Option<Var<'g, S>>,
    cfg: &ObjectiveConfig,
    noise: &Noise<S>,
    s: usize,
    se_delusion: Option<&Tensor<S>>,
) -> Result<TermVars<'g, S>> {
    let g = model.enc.head_mu.w.graph();
    let eps_z = g.constant(&noise.z[s]);
    let eps_x = noise.x.get(s);
    let mut t = TermVars::empty();
    let rho = S::c(cfg.rho);
    let x = match (cfg.kind, x) {
        (ObjectiveKind::AvaeSs, _) => {
            let zpp = g.constant(&noise.prior[s]);
            model.dec.decode(zpp)?.stop_gradient()
        }
        (_, Some(x)) => x,
        (_, None) => return Err(Error::Contract("objective needs data".into())),
    };
    let (mu, var) = model.enc.encode(x)?;
    let z = reparam_var(mu, var, eps_z)?;
    if cfg.kind != ObjectiveKind::AvaeSs {
        let xhat = model.dec.decode(z)?;
        t.recon = Some(recon_var(x, xhat, obs_var, cfg.likelihood)?);
    }
    match cfg.kind {
        ObjectiveKind::Vae => {
            t.kl = Some(kl_to_standard_var(mu, var)?);
        }
        ObjectiveKind::Avae | ObjectiveKind::AvaeSs => {
            t.kl = Some(kl_to_standard_var(mu, var)?);
            let xt = delusion(model, z, obs_var, eps_x)?;
            let (mu_p, var_p) = model.enc.encode(xt)?;
            t.cross_avae = Some(coupling_cross_var(mu, var, mu_p, var_p, rho)?);
            t.entropy = Some(entropy_var(var_p)?);
        }
        ObjectiveKind::Se => {
            let xt = se_delusion.ok_or_else(|| Error::Contract("SE needs an attacked input".into()))?;
            let (mu_p, var_p) = model.enc.encode(g.constant(xt))?;
            let pair = coupled_pair_var(mu, var, mu_p, var_p, S::c(cfg.rho_se), true)?;
            t.cross_se = Some(pair.expected_log_joint);
            t.entropy = Some(pair.entropy);
        }
        ObjectiveKind::SeAvae => {
            let w = S::c(cfg.se_weight);
            t.kl = Some(kl_to_standard_var(mu, var)?);
            let xt = delusion(model, z, obs_var, eps_x)?;
            let (mu_p, var_p) = model.enc.encode(xt)?;
            t.cross_avae = Some(coupling_cross_var(mu, var, mu_p, var_p, rho)?);
            let xtt = se_delusion.ok_or_else(|| Error::Contract("SE-AVAE needs an attacked input".into()))?;
            let (mu_pp, var_pp) = model.enc.encode(g.constant(xtt))?;
            t.cross_se = Some(coupling_cross_var(mu, var, mu_pp, var_pp, S::c(cfg.rho_se))?.scale(w));
            t.entropy = Some(entropy_var(var_p)?.add(entropy_var(var_pp)?.scale(w))?);
        }
    }
    Ok(t)
}

/// Loss, term breakdown and gradients for every model parameter (in
/// [`ModelPair::params`] order) at one minibatch.
pub struct LossEval<S> {
    pub loss: S,
    pub terms: Terms,
    pub grads: Vec<Tensor<S>>,
}

/// Evaluates a loss on the graph `g`. Returns the scalar loss variable, the
/// bound model, and term means.
pub fn build_loss<'g, S: Scalar>(
    g: &'g Graph<S>,
    model: &ModelPair<S>,
    x: Option<&Tensor<S>>,
    cfg: &ObjectiveConfig,
    noise: &Noise<S>,
    se_delusion: Option<&Tensor<S>>,
) -> Result<(Var<'g, S>, BoundModel<'g, S>, Terms)> {
    let dec_trainable = cfg.kind != ObjectiveKind::AvaeSs;
    let bound = model.bind(g, true, dec_trainable);
    let xv = x.map(|x| g.constant(x));
    let mc = noise.z.len();
    if mc == 0 {
        return Err(Error::Contract("noise has no samples".into()));
    }
    let mut total: Option<Var<'g, S>> = None;
    let mut terms = Terms::default();
    for s in 0..mc {
        let t = sample_terms(&bound, model.dec.obs_var, xv, cfg, noise, s, se_delusion)?;
        let b = t.bound()?;
        let tm = t.means()?;
        terms.recon += tm.recon;
        terms.kl += tm.kl;
        terms.cross_avae += tm.cross_avae;
        terms.cross_se += tm.cross_se;
        terms.entropy_terms += tm.entropy_terms;
        total = Some(match total {
            None => b,
            Some(a) => a.add(b)?,
        });
    }
    let inv = 1.0 / mc as f64;
    terms.recon *= inv;
    terms.kl *= inv;
    terms.cross_avae *= inv;
    terms.cross_se *= inv;
    terms.entropy_terms *= inv;
    let loss = total.expect("at least one sample").mean().scale(-S::c(inv));
    Ok((loss, bound, terms))
}

pub fn loss_and_grads<S: Scalar>(
    model: &ModelPair<S>,
    x: Option<&Tensor<S>>,
    cfg: &ObjectiveConfig,
    noise: &Noise<S>,
    se_delusion: Option<&Tensor<S>>,
) -> Result<LossEval<S>> {
    let g = Graph::new();
    let (loss, bound, terms) = build_loss(&g, model, x, cfg, noise, se_delusion)?;
    let value = loss.item()?;
    let grads = g.backward(loss)?;
    Ok(LossEval {
        loss: value,
        terms,
        grads: collect_grads(&grads, &bound.vars()),
    })
}

fn loss_value<S: Scalar>(
    model: &ModelPair<S>,
    x: Option<&Tensor<S>>,
    cfg: &ObjectiveConfig,
    noise: &Noise<S>,
    se_delusion: Option<&Tensor<S>>,
) -> Result<(S, Terms)> {
    let g = Graph::new();
    let (loss, _, terms) = build_loss(&g, model, x, cfg, noise, se_delusion)?;
    Ok((loss.item()?, terms))
}

fn require_kind(cfg: &ObjectiveConfig, kinds: &[ObjectiveKind]) -> Result<()> {
    if kinds.contains(&cfg.kind) {
        Ok(())
    } else {
        Err(Error::Contract(format!("objective {} not valid here", cfg.kind.name())))
    }
}

/// Batch-mean ELBO (a bound, not a loss).
pub fn elbo<S: Scalar>(model: &ModelPair<S>, x: &Tensor<S>, noise: &Noise<S>, lik: Likelihood) -> Result<S> {
    let mut cfg = ObjectiveConfig::new(ObjectiveKind::Vae);
    cfg.likelihood = lik;
    Ok(-loss_value(model, Some(x), &cfg, noise, None)?.0)
}

pub fn avae_loss<S: Scalar>(model: &ModelPair<S>, x: &Tensor<S>, cfg: &ObjectiveConfig, noise: &Noise<S>) -> Result<(S, Terms)> {
    require_kind(cfg, &[ObjectiveKind::Avae])?;
    loss_value(model, Some(x), cfg, noise, None)
}

/// SE loss. The attacked input is produced here with the encoder frozen.
pub fn se_loss<S: Scalar>(model: &ModelPair<S>, x: &Tensor<S>, cfg: &ObjectiveConfig, noise: &Noise<S>) -> Result<(S, Terms)> {
    require_kind(cfg, &[ObjectiveKind::Se])?;
    let xt = se_delusion(&model.enc, x, cfg)?;
    loss_value(model, Some(x), cfg, noise, Some(&xt))
}

pub fn se_avae_loss<S: Scalar>(model: &ModelPair<S>, x: &Tensor<S>, cfg: &ObjectiveConfig, noise: &Noise<S>) -> Result<(S, Terms)> {
    require_kind(cfg, &[ObjectiveKind::SeAvae])?;
    let xt = se_delusion(&model.enc, x, cfg)?;
    loss_value(model, Some(x), cfg, noise, Some(&xt))
}

pub fn avae_ss_loss<S: Scalar>(model: &ModelPair<S>, cfg: &ObjectiveConfig, noise: &Noise<S>) -> Result<(S, Terms)> {
    require_kind(cfg, &[ObjectiveKind::AvaeSs])?;
    loss_value(model, None, cfg, noise, None)
}

/// Attacked input for the SE terms.
pub fn se_delusion<S: Scalar>(enc: &Encoder<S>, x: &Tensor<S>, cfg: &ObjectiveConfig) -> Result<Tensor<S>> {
    let attack = cfg
        .attack
        .as_ref()
        .ok_or_else(|| Error::Config("SE objective without attack".into()))?;
    Ok(se_attack(enc, x, attack, S::c(cfg.rho_se), PgdStart::default())?.x_adv)
}

// ---- PGD -------------------------------------------------------------------

/// Output of one batched objective evaluation inside [`pgd_maximize`].
pub struct PgdEval<S> {
    /// Objective per row (to be maximized).
    pub value: Vec<S>,
    /// Gradient of `sum(value)` with respect to the rows.
    pub grad: Tensor<S>,
    /// Rows for which the attack has already succeeded; they stop moving.
    pub success: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct PgdResult<S> {
    pub x_adv: Tensor<S>,
    pub delta: Tensor<S>,
    pub best_value: Vec<S>,
    pub success: Vec<bool>,
}

/// Restart initialisation.
pub struct PgdStart<'a, S> {
    /// First-restart perturbation (projected onto the current ball); zero if absent.
    pub warm: Option<&'a Tensor<S>>,
    /// Random restarts draw from `streams.substream("pgd-restart", ids[i])`.
    pub streams: Option<(Streams, &'a [u64])>,
}

impl<S> Default for PgdStart<'_, S> {
    fn default() -> Self {
        Self { warm: None, streams: None }
    }
}

fn project<S: Scalar>(delta: &mut [S], x: &[S], eps: S, clip: Option<(f64, f64)>) {
    for (d, &xi) in delta.iter_mut().zip(x) {
        let (mut lo, mut hi) = (-eps, eps);
        if let Some((a, b)) = clip {
            lo = lo.max(S::c(a) - xi);
            hi = hi.min(S::c(b) - xi);
            if lo > hi {
                *d = S::zero();
                continue;
            }
        }
        *d = d.max(lo).min(hi);
    }
}

/// Batched projected sign-gradient ascent in an L-infinity ball.
///
/// `eval(x_rows, row_indices)` scores a subset of rows. Every iterate is scored
/// and the best one per row is kept, so the returned value is never below the
/// value at the starting point. Rows flagged as successful are frozen at the
/// iterate that succeeded.
pub fn pgd_maximize<S: Scalar, F>(x: &Tensor<S>, cfg: &PgdConfig, start: PgdStart<'_, S>, mut eval: F) -> Result<PgdResult<S>>
where
    F: FnMut(&Tensor<S>, &[usize]) -> Result<PgdEval<S>>,
{
    cfg.validate()?;
    let n = x.rows();
    let d = x.cols();
    let eps = S::c(cfg.epsilon);
    let step = S::c(cfg.step_size);
    let mut best_delta = Tensor::zeros(vec![n, d]);
    let mut best_value = vec![S::neg_infinity(); n];
    let mut success = vec![false; n];

    for restart in 0..cfg.restarts {
        let active0: Vec<usize> = (0..n).filter(|&i| !success[i]).collect();
        if active0.is_empty() {
            break;
        }
        let mut delta = Tensor::zeros(vec![n, d]);
        for &i in &active0 {
            let row = delta.row_slice_mut(i);
            if restart == 0 {
                if let Some(w) = start.warm {
                    row.copy_from_slice(w.row_slice(i));
                }
            } else if let Some((streams, ids)) = &start.streams {
                let mut rng = streams.substream("pgd-restart", ids[i].wrapping_mul(1 << 16) + restart as u64);
                let eps64 = cfg.epsilon;
                row.copy_from_slice(&uniform_vec::<S, _>(&mut rng, d, -eps64, eps64));
            }
            project(row, x.row_slice(i), eps, cfg.clip);
        }
        let mut active = active0;
        for it in 0..=cfg.steps {
            if active.is_empty() {
                break;
            }
            let mut xa = x.gather_rows(&active);
            for (r, &i) in active.iter().enumerate() {
                for (v, &dl) in xa.row_slice_mut(r).iter_mut().zip(delta.row_slice(i)) {
                    *v += dl;
                }
            }
            let ev = eval(&xa, &active)?;
            for (r, &i) in active.iter().enumerate() {
                let won = ev.success.as_ref().is_some_and(|s| s[r]);
                if ev.value[r] > best_value[i] || won || best_value[i] == S::neg_infinity() {
                    best_value[i] = ev.value[r];
                    best_delta.row_slice_mut(i).copy_from_slice(delta.row_slice(i));
                }
                if won {
                    success[i] = true;
                }
            }
            if it == cfg.steps {
                break;
            }
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                if success[i] {
                    continue;
                }
                let grow = ev.grad.row_slice(r);
                let drow = delta.row_slice_mut(i);
                for (dl, &gv) in drow.iter_mut().zip(grow) {
                    if gv > S::zero() {
                        *dl += step;
                    } else if gv < S::zero() {
                        *dl -= step;
                    }
                }
                project(drow, x.row_slice(i), eps, cfg.clip);
                still.push(i);
            }
            active = still;
        }
    }
    let mut x_adv = x.clone();
    x_adv.add_assign_scaled(&best_delta, S::one());
    Ok(PgdResult {
        x_adv,
        delta: best_delta,
        best_value,
        success,
    })
}

/// Per-row SE attack objective
/// `-E[log p(Z'|Z; rho)] - H[q(Z'|x + a)] - H[q(Z|x)]`
/// with the clean posterior `(mu, var)` held fixed.
pub fn se_attack_objective<'g, S: Scalar>(
    enc: &BoundEncoder<'g, S>,
    mu: Var<'g, S>,
    var: Var<'g, S>,
    x_adv: Var<'g, S>,
    rho: S,
) -> Result<Var<'g, S>> {
    let (mu_p, var_p) = enc.encode(x_adv)?;
    let cross = coupling_cross_var(mu, var, mu_p, var_p, rho)?;
    cross.add(entropy_var(var_p)?)?.add(entropy_var(var)?)?.neg().reshape(&[mu.shape()[0]])
}

/// PGD on the SE augmentation objective with the encoder frozen.
///
/// Restarts after the first are random only if `start` carries streams.
pub fn se_attack<S: Scalar>(enc: &Encoder<S>, x: &Tensor<S>, cfg: &PgdConfig, rho: S, start: PgdStart<'_, S>) -> Result<PgdResult<S>> {
    let (mu0, var0) = enc.encode_tensor(x)?;
    pgd_maximize(x, cfg, start, |xa, idx| {
        let g = Graph::new();
        let e = enc.bind(&g, false);
        let mu = g.constant_owned(mu0.gather_rows(idx));
        let var = g.constant_owned(var0.gather_rows(idx));
        let xin = g.input(xa);
        let obj = se_attack_objective(&e, mu, var, xin, rho)?;
        let value = obj.value().into_data();
        let grads = g.backward(obj.sum())?;
        Ok(PgdEval {
            value,
            grad: grads.wrt(xin).clone(),
            success: None,
        })
    })
}

// ---- training --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Record elapsed wall-clock time in the metrics (breaks byte-identical logs).
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            record_wallclock: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub cross_avae: f64,
    pub cross_se: f64,
    pub entropy_terms: f64,
    pub wallclock_ms: u64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss,recon,kl,cross_avae,cross_se,entropy_terms,wallclock_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            self.step, self.loss, self.recon, self.kl, self.cross_avae, self.cross_se, self.entropy_terms, self.wallclock_ms
        )
    }
}

/// Resumable position of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub step: usize,
}

/// Minibatch Adam training.
///
/// Batches are drawn by reshuffling the data every epoch with the
/// `shuffle/<epoch>` stream and the loss noise comes from `noise/<step>`, so a
/// run resumed from `progress` continues exactly as an uninterrupted one.
/// For AVAE-SS `data` may be empty and the decoder is never updated.
pub fn train<S: Scalar>(
    model: &mut ModelPair<S>,
    data: &Tensor<S>,
    cfg: &ObjectiveConfig,
    tcfg: &TrainConfig,
    opt: &mut Adam<S>,
    streams: &Streams,
    progress: &mut TrainProgress,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if tcfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let uses_data = cfg.kind != ObjectiveKind::AvaeSs;
    let n = data.rows();
    if uses_data && (data.rank() != 2 || n == 0) {
        return Err(Error::Config("training data must be a non-empty [n, dim] matrix".into()));
    }
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let n_enc = model.enc.params().len();
    let trainable: Vec<bool> = (0..names.len()).map(|i| uses_data || i < n_enc).collect();
    let latent = model.enc.latent_dim();
    let obs = model.dec.output_dim();
    let started = Instant::now();
    let mut log = Vec::with_capacity(tcfg.steps);
    let per_epoch = n.div_ceil(tcfg.batch_size).max(1);
    let mut order_epoch = usize::MAX;
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..tcfg.steps {
        let step = progress.step;
        let batch = if uses_data {
            let epoch = step / per_epoch;
            if epoch != order_epoch {
                order = (0..n).collect();
                order.shuffle(&mut streams.substream("shuffle", epoch as u64));
                order_epoch = epoch;
            }
            let k = step % per_epoch;
            let idx = &order[k * tcfg.batch_size..((k + 1) * tcfg.batch_size).min(n)];
            Some(data.gather_rows(idx))
        } else {
            None
        };
        let bsz = batch.as_ref().map_or(tcfg.batch_size, Tensor::rows);
        let noise = Noise::draw(&mut streams.substream("noise", step as u64), cfg, bsz, latent, obs);
        let diverged = |e: Error| match e {
            Error::NonFiniteGradient(_) => Error::Divergence { step, loss: f64::NAN },
            e => e,
        };
        let xt = match (&batch, cfg.kind.needs_attack()) {
            (Some(b), true) => Some(se_delusion(&model.enc, b, cfg).map_err(diverged)?),
            _ => None,
        };
        let ev = loss_and_grads(model, batch.as_ref(), cfg, &noise, xt.as_ref()).map_err(|e| match e {
            Error::NonFiniteGradient(_) => {
                let loss = loss_value(model, batch.as_ref(), cfg, &noise, xt.as_ref())
                    .map_or(f64::NAN, |(l, _)| l.to_f64_lossy());
                Error::Divergence { step, loss }
            }
            e => e,
        })?;
        let loss = ev.loss.to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let mut params = model.params_mut();
        opt.update_where(&mut params, &names, &ev.grads, &trainable)?;
        progress.step += 1;
        log.push(StepMetrics {
            step,
            loss,
            recon: ev.terms.recon,
            kl: ev.terms.kl,
            cross_avae: ev.terms.cross_avae,
            cross_se: ev.terms.cross_se,
            entropy_terms: ev.terms.entropy_terms,
            wallclock_ms: if tcfg.record_wallclock {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
    }
    Ok(log)
}
