//! Library gradients of every objective against finite differences of an
//! independent loop implementation with the delusions held fixed.

mod common;

use avae_core::nets::{Arch, ModelPair};
use avae_core::objectives::*;
use avae_core::rng::Streams;
use avae_core::Tensor;
use common::reference;
use rand::Rng;

const KINDS: [ObjectiveKind; 5] = [
    ObjectiveKind::Vae,
    ObjectiveKind::Avae,
    ObjectiveKind::Se,
    ObjectiveKind::SeAvae,
    ObjectiveKind::AvaeSs,
];

fn random_case(seed: u64) -> (ModelPair<f64>, Tensor) {
    let mut rng = Streams::new(seed).stream("case");
    let depth = rng.random_range(0..=2usize);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=8usize)).collect();
    let arch = Arch {
        input: rng.random_range(3..=6),
        hidden,
        latent: rng.random_range(1..=3),
    };
    let obs_var = rng.random_range(0.2..1.5);
    let model = ModelPair::init(&arch, obs_var, &mut rng);
    let x = Tensor::new(vec![3, arch.input], (0..3 * arch.input).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    (model, x)
}

fn config(kind: ObjectiveKind, noisy: bool) -> ObjectiveConfig {
    let mut cfg = ObjectiveConfig::new(kind);
    cfg.noisy_delusions = noisy;
    cfg.mc_samples = 2;
    if kind.needs_attack() {
        cfg.attack = Some(PgdConfig::training(0.1));
    }
    cfg
}

fn check(kind: ObjectiveKind, seed: u64, noisy: bool) {
    let (model, x) = random_case(seed);
    let cfg = config(kind, noisy);
    let noise = Noise::draw(&mut Streams::new(seed).stream("noise"), &cfg, x.rows(), model.enc.latent_dim(), model.dec.output_dim());
    let x_se = kind.needs_attack().then(|| se_delusion(&model.enc, &x, &cfg).unwrap());
    let data = (kind != ObjectiveKind::AvaeSs).then_some(&x);
    let ev = loss_and_grads(&model, data, &cfg, &noise, x_se.as_ref()).unwrap();

    let frozen = reference::freeze(&model, data, &cfg, &noise, x_se.as_ref());
    let ref_loss = reference::loss(&model, &cfg, &noise, &frozen);
    assert!((ev.loss - ref_loss).abs() < 1e-10 * ref_loss.abs().max(1.0), "{kind:?}: {} vs {ref_loss}", ev.loss);

    let fd = reference::fd_grads(&model, &cfg, &noise, &frozen, 1e-5);
    let err = reference::max_rel_err(&ev.grads, &fd, 1e-4);
    assert!(err < 1e-4, "{kind:?} seed {seed}: relative error {err}");
}

#[test]
fn every_objective_matches_finite_differences() {
    for seed in 0..6 {
        for kind in KINDS {
            check(kind, seed, false);
        }
    }
}

#[test]
fn noisy_delusions_match_finite_differences() {
    for seed in 10..13 {
        check(ObjectiveKind::Avae, seed, true);
        check(ObjectiveKind::SeAvae, seed, true);
        check(ObjectiveKind::AvaeSs, seed, true);
    }
}

#[test]
fn mse_likelihood_matches_finite_differences() {
    let (model, x) = random_case(20);
    let mut cfg = config(ObjectiveKind::Avae, false);
    cfg.likelihood = Likelihood::Mse { v_eval: 0.05 };
    let noise = Noise::draw(&mut Streams::new(20).stream("noise"), &cfg, x.rows(), model.enc.latent_dim(), model.dec.output_dim());
    let ev = loss_and_grads(&model, Some(&x), &cfg, &noise, None).unwrap();
    let frozen = reference::freeze(&model, Some(&x), &cfg, &noise, None);
    let fd = reference::fd_grads(&model, &cfg, &noise, &frozen, 1e-5);
    assert!(reference::max_rel_err(&ev.grads, &fd, 1e-4) < 1e-4);
}

#[test]
fn avae_ss_decoder_gradient_is_exactly_zero() {
    let (model, _) = random_case(21);
    let cfg = config(ObjectiveKind::AvaeSs, true);
    let noise = Noise::draw(&mut Streams::new(21).stream("noise"), &cfg, 4, model.enc.latent_dim(), model.dec.output_dim());
    let ev = loss_and_grads(&model, None, &cfg, &noise, None).unwrap();
    let n_enc = model.enc.params().len();
    for g in &ev.grads[n_enc..] {
        assert!(g.data().iter().all(|v| v.to_bits() == 0));
    }
    assert!(ev.grads[..n_enc].iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
}

/// Gradients with respect to the decoder only flow through the reconstruction.
#[test]
fn decoder_gradient_comes_only_from_reconstruction() {
    let (model, x) = random_case(22);
    let n_enc = model.enc.params().len();
    let vae = config(ObjectiveKind::Vae, false);
    let noise = Noise::draw(&mut Streams::new(22).stream("noise"), &config(ObjectiveKind::SeAvae, false), x.rows(), model.enc.latent_dim(), model.dec.output_dim());
    let vae_noise = Noise { z: noise.z.clone(), x: vec![], prior: vec![] };
    let base = loss_and_grads(&model, Some(&x), &vae, &vae_noise, None).unwrap();
    for kind in [ObjectiveKind::Avae, ObjectiveKind::SeAvae] {
        let cfg = config(kind, false);
        let x_se = kind.needs_attack().then(|| se_delusion(&model.enc, &x, &cfg).unwrap());
        let ev = loss_and_grads(&model, Some(&x), &cfg, &noise, x_se.as_ref()).unwrap();
        for (a, b) in ev.grads[n_enc..].iter().zip(&base.grads[n_enc..]) {
            assert!(a.max_abs_diff(b) < 1e-12, "{kind:?}");
        }
    }
}
