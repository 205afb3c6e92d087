//! Probe, attack, drift and reconstruction metrics.

use avae_core::data::synth_linear_gaussian;
use avae_core::eval::*;
use avae_core::nets::{AdamConfig, Arch, Decoder, Encoder, ModelPair};
use avae_core::objectives::PgdConfig;
use avae_core::ppca::PpcaModel;
use avae_core::rng::{normal_vec, Streams};
use avae_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn random_model(seed: u64, input: usize, latent: usize) -> ModelPair<f64> {
    let arch = Arch {
        input,
        hidden: vec![8],
        latent,
    };
    ModelPair::init(&arch, 0.1, &mut Streams::new(seed).stream("m"))
}

fn unit_box(seed: u64, n: usize, d: usize) -> Tensor {
    let mut rng = Streams::new(seed).stream("x");
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn fast_probe() -> ProbeConfig {
    ProbeConfig {
        steps: 500,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
    }
}

/// Labels of a random linear rule on the features of `enc`, split by median.
fn linear_labels(enc: &Encoder<f64>, x: &Tensor, seed: u64) -> Vec<usize> {
    let h = encode_mean(enc, x).unwrap();
    let dir: Vec<f64> = normal_vec(&mut Streams::new(seed).stream("dir"), h.cols());
    let s: Vec<f64> = (0..h.rows()).map(|i| h.row_slice(i).iter().zip(&dir).map(|(a, b)| a * b).sum()).collect();
    let mut sorted = s.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = sorted[s.len() / 2];
    s.iter().map(|&v| usize::from(v > med)).collect()
}

#[test]
fn zero_radius_attack_gives_nominal_accuracy() {
    let m = random_model(1, 6, 3);
    let x = unit_box(1, 120, 6);
    let y = linear_labels(&m.enc, &x, 1);
    let probe = train_probe(&m.enc, &x, &y, 2, &fast_probe()).unwrap();
    let nominal = accuracy(&probe.classify(&m.enc, &x).unwrap(), &y);
    let o = adversarial_accuracy(&m.enc, &probe, &x, &y, &PgdConfig::evaluation(0.0), &Streams::new(1), None).unwrap();
    assert_eq!(o.nominal, nominal);
    assert_eq!(o.adversarial, nominal);
}

#[test]
fn probe_training_leaves_encoder_untouched() {
    let m = random_model(2, 5, 2);
    let x = unit_box(2, 50, 5);
    let y = linear_labels(&m.enc, &x, 2);
    let before = m.enc.checksum();
    train_probe(&m.enc, &x, &y, 2, &fast_probe()).unwrap();
    assert_eq!(m.enc.checksum(), before);
}

#[test]
fn probe_separates_linearly_separable_features() {
    let enc = Encoder::linear(&avae_core::linalg::identity(4), &[0.1; 4]).unwrap();
    let mut x = unit_box(3, 400, 4);
    // push classes apart along a fixed direction to leave a margin
    let y: Vec<usize> = (0..400).map(|i| i % 2).collect();
    for (i, &c) in y.iter().enumerate() {
        let shift = if c == 1 { 0.6 } else { -0.6 };
        for v in x.row_slice_mut(i) {
            *v += shift;
        }
    }
    let probe = train_probe(&enc, &x, &y, 2, &fast_probe()).unwrap();
    assert!(accuracy(&probe.classify(&enc, &x).unwrap(), &y) > 0.99);
}

#[test]
fn probe_on_exact_ppca_encoder_recovers_label_direction() {
    let (obs, latent) = (8, 3);
    let w = Tensor::new(vec![obs, latent], normal_vec(&mut Streams::new(4).stream("w"), obs * latent)).unwrap();
    let data = synth_linear_gaussian(4000, &w, 0.1, 4).unwrap();
    let ppca = PpcaModel::new(w, 0.1).unwrap();
    let enc = Encoder::linear(&ppca.encoder_matrix().unwrap(), &[0.1; 3]).unwrap();
    let (y, k) = data.task("sign").unwrap();
    let cfg = ProbeConfig {
        steps: 3000,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
    };
    let probe = train_probe(&enc, &data.x, y, k, &cfg).unwrap();
    // logit difference between the classes is linear in the embedding
    let d: Vec<f64> = (0..latent).map(|i| probe.layer.w.row_slice(i)[1] - probe.layer.w.row_slice(i)[0]).collect();
    let cos = d[0] / d.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(cos > 0.99, "cosine {cos}, direction {d:?}");
}

#[test]
fn warm_started_epsilons_are_monotone_on_binary_tasks() {
    let m = random_model(5, 6, 3);
    let x = unit_box(5, 150, 6);
    let y = linear_labels(&m.enc, &x, 5);
    let tasks = [TaskLabels {
        name: "t",
        classes: 2,
        train: &y,
        test: &y,
    }];
    let attack = PgdConfig {
        restarts: 3,
        steps: 10,
        ..PgdConfig::evaluation(0.0)
    };
    let eps = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2];
    let r = robustness_report(&m.enc, &x, &x, &tasks, &eps, &attack, &fast_probe(), 5).unwrap();
    let accs: Vec<f64> = r.tasks[0].adversarial.iter().map(|&(_, a)| a).collect();
    assert_eq!(accs[0], r.tasks[0].nominal);
    for w in accs.windows(2) {
        assert!(w[1] <= w[0], "{accs:?}");
    }
    assert_eq!(r.epsilons(), eps);
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("task,eps=0,eps=0.01"));
}

#[test]
fn attack_results_do_not_depend_on_batching() {
    let m = random_model(6, 5, 2);
    let x = unit_box(6, 40, 5);
    let y = linear_labels(&m.enc, &x, 6);
    let probe = train_probe(&m.enc, &x, &y, 2, &fast_probe()).unwrap();
    let cfg = PgdConfig::evaluation(0.1);
    let full = adversarial_accuracy(&m.enc, &probe, &x, &y, &cfg, &Streams::new(6), None).unwrap();
    let again = adversarial_accuracy(&m.enc, &probe, &x, &y, &cfg, &Streams::new(6), None).unwrap();
    assert_eq!(full.robust, again.robust);
    assert_eq!(full.delta, again.delta);
}

#[test]
fn csv_fields_are_quoted_when_needed() {
    assert_eq!(csv_field("plain"), "plain");
    assert_eq!(csv_field("a,b"), "\"a,b\"");
    assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
}

#[test]
fn reconstruction_error_matches_two_pass_computation() {
    let m = random_model(7, 5, 2);
    let x = unit_box(7, 30, 5);
    let mu = encode_mean(&m.enc, &x).unwrap();
    let xh = m.dec.decode_tensor(&mu).unwrap();
    let mut per_row = vec![0.0; 30];
    for (i, r) in per_row.iter_mut().enumerate() {
        for (a, b) in x.row_slice(i).iter().zip(xh.row_slice(i)) {
            *r += (a - b) * (a - b);
        }
    }
    let oracle = per_row.iter().sum::<f64>() / 30.0;
    assert!((reconstruction_mse(&m, &x).unwrap() - oracle).abs() < 1e-12);

    let zero = ModelPair {
        enc: m.enc.clone(),
        dec: Decoder::linear(&Tensor::zeros(vec![5, 2]), 0.1).unwrap(),
    };
    let sq: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / 30.0;
    assert!((reconstruction_mse(&zero, &x).unwrap() - sq).abs() < 1e-12);
}

#[test]
fn exact_noiseless_ppca_chain_does_not_drift() {
    let w = Tensor::new(vec![6, 2], normal_vec(&mut Streams::new(8).stream("w"), 12)).unwrap();
    let p = PpcaModel::new(w.clone(), 0.0).unwrap();
    let m = ModelPair {
        enc: Encoder::linear(&p.encoder_matrix().unwrap(), &[0.01, 0.01]).unwrap(),
        dec: Decoder::linear(&w, 0.01).unwrap(),
    };
    let x0 = Tensor::new(vec![10, 6], normal_vec(&mut Streams::new(8).stream("x0"), 60)).unwrap();
    let d = chain_drift(&m, &x0, 10, DriftMode::Mean, &Streams::new(8)).unwrap();
    assert_eq!(d.shape(), &[11, 10]);
    assert!(d.data().iter().all(|&v| v.abs() < 1e-9));
    let mean = mean_drift(&d);
    assert_eq!(mean.len(), 11);
}

#[test]
fn sampled_drift_is_reproducible_and_positive() {
    let m = random_model(9, 4, 2);
    let x0 = unit_box(9, 5, 4);
    let a = chain_drift(&m, &x0, 5, DriftMode::Sample, &Streams::new(9)).unwrap();
    let b = chain_drift(&m, &x0, 5, DriftMode::Sample, &Streams::new(9)).unwrap();
    assert_eq!(a, b);
    assert!(a.row_slice(0).iter().all(|&v| v == 0.0));
    assert!(a.row_slice(5).iter().all(|&v| v > 0.0));
}

#[test]
fn bad_labels_are_rejected() {
    let m = random_model(10, 3, 2);
    let x = unit_box(10, 4, 3);
    assert!(train_probe(&m.enc, &x, &[0, 1, 2, 0], 2, &fast_probe()).is_err());
    assert!(train_probe(&m.enc, &x, &[0, 1], 2, &fast_probe()).is_err());
    assert!(train_probe(&m.enc, &x, &[0, 0, 0, 0], 1, &fast_probe()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn adversarial_never_exceeds_nominal(seed in 0u64..500, eps in 0.0..0.3f64) {
        let m = random_model(seed, 4, 2);
        let x = unit_box(seed, 30, 4);
        let y = linear_labels(&m.enc, &x, seed);
        let probe = train_probe(&m.enc, &x, &y, 2, &ProbeConfig { steps: 100, ..fast_probe() }).unwrap();
        let cfg = PgdConfig { steps: 5, restarts: 2, ..PgdConfig::evaluation(eps) };
        let o = adversarial_accuracy(&m.enc, &probe, &x, &y, &cfg, &Streams::new(seed), None).unwrap();
        prop_assert!(o.adversarial <= o.nominal);
        for (r, c) in o.robust.iter().zip(&o.correct) {
            prop_assert!(!r || *c);
        }
    }
}
