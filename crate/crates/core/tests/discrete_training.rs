//! Densities on the circle and training of the tabular model.

use avae_core::discrete_vm::*;
use avae_core::nets::AdamConfig;
use avae_core::rng::Streams;
use proptest::prelude::*;

fn setup(n: usize, seed: u64) -> (TabularModel<f64>, Vec<f64>) {
    let grid = VmGrid::new(n).unwrap();
    let m = TabularModel::init(grid, grid, 0.1, 0.3, 1e-3, &mut Streams::new(seed).stream("tab"));
    let hist = bump_mixture(grid, &[1.6, 4.7], 0.3).unwrap();
    (m, hist)
}

fn cfg(steps: usize) -> TabularTrainConfig {
    TabularTrainConfig {
        steps,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
    }
}

#[test]
fn density_concentrates_and_flattens() {
    let grid = VmGrid::new(16).unwrap();
    let pts: Vec<f64> = grid.points();
    let sharp: Vec<f64> = vm_density(grid, pts[5], 0.01).unwrap();
    assert!(sharp[5] > 0.99);
    let flat: Vec<f64> = vm_density(grid, 1.0, 1e6).unwrap();
    assert!(flat.iter().all(|p| (p - 1.0 / 16.0).abs() < 1e-6));
    assert!(vm_density(grid, 0.0, 0.0).is_err());
    assert!(VmGrid::new(1).is_err());
}

#[test]
fn vae_training_shrinks_the_gap() {
    let (mut m, hist) = setup(16, 1);
    let before = exact_vae_loss(&m, &hist).unwrap();
    let losses = train_tabular(&mut m, &hist, TabularObjective::Vae, &cfg(3000)).unwrap();
    let after = exact_vae_loss(&m, &hist).unwrap();
    assert_eq!(losses[0], before);
    assert!(after >= 0.0);
    assert!(after < before / 10.0, "{before} -> {after}");
}

#[test]
fn avae_training_lowers_its_loss_and_is_reproducible() {
    let (mut a, hist) = setup(12, 2);
    let mut b = a.clone();
    let la = train_tabular(&mut a, &hist, TabularObjective::Avae, &cfg(400)).unwrap();
    let lb = train_tabular(&mut b, &hist, TabularObjective::Avae, &cfg(400)).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a, b);
    let last = exact_avae_loss(&a, &hist).unwrap().total;
    assert!(last < la[0]);
}

#[test]
fn tables_stay_stochastic_after_training() {
    let (mut m, hist) = setup(12, 3);
    train_tabular(&mut m, &hist, TabularObjective::Avae, &cfg(200)).unwrap();
    let h = transition_heatmaps(&m).unwrap();
    for t in [&h.decoder, &h.encoder, &h.x_joint, &h.z_joint] {
        assert!(t.data().iter().all(|&p| p >= 0.0));
    }
    assert!(row_stochastic_error(&h.decoder) < 1e-12);
    assert!(row_stochastic_error(&h.encoder) < 1e-12);
    assert!(row_stochastic_error(&m.coupling_table()) < 1e-12);
    let total: f64 = h.z_joint.data().iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn oversized_grid_is_refused_before_work() {
    let (m, _) = setup(65, 4);
    let hist = vec![1.0 / 65.0; 65];
    assert!(exact_avae_loss(&m, &hist).is_err());
    assert!(exact_vae_loss(&m, &hist).is_ok());
    assert!(exact_vae_loss(&m, &hist[..64]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_is_normalised_von_mises(n in 2usize..40, mu in -10.0..10.0f64, v in 0.05..20.0f64) {
        let grid = VmGrid::new(n).unwrap();
        let p = vm_density(grid, mu, v).unwrap();
        let raw: Vec<f64> = grid.points::<f64>().iter().map(|&x| ((x - mu).cos() / v).exp()).collect();
        let z: f64 = raw.iter().sum();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&raw) {
            prop_assert!((a - b / z).abs() < 1e-12);
        }
    }
}
