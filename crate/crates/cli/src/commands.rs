//! The runner's subcommands as library functions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use avae_core::data::{colorize, load_idx, synth_linear_gaussian, Dataset, DEFAULT_PALETTE};
use avae_core::discrete_vm::{
    bump_mixture, diag_mass, AvaeTerms, exact_avae_loss, exact_vae_loss, row_stochastic_error, train_tabular, transition_heatmaps, TabularModel,
    TabularObjective, TabularTrainConfig, VmGrid,
};
use avae_core::eval::{chain_drift, mean_drift, reconstruction_mse, robustness_report, RobustnessReport, TaskLabels};
use avae_core::nets::{Adam, Arch, ModelPair};
use avae_core::objectives::{train, ObjectiveKind, StepMetrics, TrainConfig, TrainProgress};
use avae_core::ppca::{identity_residuals, perturbed_drift, IdentityResiduals, PpcaModel};
use avae_core::rng::{normal_vec, Streams};
use avae_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, DataSource, DiscreteConfig, ExperimentConfig};
use crate::output::{matrix_csv, pgm, OutDir};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.avae";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Train and test splits for a data section; a pure function of `(cfg, seed)`.
pub fn build_dataset(cfg: &DataConfig, seed: u64) -> Result<(Dataset<f64>, Dataset<f64>), CliError> {
    let full = match cfg.source {
        DataSource::Mnist => load_idx(&cfg.images, &cfg.labels)?,
        DataSource::ColorMnist => {
            if cfg.palette_size > DEFAULT_PALETTE.len() {
                return Err(CliError::Config(format!(
                    "data.palette_size {} exceeds the {} built-in colours",
                    cfg.palette_size,
                    DEFAULT_PALETTE.len()
                )));
            }
            let gray = load_idx(&cfg.images, &cfg.labels)?;
            colorize(&gray, &DEFAULT_PALETTE[..cfg.palette_size], seed)?
        }
        DataSource::Synth => {
            let (d, k) = (cfg.synth_obs_dim, cfg.synth_latent_dim);
            let scale = 1.0 / (k.max(1) as f64).sqrt();
            let w: Vec<f64> = normal_vec::<f64, _>(&mut Streams::new(seed).stream("synth-w"), d * k)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            synth_linear_gaussian(cfg.n_train + cfg.n_test, &Tensor::new(vec![d, k], w)?, cfg.synth_noise, seed)?
        }
    };
    Ok(full.split(cfg.n_train, cfg.n_test, seed)?)
}

fn metrics_csv(log: &[StepMetrics]) -> String {
    let mut s = String::from(StepMetrics::CSV_HEADER);
    s.push('\n');
    for m in log {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
    pub dir: PathBuf,
}

/// Trains the configured objective and writes checkpoint, metrics and config.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome, CliError> {
    cfg.validate_for_training()?;
    let out = OutDir::new(&cfg.output_dir, cfg.overwrite)?;
    out.preflight(&[CHECKPOINT_FILE, METRICS_FILE, CONFIG_FILE])?;
    let streams = Streams::new(cfg.seed);
    let mut objective = cfg.objective.to_objective();
    if cfg.data.source == DataSource::Synth {
        if let Some(a) = objective.attack.as_mut() {
            a.clip = None;
        }
    }

    let (mut model, arch, data) = if cfg.objective.kind == ObjectiveKind::AvaeSs {
        let path = cfg.train.pretrained.as_ref().expect("validated");
        let pre = Checkpoint::load(path)?;
        let data = Tensor::zeros(vec![0, pre.arch.input]);
        (pre.model, pre.arch, data)
    } else {
        let (train_set, _) = build_dataset(&cfg.data, cfg.seed)?;
        let arch = Arch {
            input: train_set.dim(),
            hidden: cfg.model.hidden.clone(),
            latent: cfg.model.latent,
        };
        let model = ModelPair::init(&arch, cfg.model.obs_var, &mut streams.stream("init"));
        (model, arch, train_set.x)
    };
    let mut opt = Adam::new(cfg.train.adam.clone(), model.params().into_iter().map(|(_, t)| t));
    let tcfg = TrainConfig {
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        record_wallclock: false,
    };
    let mut progress = TrainProgress::default();
    let metrics = train(&mut model, &data, &objective, &tcfg, &mut opt, &streams, &mut progress)?;
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        arch,
        model,
        optimizer: Some(opt),
        progress,
    };
    out.write(METRICS_FILE, metrics_csv(&metrics))?;
    out.write(CHECKPOINT_FILE, checkpoint.to_bytes())?;
    out.write(CONFIG_FILE, cfg.to_json())?;
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        dir: out.root().to_path_buf(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: PathBuf,
    pub report: RobustnessReport,
    pub reconstruction_mse: f64,
    /// Mean W2 drift per chain step over the drift points.
    pub drift: Vec<f64>,
    pub config: ExperimentConfig,
}

/// Probes, attacks, drift and reconstruction error for one checkpoint.
///
/// The data split is rebuilt from the checkpoint's own config; the
/// evaluation settings come from `cfg`.
pub fn evaluate(checkpoint: &Path, cfg: &ExperimentConfig, out: &OutDir) -> Result<EvalSummary, CliError> {
    out.preflight(&["robustness.json", "robustness.csv", "drift.csv", "summary.json"])?;
    let ck = Checkpoint::load(checkpoint)?;
    let (train_set, test_set) = build_dataset(&ck.config.data, ck.config.seed)?;
    let names: Vec<String> = if cfg.eval.tasks.is_empty() {
        train_set.labels.keys().cloned().collect()
    } else {
        cfg.eval.tasks.clone()
    };
    let mut tasks = Vec::with_capacity(names.len());
    for n in &names {
        let (tr, k) = train_set.task(n)?;
        let (te, _) = test_set.task(n)?;
        tasks.push(TaskLabels {
            name: n,
            classes: k,
            train: tr,
            test: te,
        });
    }
    let mut attack = cfg.eval.attack(0.0);
    if ck.config.data.source == DataSource::Synth {
        attack.clip = None;
    }
    let report = robustness_report(
        &ck.model.enc,
        &train_set.x,
        &test_set.x,
        &tasks,
        &cfg.eval.epsilons,
        &attack,
        &cfg.eval.probe(),
        cfg.seed,
    )?;
    let mse = reconstruction_mse(&ck.model, &test_set.x)?;
    let npts = cfg.eval.drift_points.min(test_set.len());
    let idx: Vec<usize> = (0..npts).collect();
    let drift = mean_drift(&chain_drift(
        &ck.model,
        &test_set.x.gather_rows(&idx),
        cfg.eval.drift_steps,
        cfg.eval.drift_mode,
        &Streams::new(cfg.seed),
    )?);
    let summary = EvalSummary {
        checkpoint: checkpoint.to_path_buf(),
        report,
        reconstruction_mse: mse,
        drift,
        config: cfg.clone(),
    };
    let mut drift_csv = String::from("step,mean_w2\n");
    for (t, d) in summary.drift.iter().enumerate() {
        drift_csv.push_str(&format!("{t},{d:e}\n"));
    }
    out.write("robustness.json", to_json(&json!({"report": summary.report, "config": cfg}))?)?;
    out.write("robustness.csv", summary.report.to_csv())?;
    out.write("drift.csv", drift_csv)?;
    out.write("summary.json", to_json(&summary)?)?;
    Ok(summary)
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Config(format!("serialising output: {e}")))
}

pub fn run_eval(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<EvalSummary, CliError> {
    let out = OutDir::new(&cfg.output_dir, cfg.overwrite)?;
    evaluate(checkpoint, cfg, &out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task: String,
    pub nominal_delta: f64,
    /// `(epsilon, candidate - baseline)`.
    pub adversarial_delta: Vec<(f64, f64)>,
}

/// Evaluates two checkpoints under `baseline/` and `candidate/` and writes
/// `comparison.json` with per-task accuracy differences.
pub fn run_compare(baseline: &Path, candidate: &Path, cfg: &ExperimentConfig) -> Result<Vec<TaskDelta>, CliError> {
    let out = OutDir::new(&cfg.output_dir, cfg.overwrite)?;
    out.preflight(&["comparison.json"])?;
    let a = evaluate(baseline, cfg, &out.subdir("baseline")?)?;
    let b = evaluate(candidate, cfg, &out.subdir("candidate")?)?;
    let mut deltas = Vec::new();
    for ta in &a.report.tasks {
        let Some(tb) = b.report.task(&ta.task) else { continue };
        deltas.push(TaskDelta {
            task: ta.task.clone(),
            nominal_delta: tb.nominal - ta.nominal,
            adversarial_delta: ta
                .adversarial
                .iter()
                .zip(&tb.adversarial)
                .map(|(&(e, x), &(_, y))| (e, y - x))
                .collect(),
        });
    }
    let doc = json!({
        "baseline": baseline,
        "candidate": candidate,
        "tasks": deltas,
        "mse_delta": b.reconstruction_mse - a.reconstruction_mse,
        "final_drift_delta": b.drift.last().copied().unwrap_or(0.0) - a.drift.last().copied().unwrap_or(0.0),
        "config": cfg,
    });
    out.write("comparison.json", to_json(&doc)?)?;
    Ok(deltas)
}

// ---- discrete demo ----------------------------------------------------------

pub const PANELS: [&str; 4] = ["decoder", "x_joint", "encoder", "z_joint"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscreteStats {
    pub diag_mass_vae: f64,
    pub diag_mass_avae: f64,
    pub vae_kl_vae: f64,
    pub vae_kl_avae: f64,
    pub final_loss_vae: f64,
    pub final_loss_avae: f64,
    pub max_row_error: f64,
    /// Exact AVAE terms of the AVAE-trained model.
    pub avae_terms: Option<AvaeTerms>,
    pub seed: u64,
    pub config: DiscreteConfig,
}

/// Trains one tabular model; the initial parameters depend only on the seed.
pub fn train_discrete(cfg: &DiscreteConfig, seed: u64, objective: TabularObjective) -> Result<(TabularModel<f64>, Vec<f64>, Vec<f64>), CliError> {
    let grid = VmGrid::new(cfg.grid)?;
    let hist = bump_mixture(grid, &cfg.bumps, cfg.bump_spread)?;
    let mut m = TabularModel::init(
        grid,
        grid,
        cfg.dec_spread,
        cfg.init_sigma,
        cfg.nu_rho,
        &mut Streams::new(seed).stream("tabular-init"),
    );
    if objective == TabularObjective::Avae {
        // fail on the enumeration budget before training
        exact_avae_loss(&m, &hist)?;
    }
    let tcfg = TabularTrainConfig {
        steps: cfg.steps,
        adam: cfg.adam.clone(),
    };
    let hist_out = train_tabular(&mut m, &hist, objective, &tcfg)?;
    Ok((m, hist, hist_out))
}

pub fn run_discrete_demo(cfg: &ExperimentConfig) -> Result<DiscreteStats, CliError> {
    let out = OutDir::new(&cfg.output_dir, cfg.overwrite)?;
    let mut names = vec!["discrete_stats.json".to_string()];
    for model in ["vae", "avae"] {
        for p in PANELS {
            names.push(format!("{model}_{p}.csv"));
            names.push(format!("{model}_{p}.pgm"));
        }
    }
    out.preflight(&names.iter().map(String::as_str).collect::<Vec<_>>())?;
    let d = &cfg.discrete;
    VmGrid::new(d.grid)?;
    let mut dm = BTreeMap::new();
    let mut kl = BTreeMap::new();
    let mut last = BTreeMap::new();
    let mut row_err = 0.0f64;
    let mut avae_terms = None;
    for (label, obj) in [("vae", TabularObjective::Vae), ("avae", TabularObjective::Avae)] {
        let (m, hist, losses) = train_discrete(d, cfg.seed, obj)?;
        let h = transition_heatmaps(&m)?;
        row_err = row_err.max(row_stochastic_error(&h.decoder)).max(row_stochastic_error(&h.encoder));
        for (p, t) in PANELS.iter().zip([&h.decoder, &h.x_joint, &h.encoder, &h.z_joint]) {
            out.write(&format!("{label}_{p}.csv"), matrix_csv(t))?;
            out.write(&format!("{label}_{p}.pgm"), pgm(t))?;
        }
        dm.insert(label, diag_mass(&h.z_joint));
        kl.insert(label, exact_vae_loss(&m, &hist)?);
        if obj == TabularObjective::Avae {
            avae_terms = Some(exact_avae_loss(&m, &hist)?);
        }
        last.insert(label, losses.last().copied().unwrap_or(f64::NAN));
    }
    let stats = DiscreteStats {
        diag_mass_vae: dm["vae"],
        diag_mass_avae: dm["avae"],
        vae_kl_vae: kl["vae"],
        vae_kl_avae: kl["avae"],
        final_loss_vae: last["vae"],
        final_loss_avae: last["avae"],
        max_row_error: row_err,
        avae_terms,
        seed: cfg.seed,
        config: d.clone(),
    };
    out.write("discrete_stats.json", to_json(&stats)?)?;
    Ok(stats)
}

// ---- pPCA -----------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PpcaSeedReport {
    pub seed: u64,
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub v: f64,
    pub residuals: IdentityResiduals,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DriftDemo {
    /// Spectral scale of the encoder perturbation.
    pub delta_scale: f64,
    pub distance: Vec<f64>,
    pub orthogonal: Vec<f64>,
    pub grows: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PpcaReport {
    pub tolerance: f64,
    pub seeds: Vec<PpcaSeedReport>,
    pub max_residual: f64,
    pub drift_demo: DriftDemo,
    pub pass: bool,
}

pub const PPCA_TOLERANCE: f64 = 1e-8;

fn random_loading(seed: u64, obs: usize, latent: usize) -> Tensor {
    Tensor::new(vec![obs, latent], normal_vec(&mut Streams::new(seed).stream("ppca-w"), obs * latent)).expect("shape")
}

/// Perturbed mean map of a random loading with `delta = scale * (random)`;
/// returns the distances from where the exact chain settles.
pub fn ppca_drift_demo(seed: u64, scale: f64, steps: usize) -> Result<DriftDemo, CliError> {
    let (obs, latent) = (8, 3);
    let m = PpcaModel::new(random_loading(seed, obs, latent), 0.0)?;
    let s = Streams::new(seed);
    let delta = Tensor::new(vec![latent, obs], normal_vec::<f64, _>(&mut s.stream("ppca-delta"), latent * obs))?.map(|v| v * scale);
    let x0 = normal_vec::<f64, _>(&mut s.stream("ppca-x0"), obs);
    let t = perturbed_drift(&m, &delta, &x0, steps)?;
    let grows = t.drift.windows(2).skip(1).all(|w| w[1] >= w[0]) && t.drift[steps] > t.drift[1];
    Ok(DriftDemo {
        delta_scale: scale,
        distance: t.drift,
        orthogonal: t.orthogonal,
        grows,
    })
}

pub fn ppca_checks(seeds: u64) -> Result<PpcaReport, CliError> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        let (obs, latent) = (6 + (seed as usize % 5), 1 + (seed as usize % 3));
        let w = random_loading(seed, obs, latent);
        let v = 0.05 + 0.1 * (seed % 7) as f64;
        let probe = normal_vec::<f64, _>(&mut Streams::new(seed).stream("ppca-probe"), obs);
        let residuals = identity_residuals(&w, v, &probe)?;
        out.push(PpcaSeedReport {
            seed,
            obs_dim: obs,
            latent_dim: latent,
            v,
            residuals,
        });
    }
    let max_residual = out.iter().map(|r| r.residuals.max()).fold(0.0, f64::max);
    let drift_demo = ppca_drift_demo(0, 1.0, 20)?;
    Ok(PpcaReport {
        tolerance: PPCA_TOLERANCE,
        pass: max_residual < PPCA_TOLERANCE && drift_demo.grows,
        seeds: out,
        max_residual,
        drift_demo,
    })
}

pub fn run_ppca_checks(cfg: &ExperimentConfig, seeds: u64) -> Result<PpcaReport, CliError> {
    let out = OutDir::new(&cfg.output_dir, cfg.overwrite)?;
    out.preflight(&["ppca_checks.json"])?;
    let r = ppca_checks(seeds)?;
    out.write("ppca_checks.json", to_json(&r)?)?;
    Ok(r)
}

/// Chain drift of a checkpoint, or the perturbed pPCA mean map without one.
pub fn run_drift(cfg: &ExperimentConfig, checkpoint: Option<&Path>, delta_scale: f64, steps: usize) -> Result<PathBuf, CliError> {
    let out = OutDir::new(&cfg.output_dir, cfg.overwrite)?;
    match checkpoint {
        Some(p) => {
            out.preflight(&["drift.csv"])?;
            let ck = Checkpoint::load(p)?;
            let (_, test_set) = build_dataset(&ck.config.data, ck.config.seed)?;
            let idx: Vec<usize> = (0..cfg.eval.drift_points.min(test_set.len())).collect();
            let d = mean_drift(&chain_drift(
                &ck.model,
                &test_set.x.gather_rows(&idx),
                steps,
                cfg.eval.drift_mode,
                &Streams::new(cfg.seed),
            )?);
            let mut s = String::from("step,distance\n");
            for (t, v) in d.iter().enumerate() {
                s.push_str(&format!("{t},{v:e}\n"));
            }
            out.write("drift.csv", s)
        }
        None => {
            out.preflight(&["ppca_drift.csv"])?;
            let demo = ppca_drift_demo(cfg.seed, delta_scale, steps)?;
            let mut s = String::from("step,distance,orthogonal\n");
            for (t, (d, o)) in demo.distance.iter().zip(&demo.orthogonal).enumerate() {
                s.push_str(&format!("{t},{d:e},{o:e}\n"));
            }
            out.write("ppca_drift.csv", s)
        }
    }
}
