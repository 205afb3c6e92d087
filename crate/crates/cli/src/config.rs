//! Experiment configuration and its two textual forms: sectioned
//! `key = value` files and JSON.

use std::path::{Path, PathBuf};

use avae_core::eval::DriftMode;
use avae_core::nets::AdamConfig;
use avae_core::objectives::{Likelihood, ObjectiveConfig, ObjectiveKind, PgdConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub overwrite: bool,
    pub model: ModelConfig,
    pub objective: ObjectiveSection,
    pub train: TrainSection,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub discrete: DiscreteConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            overwrite: false,
            model: ModelConfig::default(),
            objective: ObjectiveSection::default(),
            train: TrainSection::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            discrete: DiscreteConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub latent: usize,
    /// Decoder observation variance `v`.
    pub obs_var: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            latent: 8,
            obs_var: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub kind: ObjectiveKind,
    pub rho: f64,
    pub rho_se: f64,
    /// Training attack radius; required by `se` and `se_avae`.
    pub eps_train: Option<f64>,
    pub attack_steps: usize,
    pub attack_restarts: usize,
    pub mc_samples: usize,
    pub noisy_delusions: bool,
    pub se_weight: f64,
    /// `None` keeps the normalised Gaussian likelihood; `Some(v)` uses the
    /// squared-error form scaled by `1 / 2v`.
    pub mse_v_eval: Option<f64>,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        let o = ObjectiveConfig::new(ObjectiveKind::Vae);
        let a = PgdConfig::training(0.0);
        Self {
            kind: o.kind,
            rho: o.rho,
            rho_se: o.rho_se,
            eps_train: None,
            attack_steps: a.steps,
            attack_restarts: a.restarts,
            mc_samples: o.mc_samples,
            noisy_delusions: o.noisy_delusions,
            se_weight: o.se_weight,
            mse_v_eval: None,
        }
    }
}

impl ObjectiveSection {
    pub fn to_objective(&self) -> ObjectiveConfig {
        let mut o = ObjectiveConfig::new(self.kind);
        o.rho = self.rho;
        o.rho_se = self.rho_se;
        o.mc_samples = self.mc_samples;
        o.noisy_delusions = self.noisy_delusions;
        o.se_weight = self.se_weight;
        if let Some(v_eval) = self.mse_v_eval {
            o.likelihood = Likelihood::Mse { v_eval };
        }
        if self.kind.needs_attack() {
            if let Some(eps) = self.eps_train {
                let mut a = PgdConfig::training(eps);
                a.steps = self.attack_steps;
                a.restarts = self.attack_restarts;
                o.attack = Some(a);
            }
        }
        o
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Checkpoint to start from; required by `avae_ss`.
    pub pretrained: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            adam: AdamConfig::default(),
            pretrained: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Grayscale digits from an IDX pair.
    Mnist,
    /// Digits colourised with a palette, adding the `color` task.
    ColorMnist,
    /// Linear-Gaussian samples with a `sign` task.
    Synth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub images: PathBuf,
    pub labels: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub palette_size: usize,
    pub synth_obs_dim: usize,
    pub synth_latent_dim: usize,
    pub synth_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
        Self {
            source: DataSource::ColorMnist,
            images: root.join("mnist5k-images-idx3-ubyte.gz"),
            labels: root.join("mnist5k-labels-idx1-ubyte.gz"),
            n_train: 4000,
            n_test: 1000,
            palette_size: 7,
            synth_obs_dim: 16,
            synth_latent_dim: 2,
            synth_noise: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub epsilons: Vec<f64>,
    pub attack_steps: usize,
    pub attack_restarts: usize,
    /// PGD step size as a fraction of epsilon.
    pub step_ratio: f64,
    pub probe_steps: usize,
    pub probe_adam: AdamConfig,
    /// Tasks to probe; empty means every task of the dataset.
    pub tasks: Vec<String>,
    pub drift_steps: usize,
    pub drift_points: usize,
    pub drift_mode: DriftMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let a = PgdConfig::evaluation(0.1);
        let p = avae_core::eval::ProbeConfig::default();
        Self {
            epsilons: vec![0.0, 0.05, 0.1],
            attack_steps: a.steps,
            attack_restarts: a.restarts,
            step_ratio: a.step_size / a.epsilon,
            probe_steps: p.steps,
            probe_adam: p.adam,
            tasks: vec![],
            drift_steps: 50,
            drift_points: 200,
            drift_mode: DriftMode::Mean,
        }
    }
}

impl EvalConfig {
    pub fn attack(&self, eps: f64) -> PgdConfig {
        PgdConfig {
            epsilon: eps,
            steps: self.attack_steps,
            step_size: eps * self.step_ratio,
            restarts: self.attack_restarts,
            clip: Some((0.0, 1.0)),
        }
    }

    pub fn probe(&self) -> avae_core::eval::ProbeConfig {
        avae_core::eval::ProbeConfig {
            steps: self.probe_steps,
            adam: self.probe_adam.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscreteConfig {
    pub grid: usize,
    pub dec_spread: f64,
    pub init_sigma: f64,
    pub nu_rho: f64,
    pub steps: usize,
    pub adam: AdamConfig,
    /// Centres of the bumps of the data histogram (radians).
    pub bumps: Vec<f64>,
    pub bump_spread: f64,
}

impl Default for DiscreteConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            dec_spread: 0.1,
            init_sigma: 0.3,
            nu_rho: 1e-3,
            steps: 10_000,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            bumps: vec![std::f64::consts::FRAC_PI_2, 3.0 * std::f64::consts::FRAC_PI_2],
            bump_spread: 0.3,
        }
    }
}

impl ExperimentConfig {
    /// Cross-field checks that must pass before any computation starts.
    pub fn validate_for_training(&self) -> Result<(), CliError> {
        let k = self.objective.kind;
        if k.needs_attack() && self.objective.eps_train.is_none() {
            return Err(CliError::Config(format!("objective {} needs objective.eps_train", k.name())));
        }
        if !k.needs_attack() && self.objective.eps_train.is_some() {
            return Err(CliError::Config(format!("objective {} takes no objective.eps_train", k.name())));
        }
        if k == ObjectiveKind::AvaeSs && self.train.pretrained.is_none() {
            return Err(CliError::Config("avae_ss needs train.pretrained (a checkpoint path)".into()));
        }
        if self.model.latent == 0 || !(self.model.obs_var > 0.0) {
            return Err(CliError::Config("model.latent must be positive and model.obs_var > 0".into()));
        }
        if self.train.batch_size == 0 {
            return Err(CliError::Config("train.batch_size must be positive".into()));
        }
        self.objective.to_objective().validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Parses JSON (text starting with `{`) or the sectioned key=value form.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config JSON: {e}")))?
        } else {
            parse_key_values(text)?
        };
        from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `a.b.c=value` overrides on top of this config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(self).expect("config serialises");
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            insert_path(&mut value, k.trim(), parse_scalar(v.trim()))?;
        }
        from_value(value)
    }
}

fn from_value(value: Value) -> Result<ExperimentConfig, CliError> {
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("config: {e}")))
}

/// A value is JSON when it parses as JSON, otherwise a bare string.
fn parse_scalar(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

fn insert_path(root: &mut Value, dotted: &str, v: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        if p.is_empty() {
            return Err(CliError::Config(format!("empty key segment in `{dotted}`")));
        }
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Map::new());
            } else {
                return Err(CliError::Config(format!("`{dotted}`: `{p}` is inside a non-table value")));
            }
        }
        let map = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert((*p).to_string(), v);
            return Ok(());
        }
        cur = map.entry((*p).to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// `[section]` headers, `key = value` lines, `#` comment lines.
pub fn parse_key_values(text: &str) -> Result<Value, CliError> {
    let mut root = Value::Object(Map::new());
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| CliError::Config(format!("line {}: unterminated section header", n + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{section}.{}", k.trim())
        };
        insert_path(&mut root, &key, parse_scalar(v.trim()))
            .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
    }
    Ok(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_sections() {
        let c = ExperimentConfig::parse(
            "seed = 7\n# comment\n[objective]\nkind = avae-ss\nrho = 0.9\n[train]\npretrained = a/b.avae\nadam.lr = 0.001\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.objective.kind, ObjectiveKind::AvaeSs);
        assert_eq!(c.objective.rho, 0.9);
        assert_eq!(c.train.pretrained.as_deref(), Some(Path::new("a/b.avae")));
        assert_eq!(c.train.adam.lr, 0.001);
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_json()).unwrap(), c);
        assert!(ExperimentConfig::parse("[model]\nlatnet = 3\n").is_err());
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::default()
            .with_overrides(&["eval.epsilons=[0.0]".into(), "objective.kind=se".into()])
            .unwrap();
        assert_eq!(c.eval.epsilons, vec![0.0]);
        assert!(c.validate_for_training().is_err());
    }
}
