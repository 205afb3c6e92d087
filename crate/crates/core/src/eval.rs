//! Downstream evaluation of a trained encoder: linear probes on the mean
//! embedding, their accuracy under L-infinity PGD attacks, the drift of
//! repeated encode/decode chains, and reconstruction error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{w2_distance_diag, DiagGaussian};
use crate::nets::{Adam, AdamConfig, BoundEncoder, Encoder, Linear, ModelPair};
use crate::objectives::{pgd_maximize, PgdConfig, PgdEval, PgdStart};
use crate::rng::{normal_vec, Streams};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Softmax classifier `logits = h W + b` on the encoder mean `h = f_mu(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe<S> {
    /// `w` is `[latent, classes]`.
    pub layer: Linear<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "labels",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("label {bad} outside {classes} classes")));
    }
    Ok(())
}

fn one_hot<S: Scalar>(labels: &[usize], classes: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(vec![labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = S::one();
    }
    t
}

/// Per-row cross-entropy `[batch]` of logits against one-hot targets.
fn cross_entropy<'g, S: Scalar>(logits: Var<'g, S>, targets: Var<'g, S>) -> Result<Var<'g, S>> {
    let n = logits.shape()[0];
    logits.log_softmax().mul(targets)?.sum_axis(1)?.neg().reshape(&[n])
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> LinearProbe<S> {
    pub fn classes(&self) -> usize {
        self.layer.fan_out()
    }

    /// Logits for precomputed features `[n, latent]`.
    pub fn logits(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        let z = features.matmul(&self.layer.w)?;
        z.zip_map(&self.layer.b, "add", |a, b| a + b)
    }

    pub fn predict(&self, features: &Tensor<S>) -> Result<Vec<usize>> {
        let l = self.logits(features)?;
        Ok((0..l.rows()).map(|i| argmax(l.row_slice(i))).collect())
    }

    /// Class predictions for raw inputs through the encoder mean.
    pub fn classify(&self, enc: &Encoder<S>, x: &Tensor<S>) -> Result<Vec<usize>> {
        self.predict(&encode_mean(enc, x)?)
    }
}

/// `f_mu(x)` for a batch, outside any caller graph.
pub fn encode_mean<S: Scalar>(enc: &Encoder<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let g = Graph::new();
    let b = enc.bind(&g, false);
    Ok(b.encode_mean(g.constant(x))?.value())
}

/// Full-batch Adam on the mean cross-entropy of a zero-initialised probe.
///
/// The encoder is only read, so its parameters are untouched.
pub fn train_probe<S: Scalar>(enc: &Encoder<S>, x: &Tensor<S>, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe<S>> {
    check_labels(labels, x.rows(), classes)?;
    let features = encode_mean(enc, x)?;
    train_probe_on_features(&features, labels, classes, cfg)
}

pub fn train_probe_on_features<S: Scalar>(features: &Tensor<S>, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe<S>> {
    check_labels(labels, features.rows(), classes)?;
    if classes < 2 {
        return Err(Error::Config("a probe needs at least two classes".into()));
    }
    let mut layer = Linear::zeros(features.cols(), classes);
    let targets = one_hot::<S>(labels, classes);
    let names = ["probe.w".to_string(), "probe.b".to_string()];
    let mut opt = Adam::new(cfg.adam.clone(), [&layer.w, &layer.b]);
    for _ in 0..cfg.steps {
        let g = Graph::new();
        let w = g.param_named("probe.w", &layer.w);
        let b = g.param_named("probe.b", &layer.b);
        let logits = g.constant(features).matmul(w)?.add(b)?;
        let loss = cross_entropy(logits, g.constant(&targets))?.mean();
        let grads = g.backward(loss)?;
        let gs = [grads.wrt(w).clone(), grads.wrt(b).clone()];
        opt.update(&mut [&mut layer.w, &mut layer.b], &names, &gs)?;
    }
    Ok(LinearProbe { layer })
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Outcome of attacking one labelled set.
#[derive(Clone, Debug)]
pub struct AttackOutcome<S> {
    pub nominal: f64,
    pub adversarial: f64,
    /// Correct before the attack.
    pub correct: Vec<bool>,
    /// Correct before the attack and at every iterate of every restart.
    pub robust: Vec<bool>,
    /// Best perturbation per example, reusable as a warm start.
    pub delta: Tensor<S>,
}

fn composed_loss<'g, S: Scalar>(
    enc: &BoundEncoder<'g, S>,
    probe: &LinearProbe<S>,
    x: Var<'g, S>,
    targets: &Tensor<S>,
) -> Result<(Var<'g, S>, Var<'g, S>)> {
    let g = x.graph();
    let h = enc.encode_mean(x)?;
    let logits = h.matmul(g.constant(&probe.layer.w))?.add(g.constant(&probe.layer.b))?;
    let ce = cross_entropy(logits, g.constant(targets))?;
    Ok((ce, logits))
}

/// Fraction of examples the PGD attack on `probe ∘ f_mu` fails to flip.
///
/// Cross-entropy is maximised; an example counts as broken as soon as any
/// iterate is misclassified. Examples that are wrong to begin with count as
/// broken. Restart `r > 0` of example `i` draws its start from
/// `streams.substream("pgd-restart", ids[i] << 16 + r)`, where `ids` are the
/// row positions, so results do not depend on batching.
pub fn adversarial_accuracy<S: Scalar>(
    enc: &Encoder<S>,
    probe: &LinearProbe<S>,
    x: &Tensor<S>,
    labels: &[usize],
    cfg: &PgdConfig,
    streams: &Streams,
    warm: Option<&Tensor<S>>,
) -> Result<AttackOutcome<S>> {
    check_labels(labels, x.rows(), probe.classes())?;
    let pred = probe.classify(enc, x)?;
    let correct: Vec<bool> = pred.iter().zip(labels).map(|(p, l)| p == l).collect();
    let targets = one_hot::<S>(labels, probe.classes());
    let ids: Vec<u64> = (0..x.rows() as u64).collect();
    let start = PgdStart {
        warm,
        streams: Some((streams.clone(), &ids)),
    };
    let res = pgd_maximize(x, cfg, start, |xa, idx| {
        let g = Graph::new();
        let e = enc.bind(&g, false);
        let xin = g.input(xa);
        let (ce, logits) = composed_loss(&e, probe, xin, &targets.gather_rows(idx))?;
        let lv = logits.value();
        let success = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| argmax(lv.row_slice(r)) != labels[i])
            .collect();
        let value = ce.value().into_data();
        let grads = g.backward(ce.sum())?;
        Ok(PgdEval {
            value,
            grad: grads.wrt(xin).clone(),
            success: Some(success),
        })
    })?;
    let robust: Vec<bool> = correct.iter().zip(&res.success).map(|(&c, &s)| c && !s).collect();
    let frac = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / v.len().max(1) as f64;
    Ok(AttackOutcome {
        nominal: frac(&correct),
        adversarial: frac(&robust),
        correct,
        robust,
        delta: res.delta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRobustness {
    pub task: String,
    pub nominal: f64,
    /// `(epsilon, accuracy)` in the order attacked.
    pub adversarial: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub seed: u64,
    /// Attack settings; `epsilon` varies per column.
    pub attack: PgdConfig,
    pub tasks: Vec<TaskRobustness>,
}

impl RobustnessReport {
    pub fn epsilons(&self) -> Vec<f64> {
        self.tasks
            .first()
            .map(|t| t.adversarial.iter().map(|&(e, _)| e).collect())
            .unwrap_or_default()
    }

    /// One row per task, one column per epsilon.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for e in self.epsilons() {
            out.push_str(&format!(",eps={e}"));
        }
        out.push('\n');
        for t in &self.tasks {
            out.push_str(&csv_field(&t.task));
            for &(_, a) in &t.adversarial {
                out.push_str(&format!(",{a}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn task(&self, name: &str) -> Option<&TaskRobustness> {
        self.tasks.iter().find(|t| t.task == name)
    }
}

/// Quotes a CSV field when it needs it.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// A labelled task: name, class count, train labels, test labels.
pub struct TaskLabels<'a> {
    pub name: &'a str,
    pub classes: usize,
    pub train: &'a [usize],
    pub test: &'a [usize],
}

/// Trains one probe per task and attacks it at every epsilon.
///
/// Each epsilon's attack is warm-started from the previous epsilon's best
/// perturbation when the list is increasing.
pub fn robustness_report<S: Scalar>(
    enc: &Encoder<S>,
    x_train: &Tensor<S>,
    x_test: &Tensor<S>,
    tasks: &[TaskLabels<'_>],
    epsilons: &[f64],
    attack: &PgdConfig,
    probe_cfg: &ProbeConfig,
    seed: u64,
) -> Result<RobustnessReport> {
    let streams = Streams::new(seed);
    let train_feat = encode_mean(enc, x_train)?;
    let mut out = Vec::with_capacity(tasks.len());
    for t in tasks {
        let probe = train_probe_on_features(&train_feat, t.train, t.classes, probe_cfg)?;
        let mut adversarial = Vec::with_capacity(epsilons.len());
        let nominal = accuracy(&probe.classify(enc, x_test)?, t.test);
        let mut prev: Option<(f64, Tensor<S>)> = None;
        for &eps in epsilons {
            let cfg = PgdConfig {
                epsilon: eps,
                ..attack.clone()
            };
            let warm = prev.as_ref().filter(|(pe, _)| *pe <= eps).map(|(_, d)| d);
            let o = adversarial_accuracy(enc, &probe, x_test, t.test, &cfg, &streams, warm)?;
            adversarial.push((eps, o.adversarial));
            prev = Some((eps, o.delta));
        }
        out.push(TaskRobustness {
            task: t.name.to_string(),
            nominal,
            adversarial,
        });
    }
    Ok(RobustnessReport {
        seed,
        attack: attack.clone(),
        tasks: out,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// `z_t = f_mu(x_t)`; deterministic.
    #[default]
    Mean,
    /// `z_t ~ q(Z|x_t)` by reparameterisation.
    Sample,
}

/// Iterates `x_{t+1} = g(z_t)` from each row of `x0` and returns
/// `W2(q(Z|x_0), q(Z|x_t))` as a `[steps + 1, n]` tensor (row 0 is zero).
pub fn chain_drift<S: Scalar>(model: &ModelPair<S>, x0: &Tensor<S>, steps: usize, mode: DriftMode, streams: &Streams) -> Result<Tensor<S>> {
    let n = x0.rows();
    let (mu0, var0) = model.enc.encode_tensor(x0)?;
    let post = |mu: &Tensor<S>, var: &Tensor<S>, i: usize| DiagGaussian::new(mu.row_slice(i).to_vec(), var.row_slice(i).to_vec());
    let base: Vec<DiagGaussian<S>> = (0..n).map(|i| post(&mu0, &var0, i)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity((steps + 1) * n);
    out.extend(std::iter::repeat_n(S::zero(), n));
    let (mut mu, mut var) = (mu0.clone(), var0.clone());
    for t in 0..steps {
        let z = match mode {
            DriftMode::Mean => mu.clone(),
            DriftMode::Sample => {
                let eps = normal_vec::<S, _>(&mut streams.substream("drift", t as u64), mu.len());
                let mut z = mu.clone();
                for ((zi, &vi), &e) in z.data_mut().iter_mut().zip(var.data()).zip(&eps) {
                    *zi += vi.sqrt() * e;
                }
                z
            }
        };
        let x = model.dec.decode_tensor(&z)?;
        (mu, var) = model.enc.encode_tensor(&x)?;
        for (i, b) in base.iter().enumerate() {
            out.push(w2_distance_diag(b, &post(&mu, &var, i)?)?);
        }
    }
    Tensor::new(vec![steps + 1, n], out)
}

/// Mean over rows of each step of a [`chain_drift`] result.
pub fn mean_drift<S: Scalar>(drift: &Tensor<S>) -> Vec<f64> {
    let n = drift.cols().max(1);
    (0..drift.rows())
        .map(|t| drift.row_slice(t).iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n as f64)
        .collect()
}

/// Mean over examples of `||x - g(f_mu(x))||^2`, summed over coordinates.
pub fn reconstruction_mse<S: Scalar>(model: &ModelPair<S>, x: &Tensor<S>) -> Result<S> {
    let mu = encode_mean(&model.enc, x)?;
    let xh = model.dec.decode_tensor(&mu)?;
    let sq = x.zip_map(&xh, "mse", |a, b| (a - b) * (a - b))?;
    Ok(sq.sum() / S::c(x.rows().max(1) as f64))
}
