//! MLP encoder/decoder networks and the Adam optimizer.
//!
//! Networks own plain tensors. To differentiate, a network is *bound* to a
//! [`Graph`], either trainable (parameters become gradient leaves) or frozen
//! (parameters become constants).

use rand::RngCore;

use crate::error::{Error, Result};
use crate::rng::uniform_vec;
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Floor added to the softplus variance head.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    /// `[fan_in, fan_out]`
    pub w: Tensor<S>,
    /// `[1, fan_out]`
    pub b: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    /// Uniform fan-in initialization with limit `sqrt(1 / fan_in)`.
    pub fn init<R: RngCore>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let lim = (1.0 / fan_in.max(1) as f64).sqrt();
        Self {
            w: Tensor::new(vec![fan_in, fan_out], uniform_vec(rng, fan_in * fan_out, -lim, lim)).expect("shape"),
            b: Tensor::new(vec![1, fan_out], uniform_vec(rng, fan_out, -lim, lim)).expect("shape"),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(vec![fan_in, fan_out]),
            b: Tensor::zeros(vec![1, fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear<'g, S> {
    pub w: Var<'g, S>,
    pub b: Var<'g, S>,
}

impl<'g, S: Scalar> BoundLinear<'g, S> {
    pub fn forward(&self, x: Var<'g, S>) -> Result<Var<'g, S>> {
        x.matmul(self.w)?.add(self.b)
    }
}

fn bind_linear<'g, S: Scalar>(g: &'g Graph<S>, l: &Linear<S>, name: &str, trainable: bool) -> BoundLinear<'g, S> {
    if trainable {
        BoundLinear {
            w: g.param_named(&format!("{name}.w"), &l.w),
            b: g.param_named(&format!("{name}.b"), &l.b),
        }
    } else {
        BoundLinear {
            w: g.constant(&l.w),
            b: g.constant(&l.b),
        }
    }
}

fn init_trunk<S: Scalar, R: RngCore>(input: usize, hidden: &[usize], rng: &mut R) -> Vec<Linear<S>> {
    let mut layers = Vec::with_capacity(hidden.len());
    let mut prev = input;
    for &h in hidden {
        layers.push(Linear::init(prev, h, rng));
        prev = h;
    }
    layers
}

fn trunk_forward<'g, S: Scalar>(trunk: &[BoundLinear<'g, S>], x: Var<'g, S>) -> Result<Var<'g, S>> {
    let mut h = x;
    for l in trunk {
        h = l.forward(h)?.tanh();
    }
    Ok(h)
}

fn check_input<S: Scalar>(x: &Var<'_, S>, expected: usize, op: &'static str) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 || s[1] != expected {
        return Err(Error::Dimension {
            op,
            lhs: vec![expected],
            rhs: s,
        });
    }
    Ok(())
}

/// `q(Z|x) = N(f_mu(x), diag(f_var(x)))` with a tanh MLP trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<S> {
    pub trunk: Vec<Linear<S>>,
    pub head_mu: Linear<S>,
    /// Pre-activation of the variance; variance = softplus(.) + floor.
    pub head_var: Linear<S>,
}

impl<S: Scalar> Encoder<S> {
    pub fn init<R: RngCore>(input: usize, hidden: &[usize], latent: usize, rng: &mut R) -> Self {
        let trunk = init_trunk(input, hidden, rng);
        let last = hidden.last().copied().unwrap_or(input);
        Self {
            trunk,
            head_mu: Linear::init(last, latent, rng),
            head_var: Linear::init(last, latent, rng),
        }
    }

    /// Linear mean map `f_mu(x) = A x` (`a` is `[latent, obs]`) with a fixed
    /// per-dimension variance.
    pub fn linear(a: &Tensor<S>, var: &[S]) -> Result<Self> {
        let at = a.transpose()?;
        let (obs, latent) = (at.rows(), at.cols());
        if var.len() != latent {
            return Err(Error::Dimension {
                op: "Encoder::linear",
                lhs: vec![latent],
                rhs: vec![var.len()],
            });
        }
        let floor = S::c(VAR_FLOOR);
        let mut bias = Vec::with_capacity(latent);
        for &v in var {
            if !(v > floor) {
                return Err(Error::Domain(format!("encoder variance {v} must exceed {VAR_FLOOR}")));
            }
            // inverse softplus
            let t = v - floor;
            bias.push(t + (-(-t).exp_m1()).ln());
        }
        Ok(Self {
            trunk: vec![],
            head_mu: Linear {
                w: at,
                b: Tensor::zeros(vec![1, latent]),
            },
            head_var: Linear {
                w: Tensor::zeros(vec![obs, latent]),
                b: Tensor::new(vec![1, latent], bias)?,
            },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.first().map_or(self.head_mu.fan_in(), Linear::fan_in)
    }

    pub fn latent_dim(&self) -> usize {
        self.head_mu.fan_out()
    }

    pub fn bind<'g>(&self, g: &'g Graph<S>, trainable: bool) -> BoundEncoder<'g, S> {
        BoundEncoder {
            trunk: self
                .trunk
                .iter()
                .enumerate()
                .map(|(i, l)| bind_linear(g, l, &format!("enc.trunk.{i}"), trainable))
                .collect(),
            head_mu: bind_linear(g, &self.head_mu, "enc.head_mu", trainable),
            head_var: bind_linear(g, &self.head_var, "enc.head_var", trainable),
            input_dim: self.input_dim(),
        }
    }

    /// Mean and variance for a `[batch, input]` tensor, outside any caller graph.
    pub fn encode_tensor(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let (mu, var) = b.encode(g.constant(x))?;
        Ok((mu.value(), var.value()))
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("enc.trunk.{i}.w"), &l.w));
            out.push((format!("enc.trunk.{i}.b"), &l.b));
        }
        out.push(("enc.head_mu.w".into(), &self.head_mu.w));
        out.push(("enc.head_mu.b".into(), &self.head_mu.b));
        out.push(("enc.head_var.w".into(), &self.head_var.w));
        out.push(("enc.head_var.b".into(), &self.head_var.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for l in &mut self.trunk {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.head_mu.w);
        out.push(&mut self.head_mu.b);
        out.push(&mut self.head_var.w);
        out.push(&mut self.head_var.b);
        out
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.params().into_iter().map(|(_, t)| t))
    }
}

pub struct BoundEncoder<'g, S> {
    pub trunk: Vec<BoundLinear<'g, S>>,
    pub head_mu: BoundLinear<'g, S>,
    pub head_var: BoundLinear<'g, S>,
    input_dim: usize,
}

impl<'g, S: Scalar> BoundEncoder<'g, S> {
    /// Returns `(mu, var)`, each `[batch, latent]`.
    pub fn encode(&self, x: Var<'g, S>) -> Result<(Var<'g, S>, Var<'g, S>)> {
        check_input(&x, self.input_dim, "encode")?;
        let h = trunk_forward(&self.trunk, x)?;
        let mu = self.head_mu.forward(h)?;
        let var = self.head_var.forward(h)?.softplus().add_scalar(S::c(VAR_FLOOR));
        Ok((mu, var))
    }

    pub fn encode_mean(&self, x: Var<'g, S>) -> Result<Var<'g, S>> {
        check_input(&x, self.input_dim, "encode")?;
        let h = trunk_forward(&self.trunk, x)?;
        self.head_mu.forward(h)
    }

    /// Parameter variables in the order of [`Encoder::params`].
    pub fn vars(&self) -> Vec<Var<'g, S>> {
        let mut out = Vec::new();
        for l in &self.trunk {
            out.push(l.w);
            out.push(l.b);
        }
        out.extend([self.head_mu.w, self.head_mu.b, self.head_var.w, self.head_var.b]);
        out
    }
}

/// `p(X|z) = N(g(z), v I)` with a tanh MLP trunk and linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<S> {
    pub trunk: Vec<Linear<S>>,
    pub head: Linear<S>,
    pub obs_var: S,
}

impl<S: Scalar> Decoder<S> {
    pub fn init<R: RngCore>(latent: usize, hidden: &[usize], output: usize, obs_var: S, rng: &mut R) -> Self {
        let trunk = init_trunk(latent, hidden, rng);
        let last = hidden.last().copied().unwrap_or(latent);
        Self {
            trunk,
            head: Linear::init(last, output, rng),
            obs_var,
        }
    }

    /// Linear decoder `g(z) = W z` with no bias; `w` is `[obs, latent]`.
    pub fn linear(w: &Tensor<S>, obs_var: S) -> Result<Self> {
        let wt = w.transpose()?;
        let out = wt.cols();
        Ok(Self {
            trunk: vec![],
            head: Linear {
                w: wt,
                b: Tensor::zeros(vec![1, out]),
            },
            obs_var,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.trunk.first().map_or(self.head.fan_in(), Linear::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.head.fan_out()
    }

    pub fn bind<'g>(&self, g: &'g Graph<S>, trainable: bool) -> BoundDecoder<'g, S> {
        BoundDecoder {
            trunk: self
                .trunk
                .iter()
                .enumerate()
                .map(|(i, l)| bind_linear(g, l, &format!("dec.trunk.{i}"), trainable))
                .collect(),
            head: bind_linear(g, &self.head, "dec.head", trainable),
            latent_dim: self.latent_dim(),
        }
    }

    pub fn decode_tensor(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        Ok(b.decode(g.constant(z))?.value())
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("dec.trunk.{i}.w"), &l.w));
            out.push((format!("dec.trunk.{i}.b"), &l.b));
        }
        out.push(("dec.head.w".into(), &self.head.w));
        out.push(("dec.head.b".into(), &self.head.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for l in &mut self.trunk {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.params().into_iter().map(|(_, t)| t))
    }
}

pub struct BoundDecoder<'g, S> {
    pub trunk: Vec<BoundLinear<'g, S>>,
    pub head: BoundLinear<'g, S>,
    latent_dim: usize,
}

impl<'g, S: Scalar> BoundDecoder<'g, S> {
    pub fn decode(&self, z: Var<'g, S>) -> Result<Var<'g, S>> {
        check_input(&z, self.latent_dim, "decode")?;
        let h = trunk_forward(&self.trunk, z)?;
        self.head.forward(h)
    }

    pub fn vars(&self) -> Vec<Var<'g, S>> {
        let mut out = Vec::new();
        for l in &self.trunk {
            out.push(l.w);
            out.push(l.b);
        }
        out.extend([self.head.w, self.head.b]);
        out
    }
}

/// Encoder and decoder trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair<S> {
    pub enc: Encoder<S>,
    pub dec: Decoder<S>,
}

/// Architecture of a [`ModelPair`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Arch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl<S: Scalar> ModelPair<S> {
    /// Encoder and decoder with mirrored hidden sizes.
    pub fn init<R: RngCore>(arch: &Arch, obs_var: S, rng: &mut R) -> Self {
        let enc = Encoder::init(arch.input, &arch.hidden, arch.latent, rng);
        let rev: Vec<usize> = arch.hidden.iter().rev().copied().collect();
        let dec = Decoder::init(arch.latent, &rev, arch.input, obs_var, rng);
        Self { enc, dec }
    }

    pub fn bind<'g>(&self, g: &'g Graph<S>, enc_trainable: bool, dec_trainable: bool) -> BoundModel<'g, S> {
        BoundModel {
            enc: self.enc.bind(g, enc_trainable),
            dec: self.dec.bind(g, dec_trainable),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut p = self.enc.params();
        p.extend(self.dec.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut p = self.enc.params_mut();
        p.extend(self.dec.params_mut());
        p
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.params().into_iter().map(|(_, t)| t))
    }
}

pub struct BoundModel<'g, S> {
    pub enc: BoundEncoder<'g, S>,
    pub dec: BoundDecoder<'g, S>,
}

impl<'g, S: Scalar> BoundModel<'g, S> {
    /// All parameter variables in the order of [`ModelPair::params`].
    pub fn vars(&self) -> Vec<Var<'g, S>> {
        let mut v = self.enc.vars();
        v.extend(self.dec.vars());
        v
    }
}

/// Collects gradients for `vars`; frozen (constant) variables yield zeros.
pub fn collect_grads<S: Scalar>(grads: &Gradients<S>, vars: &[Var<'_, S>]) -> Vec<Tensor<S>> {
    vars.iter()
        .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect()
}

/// FNV-1a over the exact bit patterns of every parameter.
pub fn checksum<'a, S: Scalar>(tensors: impl IntoIterator<Item = &'a Tensor<S>>) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for t in tensors {
        for &x in t.data() {
            for b in x.to_f64_lossy().to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01B3);
            }
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new<'a>(cfg: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let m: Vec<Tensor<S>> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            cfg,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected update. Nothing is modified if any gradient is non-finite.
    pub fn update(&mut self, params: &mut [&mut Tensor<S>], names: &[String], grads: &[Tensor<S>]) -> Result<()> {
        let all = vec![true; params.len()];
        self.update_where(params, names, grads, &all)
    }

    /// As [`Adam::update`], leaving parameters with `trainable[i] == false`
    /// and their moments untouched.
    pub fn update_where(&mut self, params: &mut [&mut Tensor<S>], names: &[String], grads: &[Tensor<S>], trainable: &[bool]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() || trainable.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            if g.shape() != params[i].shape() {
                return Err(Error::Dimension {
                    op: "adam",
                    lhs: params[i].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("param#{i}"));
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (S::c(c.beta1), S::c(c.beta2));
        let bc1 = S::one() - S::c(c.beta1.powi(self.step as i32));
        let bc2 = S::one() - S::c(c.beta2.powi(self.step as i32));
        let lr = S::c(c.lr);
        let eps = S::c(c.eps);
        for (i, g) in grads.iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    #[test]
    fn zero_heads_give_prior_like_output() {
        let mut rng = Streams::new(0).stream("init");
        let mut enc = Encoder::<f64>::init(5, &[4], 3, &mut rng);
        enc.head_mu = Linear::zeros(4, 3);
        enc.head_var = Linear::zeros(4, 3);
        let x = Tensor::full(vec![2, 5], 0.3);
        let (mu, var) = enc.encode_tensor(&x).unwrap();
        assert!(mu.data().iter().all(|&m| m == 0.0));
        let expect = 2f64.ln() + VAR_FLOOR;
        assert!(var.data().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn identity_linear_decoder() {
        let dec = Decoder::linear(&crate::linalg::identity::<f64>(3), 1.0).unwrap();
        let z = Tensor::row(vec![1.0, -2.0, 0.5]);
        assert_eq!(dec.decode_tensor(&z).unwrap(), z);
    }

    #[test]
    fn wrong_input_width_is_dimension_error() {
        let mut rng = Streams::new(0).stream("init");
        let enc = Encoder::<f64>::init(5, &[4], 3, &mut rng);
        assert!(matches!(
            enc.encode_tensor(&Tensor::zeros(vec![1, 4])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut p = Tensor::scalar(1.0f64);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, [&p]);
        let names = vec!["w".to_string()];
        opt.update(&mut [&mut p], &names, &[Tensor::scalar(3.0)]).unwrap();
        assert!((p.item().unwrap() - 0.9).abs() < 1e-6);
        let mut q = Tensor::scalar(1.0f64);
        let mut opt = Adam::new(AdamConfig::default(), [&q]);
        opt.update(&mut [&mut q], &names, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(q.item().unwrap(), 1.0);
        match opt.update(&mut [&mut q], &names, &[Tensor::scalar(f64::NAN)]) {
            Err(Error::NonFiniteGradient(n)) => assert_eq!(n, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
