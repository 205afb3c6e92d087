//! Versioned binary checkpoints.
//!
//! Layout: `AVAE`, u32 version, u32 header length, JSON header, then every
//! tensor listed in the header as little-endian `f64`, in header order.

use std::path::Path;

use avae_core::nets::{Adam, AdamConfig, Arch, ModelPair};
use avae_core::objectives::TrainProgress;
use avae_core::rng::Streams;
use avae_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const MAGIC: &[u8; 4] = b"AVAE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub step: u64,
}

/// Training randomness is keyed by `(seed, step)`, so this is all that is
/// needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngHeader {
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    arch: Arch,
    obs_var: f64,
    params: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    rng: RngHeader,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub arch: Arch,
    pub model: ModelPair<f64>,
    pub optimizer: Option<Adam<f64>>,
    pub progress: TrainProgress,
}

impl Checkpoint {
    pub fn streams(&self) -> Streams {
        Streams::new(self.config.seed)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params: Vec<TensorEntry> = self
            .model
            .params()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            arch: self.arch.clone(),
            obs_var: self.model.dec.obs_var,
            params,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.cfg.clone(),
                step: o.step,
            }),
            rng: RngHeader {
                seed: self.config.seed,
                next_step: self.progress.step,
            },
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |t: &Tensor| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, t) in self.model.params() {
            push(t);
        }
        if let Some(o) = &self.optimizer {
            o.m.iter().chain(&o.v).for_each(&mut push);
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, CliError> {
        let fmt = |offset: usize, msg: String| CliError::Core(avae_core::Error::Format { offset: offset as u64, msg });
        if b.len() < 12 || &b[..4] != MAGIC {
            return Err(fmt(0, "not a checkpoint (missing AVAE magic)".into()));
        }
        let version = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fmt(4, format!("unsupported checkpoint version {version}")));
        }
        let hl = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes")) as usize;
        let body = 12usize.checked_add(hl).filter(|&e| e <= b.len()).ok_or_else(|| fmt(8, "truncated header".into()))?;
        let header: Header = serde_json::from_slice(&b[12..body]).map_err(|e| fmt(12, format!("bad header: {e}")))?;

        let mut model = ModelPair::init(&header.arch, header.obs_var, &mut Streams::new(0).stream("shape"));
        let expected: Vec<TensorEntry> = model
            .params()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        if expected != header.params {
            return Err(fmt(12, "parameter list does not match the architecture".into()));
        }
        let mut pos = body;
        let mut fill = |t: &mut Tensor| -> Result<(), CliError> {
            let n = t.len() * 8;
            let end = pos.checked_add(n).filter(|&e| e <= b.len()).ok_or_else(|| fmt(pos, "truncated tensor payload".into()))?;
            for (d, chunk) in t.data_mut().iter_mut().zip(b[pos..end].chunks_exact(8)) {
                *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            pos = end;
            Ok(())
        };
        for t in model.params_mut() {
            fill(t)?;
        }
        let optimizer = match header.optimizer {
            Some(h) => {
                let mut o = Adam::new(h.config, model.params().into_iter().map(|(_, t)| t));
                o.step = h.step;
                for t in o.m.iter_mut() {
                    fill(t)?;
                }
                for t in o.v.iter_mut() {
                    fill(t)?;
                }
                Some(o)
            }
            None => None,
        };
        if pos != b.len() {
            return Err(fmt(pos, "trailing bytes after payload".into()));
        }
        Ok(Self {
            config: header.config,
            arch: header.arch,
            model,
            optimizer,
            progress: TrainProgress {
                step: header.rng.next_step,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let b = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let arch = Arch {
            input: 5,
            hidden: vec![4, 3],
            latent: 2,
        };
        let model = ModelPair::init(&arch, 0.25, &mut Streams::new(3).stream("m"));
        let mut opt = Adam::new(AdamConfig::default(), model.params().into_iter().map(|(_, t)| t));
        opt.step = 7;
        opt.m[0].data_mut()[0] = 0.5;
        Checkpoint {
            config: ExperimentConfig::default(),
            arch,
            model,
            optimizer: Some(opt),
            progress: TrainProgress { step: 7 },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
