//! Bit-exact checkpoints: every parameter is serialized as the base-16
//! encoding of its IEEE-754 bits, so save/load round-trips reproduce the
//! model down to the last bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cvf::{CvfDims, CvfModel};
use crate::env::{EnvConfig, EnvSpec};
use crate::error::{OmacError, Result};
use crate::numcore::{MlpSpec, Net};
use crate::trainer::{PolicyModel, TrainConfig};

pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetBlob {
    pub spec: MlpSpec,
    /// Concatenated 16-hex-digit big-endian bit patterns, one per f64.
    pub params_hex: String,
}

pub fn encode_params(params: &[f64]) -> String {
    let mut out = String::with_capacity(params.len() * 16);
    for p in params {
        out.push_str(&format!("{:016x}", p.to_bits()));
    }
    out
}

pub fn decode_params(hex: &str, expected: usize) -> Result<Vec<f64>> {
    if hex.len() != expected * 16 {
        return Err(OmacError::Parse {
            line: 0,
            msg: format!(
                "parameter blob has {} hex digits, expected {}",
                hex.len(),
                expected * 16
            ),
        });
    }
    let mut out = Vec::with_capacity(expected);
    for i in 0..expected {
        let chunk = &hex[i * 16..(i + 1) * 16];
        let bits = u64::from_str_radix(chunk, 16).map_err(|e| OmacError::Parse {
            line: 0,
            msg: format!("bad hex double '{chunk}': {e}"),
        })?;
        out.push(f64::from_bits(bits));
    }
    Ok(out)
}

impl NetBlob {
    pub fn from_net(net: &Net) -> Self {
        NetBlob {
            spec: net.spec.clone(),
            params_hex: encode_params(net.params()),
        }
    }

    pub fn to_net(&self) -> Result<Net> {
        let mut net = Net::zeros(self.spec.clone())?;
        let params = decode_params(&self.params_hex, net.n_params())?;
        net.set_params(&params);
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBlob {
    pub dims: CvfDims,
    pub v_nets: Vec<NetBlob>,
    pub q_nets: Vec<NetBlob>,
    pub q_targets: Vec<NetBlob>,
    pub v_share: NetBlob,
    pub enc_v: NetBlob,
    pub head_v: NetBlob,
    pub enc_q: NetBlob,
    pub head_q: NetBlob,
}

/// Full training artifact: environment, configuration, value model, and
/// policy. Optimizer state is not persisted; checkpoints are terminal
/// artifacts for evaluation and analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub env: EnvConfig,
    pub config: TrainConfig,
    pub model: ModelBlob,
    pub policy: Vec<NetBlob>,
}

impl Checkpoint {
    pub fn capture(env: &EnvSpec, config: &TrainConfig, model: &CvfModel, policy: &PolicyModel) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            env: env.config(),
            config: config.clone(),
            model: ModelBlob {
                dims: model.dims,
                v_nets: model.v_nets.iter().map(NetBlob::from_net).collect(),
                q_nets: model.q_nets.iter().map(NetBlob::from_net).collect(),
                q_targets: model.q_targets.iter().map(NetBlob::from_net).collect(),
                v_share: NetBlob::from_net(&model.v_share),
                enc_v: NetBlob::from_net(&model.enc_v),
                head_v: NetBlob::from_net(&model.head_v),
                enc_q: NetBlob::from_net(&model.enc_q),
                head_q: NetBlob::from_net(&model.head_q),
            },
            policy: policy.nets.iter().map(NetBlob::from_net).collect(),
        }
    }

    pub fn restore(&self) -> Result<(EnvSpec, CvfModel, PolicyModel)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(OmacError::Parse {
                line: 0,
                msg: format!(
                    "unsupported checkpoint version '{}', expected '{}'",
                    self.version, CHECKPOINT_VERSION
                ),
            });
        }
        let env = EnvSpec::from_config(&self.env)?;
        let mut model = CvfModel::new(
            self.model.dims,
            self.config.variant,
            self.config.tau,
            self.config.rho,
            self.config.seed,
        )?;
        let restore_vec = |blobs: &[NetBlob]| -> Result<Vec<Net>> {
            blobs.iter().map(|b| b.to_net()).collect()
        };
        model.v_nets = restore_vec(&self.model.v_nets)?;
        model.q_nets = restore_vec(&self.model.q_nets)?;
        model.q_targets = restore_vec(&self.model.q_targets)?;
        model.v_share = self.model.v_share.to_net()?;
        model.enc_v = self.model.enc_v.to_net()?;
        model.head_v = self.model.head_v.to_net()?;
        model.enc_q = self.model.enc_q.to_net()?;
        model.head_q = self.model.head_q.to_net()?;
        let policy = PolicyModel {
            nets: restore_vec(&self.policy)?,
            n_actions: self.model.dims.n_actions,
        };
        Ok((env, model, policy))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self)
            .map_err(|e| OmacError::Validation(format!("checkpoint serialization failed: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| OmacError::Parse {
            line: 0,
            msg: format!("bad checkpoint file: {e}"),
        })
    }
}
