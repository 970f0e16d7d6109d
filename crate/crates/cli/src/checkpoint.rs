//! Checkpoint container.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE manifest length,
//! a JSON manifest, the tensor payloads (little-endian, in manifest order),
//! then a SHA-256 of everything before it.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use repgan::networks::ModelParams;
use repgan::nn::Module;
use repgan::optim::{Moments, Optimizer, OptimizerState, Rule};
use repgan::rng::StreamState;
use repgan::tensor::Tensor;
use repgan::training::TrainState;
use repgan::{Scalar, Stream};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"RGANCKPT";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;
const TRAILER: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MomentEntry {
    param: String,
    updates: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    role: String,
    rule: Rule,
    lr: f64,
    steps: u64,
    moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    config_hash: String,
    config: RunConfig,
    step: u64,
    epoch: usize,
    batch_in_epoch: usize,
    rng: StreamState,
    tensors: Vec<TensorEntry>,
    optimizers: Vec<OptimizerEntry>,
    payload_bytes: usize,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub config_hash: String,
    pub state: TrainState<T>,
}

struct Payload<T> {
    bytes: Vec<u8>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> Payload<T> {
    fn push(&mut self, name: &str, t: &Tensor<T>) -> TensorEntry {
        let offset = self.bytes.len();
        for &v in t.data() {
            v.write_le(&mut self.bytes);
        }
        TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            offset,
        }
    }
}

fn read_tensor<T: Scalar>(payload: &[u8], e: &TensorEntry) -> Result<Tensor<T>, CliError> {
    let n: usize = e.shape.iter().product();
    let end = n
        .checked_mul(T::BYTES)
        .and_then(|len| e.offset.checked_add(len))
        .filter(|&end| end <= payload.len())
        .ok_or_else(|| CliError::checkpoint(format!("tensor {} runs past the payload", e.name)))?;
    let data = payload[e.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok(Tensor::from_vec(e.shape.clone(), data))
}

fn id_names<T: Scalar>(params: &ModelParams<T>) -> HashMap<repgan::autodiff::ParamId, String> {
    params.params().into_iter().map(|p| (p.id, p.name.clone())).collect()
}

/// Serializes `state` with its config.
pub fn encode<T: Scalar>(config: &RunConfig, state: &TrainState<T>) -> Vec<u8> {
    let mut payload = Payload::<T> {
        bytes: Vec::new(),
        _t: std::marker::PhantomData,
    };
    let tensors = state
        .params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| payload.push(n, t))
        .collect();
    let names = id_names(&state.params);
    let optimizers = [
        ("generators", &state.opt_generators),
        ("dz", &state.opt_dz),
        ("dx", &state.opt_dx),
    ]
    .into_iter()
    .map(|(role, opt)| {
        let s = opt.export();
        OptimizerEntry {
            role: role.into(),
            rule: s.rule,
            lr: s.lr,
            steps: s.steps,
            moments: s
                .moments
                .iter()
                .map(|(id, m)| {
                    let name = &names[id];
                    MomentEntry {
                        param: name.clone(),
                        updates: m.updates,
                        tensors: m
                            .tensors
                            .iter()
                            .enumerate()
                            .map(|(i, t)| payload.push(&format!("{name}#m{i}"), t))
                            .collect(),
                    }
                })
                .collect(),
        }
    })
    .collect();
    let manifest = Manifest {
        dtype: T::DTYPE.into(),
        config_hash: config.fingerprint(),
        config: config.clone(),
        step: state.step,
        epoch: state.epoch,
        batch_in_epoch: state.batch_in_epoch,
        rng: state.rng.state(),
        tensors,
        optimizers,
        payload_bytes: payload.bytes.len(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER + json.len() + payload.bytes.len() + TRAILER);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload.bytes);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Parses a checkpoint. Nothing is returned unless the trailer hash, the
/// version, the dtype and every tensor check out.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, CliError> {
    if bytes.len() < HEADER + TRAILER || &bytes[..8] != MAGIC {
        return Err(CliError::checkpoint("not a checkpoint file (bad magic or too short)"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(CliError::checkpoint("checksum mismatch; file is truncated or corrupted"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CliError::checkpoint(format!(
            "checkpoint format version {version}, this build reads {VERSION}"
        )));
    }
    let len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let json = body
        .get(HEADER..HEADER.saturating_add(len))
        .ok_or_else(|| CliError::checkpoint("manifest length exceeds the file"))?;
    let m: Manifest =
        serde_json::from_slice(json).map_err(|e| CliError::checkpoint(format!("manifest: {e}")))?;
    let payload = &body[HEADER + len..];
    if payload.len() != m.payload_bytes {
        return Err(CliError::checkpoint("payload size disagrees with the manifest"));
    }
    if m.dtype != T::DTYPE {
        return Err(CliError::checkpoint(format!("checkpoint holds {} tensors, expected {}", m.dtype, T::DTYPE)));
    }
    m.config.validate()?;

    let mut params = ModelParams::<T>::init(&m.config.arch, &m.config.latent, &mut Stream::from_seed(0))?;
    let mut named = HashMap::new();
    for e in &m.tensors {
        if named.insert(e.name.clone(), read_tensor(payload, e)?).is_some() {
            return Err(CliError::checkpoint(format!("tensor {} appears twice", e.name)));
        }
    }
    params
        .load_named_tensors(named)
        .map_err(|e| CliError::checkpoint(e.to_string()))?;

    let ids: HashMap<String, repgan::autodiff::ParamId> =
        params.params().into_iter().map(|p| (p.name.clone(), p.id)).collect();
    let mut opts = HashMap::new();
    for o in &m.optimizers {
        let mut moments = Vec::new();
        for me in &o.moments {
            let id = *ids
                .get(&me.param)
                .ok_or_else(|| CliError::checkpoint(format!("optimizer state for unknown param {}", me.param)))?;
            let tensors = me.tensors.iter().map(|e| read_tensor(payload, e)).collect::<Result<Vec<_>, _>>()?;
            moments.push((
                id,
                Moments {
                    updates: me.updates,
                    tensors,
                },
            ));
        }
        let state = OptimizerState {
            rule: o.rule,
            lr: o.lr,
            steps: o.steps,
            moments,
        };
        let opt = Optimizer::import(state).map_err(|e| CliError::checkpoint(e.to_string()))?;
        opts.insert(o.role.clone(), opt);
    }
    let mut take = |role: &str| {
        opts.remove(role)
            .ok_or_else(|| CliError::checkpoint(format!("missing optimizer {role}")))
    };
    let state = TrainState {
        opt_generators: take("generators")?,
        opt_dz: take("dz")?,
        opt_dx: take("dx")?,
        params,
        rng: Stream::from_state(&m.rng),
        step: m.step,
        epoch: m.epoch,
        batch_in_epoch: m.batch_in_epoch,
    };
    Ok(Checkpoint {
        config: m.config,
        config_hash: m.config_hash,
        state,
    })
}

/// Writes to a temporary sibling and renames it into place.
pub fn save<T: Scalar>(path: &Path, config: &RunConfig, state: &TrainState<T>) -> Result<(), CliError> {
    let bytes = encode(config, state);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::config(format!("bad checkpoint path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::checkpoint(format!("reading {}: {e}", path.display())))?;
    decode(&bytes)
}

/// Loads and checks the config hash against `expected` unless `force`.
pub fn load_matching<T: Scalar>(path: &Path, expected: &RunConfig, force: bool) -> Result<Checkpoint<T>, CliError> {
    let ck = load(path)?;
    let want = expected.fingerprint();
    if ck.config_hash != want && !force {
        return Err(CliError::config(format!(
            "checkpoint {} was written under config {}, current config is {}; pass --force to load anyway",
            path.display(),
            &ck.config_hash[..12],
            &want[..12]
        )));
    }
    Ok(ck)
}
