//! Checkpoint files: a magic line, a one-line JSON header (format version,
//! network spec, tensor directory, training progress), the tensors as
//! little-endian `f32` in directory order, and a trailing SHA-256 of
//! everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochRecord, OptState};
use crate::error::{Error, Result};
use crate::nets::{Network, NetworkSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"SEGKIT-CHECKPOINT\n";
const DIGEST_LEN: usize = 32;

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub opt: OptState<f32>,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: NetworkSpec,
    epochs_done: usize,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
    history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Tensors in file order, each with its directory name.
fn directory(ck: &Checkpoint) -> Vec<(String, Tensor<f32>)> {
    let net = &ck.network;
    let mut out = Vec::new();
    for p in net.params() {
        out.push((format!("param/{}", p.name), p.value.clone()));
    }
    for (i, bn) in net.batch_norm_states().iter().enumerate() {
        let c = bn.channels();
        out.push((
            format!("bn/{i}/running_mean"),
            Tensor::new(vec![c], bn.running_mean.clone()).expect("non-empty channels"),
        ));
        out.push((
            format!("bn/{i}/running_var"),
            Tensor::new(vec![c], bn.running_var.clone()).expect("non-empty channels"),
        ));
    }
    for (p, m) in net.params().iter().zip(&ck.opt.m) {
        out.push((format!("adam_m/{}", p.name), m.clone()));
    }
    for (p, v) in net.params().iter().zip(&ck.opt.v) {
        out.push((format!("adam_v/{}", p.name), v.clone()));
    }
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = directory(ck);
    let header = Header {
        version: CHECKPOINT_VERSION,
        spec: ck.network.spec().clone(),
        epochs_done: ck.epochs_done,
        adam_t: ck.opt.t,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        history: ck.history.clone(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::State(format!("checkpoint header: {e}")))?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + json.len() + 1 + 4 * tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(json.as_bytes());
    bytes.push(b'\n');
    for (_, t) in &tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    Ok(bytes)
}

/// Writes through a temporary file so a crash never leaves a partial checkpoint.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads and verifies a checkpoint; with `expected` set, a different network
/// spec is rejected.
pub fn load_checkpoint(path: &Path, expected: Option<&NetworkSpec>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path, expected)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path, expected: Option<&NetworkSpec>) -> Result<Checkpoint> {
    if bytes.len() < DIGEST_LEN {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let rest = body
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::format(path, "not a segkit checkpoint"))?;
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: Header =
        serde_json::from_slice(&rest[..newline]).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if let Some(spec) = expected {
        if *spec != header.spec {
            return Err(Error::SpecMismatch {
                expected: spec.to_string(),
                found: header.spec.to_string(),
            });
        }
    }
    let payload = &rest[newline + 1..];

    let network = Network::build(&header.spec, 0)?;
    let mut ck = Checkpoint {
        opt: OptState::new(network.params()),
        network,
        epochs_done: header.epochs_done,
        history: header.history,
    };
    ck.opt.t = header.adam_t;
    let layout = directory(&ck);
    let same_layout = layout.len() == header.tensors.len()
        && layout
            .iter()
            .zip(&header.tensors)
            .all(|((name, t), e)| *name == e.name && t.shape() == e.shape.as_slice());
    if !same_layout {
        return Err(Error::format(path, "tensor directory does not match the network spec"));
    }
    let total: usize = layout.iter().map(|(_, t)| t.len()).sum();
    if payload.len() != 4 * total {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, directory needs {}", payload.len(), 4 * total),
        ));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = |n: usize| -> Vec<f32> { values.by_ref().take(n).collect() };

    let net = &mut ck.network;
    for p in net.params_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&take(n));
    }
    for bn in net.batch_norm_states_mut() {
        let c = bn.channels();
        bn.running_mean = take(c);
        bn.running_var = take(c);
    }
    for m in &mut ck.opt.m {
        let n = m.len();
        m.data_mut().copy_from_slice(&take(n));
    }
    for v in &mut ck.opt.v {
        let n = v.len();
        v.data_mut().copy_from_slice(&take(n));
    }
    Ok(ck)
}
