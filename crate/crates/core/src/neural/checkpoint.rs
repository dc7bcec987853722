//! Checkpoint container: an 8-byte magic, a little-endian u64 header
//! length, a JSON header (model kind, config, tensor directory), then the
//! raw f32 payload in little-endian byte order. Weights round-trip
//! bit-exactly; gradients and optimizer state are not persisted.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{LmConfig, ParamSet, PolicyModel, RewardNet, RmConfig};
use super::NeuralError;

const MAGIC: &[u8; 8] = b"CLMRLCK1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

fn bad(path: &Path, msg: impl Into<String>) -> NeuralError {
    NeuralError::BadCheckpoint { path: path.to_path_buf(), msg: msg.into() }
}

fn io(path: &Path, source: std::io::Error) -> NeuralError {
    NeuralError::Io { path: path.to_path_buf(), source }
}

fn write_checkpoint(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    params: &ParamSet<f32>,
) -> Result<(), NeuralError> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, tensor) in params.iter() {
        tensors.push(TensorMeta {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.len() as u64,
        });
        offset += 4 * tensor.len() as u64;
    }
    let header = Header { kind: kind.to_string(), config, tensors };
    let header_json = serde_json::to_vec(&header).map_err(|e| bad(path, e.to_string()))?;

    let mut buf = Vec::with_capacity(16 + header_json.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, tensor) in params.iter() {
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| io(path, e))
}

fn read_checkpoint(path: &Path) -> Result<(Header, Vec<u8>), NeuralError> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad(path, "missing or wrong magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(bad(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| bad(path, format!("header: {e}")))?;
    let payload = bytes[16 + header_len..].to_vec();
    Ok((header, payload))
}

// Overwrites `params` values from the checkpoint's tensor directory; every
// parameter must be present with its exact shape, and no extras.
fn fill_params(
    path: &Path,
    header: &Header,
    payload: &[u8],
    params: &mut ParamSet<f32>,
) -> Result<(), NeuralError> {
    if header.tensors.len() != params.len() {
        return Err(bad(
            path,
            format!("{} tensors, model needs {}", header.tensors.len(), params.len()),
        ));
    }
    for meta in &header.tensors {
        let i = params
            .index_of(&meta.name)
            .ok_or_else(|| bad(path, format!("unknown tensor {:?}", meta.name)))?;
        let tensor = params.tensor_mut(i);
        if tensor.shape() != meta.shape.as_slice() {
            return Err(bad(
                path,
                format!("tensor {:?} shape {:?}, model wants {:?}", meta.name, meta.shape, tensor.shape()),
            ));
        }
        let start = meta.offset as usize;
        let nbytes = meta.len as usize * 4;
        if meta.len as usize != tensor.len() || start + nbytes > payload.len() {
            return Err(bad(path, format!("tensor {:?} out of payload bounds", meta.name)));
        }
        for (j, chunk) in payload[start..start + nbytes].chunks_exact(4).enumerate() {
            tensor.data_mut()[j] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(())
}

pub fn save_policy(path: &Path, model: &PolicyModel<f32>) -> Result<(), NeuralError> {
    let config = serde_json::to_value(model.config).map_err(|e| bad(path, e.to_string()))?;
    write_checkpoint(path, "policy", config, &model.params)
}

pub fn load_policy(path: &Path) -> Result<PolicyModel<f32>, NeuralError> {
    let (header, payload) = read_checkpoint(path)?;
    if header.kind != "policy" {
        return Err(bad(path, format!("kind {:?}, expected policy", header.kind)));
    }
    let config: LmConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| bad(path, format!("config: {e}")))?;
    let mut model = PolicyModel::new(config)?;
    fill_params(path, &header, &payload, &mut model.params)?;
    Ok(model)
}

pub fn save_reward(path: &Path, net: &RewardNet<f32>) -> Result<(), NeuralError> {
    let config = serde_json::to_value(net.config).map_err(|e| bad(path, e.to_string()))?;
    write_checkpoint(path, "reward", config, &net.params)
}

pub fn load_reward(path: &Path) -> Result<RewardNet<f32>, NeuralError> {
    let (header, payload) = read_checkpoint(path)?;
    if header.kind != "reward" {
        return Err(bad(path, format!("kind {:?}, expected reward", header.kind)));
    }
    let config: RmConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| bad(path, format!("config: {e}")))?;
    let mut net = RewardNet::new(config)?;
    fill_params(path, &header, &payload, &mut net.params)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::model::{LmConfig, RmConfig};

    fn tiny_policy() -> PolicyModel<f32> {
        PolicyModel::new(LmConfig {
            vocab_size: 270,
            context_length: 12,
            layers: 1,
            heads: 2,
            model_dim: 8,
            feedforward_dim: 12,
            init_seed: 21,
        })
        .unwrap()
    }

    #[test]
    fn policy_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let mut model = tiny_policy();
        // Perturb away from init so the test can't pass by reconstruction.
        model.params.tensor_mut(0).data_mut()[0] = 1.234_567_9e-3;
        save_policy(&path, &model).unwrap();
        let loaded = load_policy(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for i in 0..model.params.len() {
            let a = model.params.tensor(i).data();
            let b = loaded.params.tensor(i).data();
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "tensor {}",
                model.params.name(i)
            );
        }
    }

    #[test]
    fn reward_round_trip_and_kind_guard() {
        let dir = tempfile::tempdir().unwrap();
        let p_policy = dir.path().join("p.ckpt");
        let p_reward = dir.path().join("r.ckpt");
        let policy = tiny_policy();
        save_policy(&p_policy, &policy).unwrap();
        let net = RewardNet::<f32>::new(RmConfig {
            vocab_size: 270,
            context_length: 16,
            layers: 1,
            heads: 1,
            model_dim: 8,
            feedforward_dim: 12,
            token_cap: 10,
            init_seed: 2,
        })
        .unwrap();
        save_reward(&p_reward, &net).unwrap();
        let loaded = load_reward(&p_reward).unwrap();
        assert_eq!(loaded.config, net.config);
        assert!(matches!(
            load_reward(&p_policy),
            Err(NeuralError::BadCheckpoint { .. })
        ));
        assert!(matches!(
            load_policy(&p_reward),
            Err(NeuralError::BadCheckpoint { .. })
        ));
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"short").unwrap();
        assert!(matches!(load_policy(&path), Err(NeuralError::BadCheckpoint { .. })));
        let model = tiny_policy();
        save_policy(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_policy(&path), Err(NeuralError::BadCheckpoint { .. })));
    }
}
