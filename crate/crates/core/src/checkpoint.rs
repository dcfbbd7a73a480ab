//! Checkpoint files: a TOML manifest followed by named tensor records.
//!
//! Layout (little-endian): magic `KSEGCKPT`, u32 manifest length, manifest
//! text, u32 record count, then per record a kind byte (0 parameter, 1
//! running statistic), u16 name length, name, and a KTSR tensor.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use kanseg_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Network};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointInfo {
    pub version: u32,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
    /// Held-out mIoU at that point, when evaluated.
    pub test_miou: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    checkpoint: CheckpointInfo,
    model: ModelConfig,
}

pub fn to_bytes(model: &Model, epoch: usize, test_miou: Option<f64>) -> Result<Vec<u8>> {
    let manifest = Manifest {
        checkpoint: CheckpointInfo { version: CHECKPOINT_VERSION, epoch, test_miou },
        model: model.config().clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let params: Vec<_> = model.store.params().map(|(k, v)| (0u8, k, v)).collect();
    let buffers: Vec<_> = model.store.buffers().map(|(k, v)| (1u8, k, v)).collect();
    out.extend_from_slice(&((params.len() + buffers.len()) as u32).to_le_bytes());
    for (kind, name, t) in params.into_iter().chain(buffers) {
        out.push(kind);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        t.write_to(&mut out)?;
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model, epoch: usize, test_miou: Option<f64>) -> Result<()> {
    let bytes = to_bytes(model, epoch, test_miou)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_exact<const N: usize>(r: &mut Cursor<&[u8]>, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| Error::Format(format!("checkpoint truncated in {what}")))?;
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, CheckpointInfo)> {
    let mut r = Cursor::new(bytes);
    if &read_exact::<8>(&mut r, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let len = u32::from_le_bytes(read_exact(&mut r, "manifest length")?) as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text).map_err(|_| Error::Format("checkpoint truncated in manifest".into()))?;
    let text = String::from_utf8(text).map_err(|_| Error::Format("checkpoint manifest is not UTF-8".into()))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    if manifest.checkpoint.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", manifest.checkpoint.version)));
    }
    let net = Network::new(manifest.model)?;
    let mut store: ParamStore<f32> = net.init(0);
    let count = u32::from_le_bytes(read_exact(&mut r, "record count")?) as usize;
    let mut seen = 0;
    for _ in 0..count {
        let [kind] = read_exact::<1>(&mut r, "record kind")?;
        let n = u16::from_le_bytes(read_exact(&mut r, "record name")?) as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(|_| Error::Format("checkpoint truncated in record name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let t: Tensor<f32> = Tensor::read_from(&mut r)?;
        match kind {
            0 => {
                store.set(&name, t).map_err(|e| Error::Format(format!("record {name}: {e}")))?;
                seen += 1;
            }
            1 => store.set_buffer(name, t),
            k => return Err(Error::Format(format!("unknown record kind {k}"))),
        }
    }
    let expected = store.params().count();
    if seen != expected {
        return Err(Error::Format(format!("checkpoint holds {seen} of {expected} parameters")));
    }
    Ok((Model { net, store }, manifest.checkpoint))
}

pub fn load(path: &Path) -> Result<(Model, CheckpointInfo)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
