//! Checkpoint archive: magic, version, JSON manifest and a raw little-endian payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, TransFusionNet};
use crate::nn::{ParamKind, ParamStore};
use crate::rng::digest_hex;
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TFNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
/// File name used inside a checkpoint directory.
pub const ARCHIVE_NAME: &str = "model.tfn";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    I8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the payload.
    pub offset: usize,
}

impl TensorRecord {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.size()
    }
}

/// Serializes `manifest` and `payload` into one archive.
pub fn write_archive<M: Serialize>(manifest: &M, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits an archive into its parsed manifest and payload bytes.
pub fn read_archive<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint archive (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(n).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| Error::Format("truncated manifest".into()))?;
    let manifest = serde_json::from_slice(&bytes[20..end]).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    Ok((manifest, &bytes[end..]))
}

/// Appends every parameter as `f32` and returns the tensor table.
pub fn encode_f32(store: &ParamStore, payload: &mut Vec<u8>) -> Vec<TensorRecord> {
    store
        .entries()
        .iter()
        .map(|e| {
            let offset = payload.len();
            for &v in e.value.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            TensorRecord {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.value.shape().to_vec(),
                dtype: DType::F32,
                offset,
            }
        })
        .collect()
}

pub fn tensor_bytes<'a>(rec: &TensorRecord, payload: &'a [u8]) -> Result<&'a [u8]> {
    payload
        .get(rec.offset..rec.offset + rec.byte_len())
        .ok_or_else(|| Error::Format(format!("tensor {} runs past the payload", rec.name)))
}

pub fn decode_f32(rec: &TensorRecord, payload: &[u8]) -> Result<Tensor> {
    if rec.dtype != DType::F32 {
        return Err(Error::Format(format!("tensor {} is not f32", rec.name)));
    }
    let data = tensor_bytes(rec, payload)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::new(rec.shape.clone(), data))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: String,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    log_digest: String,
    provenance: Option<String>,
    tensors: Vec<TensorRecord>,
}

/// Trained parameters with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Architecture actually trained, ablations applied.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    /// SHA-256 of the training log CSV.
    pub log_digest: String,
    /// Digest of the checkpoint this one was derived from.
    pub provenance: Option<String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(net: &TransFusionNet, train: &TrainConfig, epoch: usize, log_digest: String, provenance: Option<String>) -> Self {
        let mut params = net.store.clone();
        params.round_to_f32();
        Checkpoint {
            model: net.cfg.clone(),
            train: train.clone(),
            epoch,
            log_digest,
            provenance,
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.params.scalar_count() * 4);
        let tensors = encode_f32(&self.params, &mut payload);
        let m = Manifest {
            kind: "checkpoint".into(),
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            log_digest: self.log_digest.clone(),
            provenance: self.provenance.clone(),
            tensors,
        };
        write_archive(&m, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (m, payload): (Manifest, _) = read_archive(bytes)?;
        if m.kind != "checkpoint" {
            return Err(Error::Format(format!("archive holds a {}, not a checkpoint", m.kind)));
        }
        let mut params = ParamStore::new();
        for rec in &m.tensors {
            params.add(rec.name.clone(), rec.kind, decode_f32(rec, payload)?);
        }
        Ok(Checkpoint {
            model: m.model,
            train: m.train,
            epoch: m.epoch,
            log_digest: m.log_digest,
            provenance: m.provenance,
            params,
        })
    }

    pub fn digest(&self) -> Result<String> {
        Ok(digest_hex(&self.to_bytes()?))
    }

    /// Writes `dir/model.tfn`, creating `dir` if needed.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ARCHIVE_NAME);
        fs::write(&path, self.to_bytes()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads a checkpoint directory or an archive file.
    pub fn load(path: &Path) -> Result<Self> {
        let file = archive_path(path);
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network with these parameters.
    pub fn build(&self) -> Result<TransFusionNet> {
        let mut net = TransFusionNet::new(&self.model, 0)?;
        net.store.load_from(&self.params)?;
        Ok(net)
    }
}

pub fn archive_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ARCHIVE_NAME)
    } else {
        path.to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let cfg = ModelConfig::with_base_width(2);
        let net = TransFusionNet::new(&cfg, 5).unwrap();
        Checkpoint::from_model(&net, &TrainConfig::default(), 3, "ab".into(), None)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = small();
        let dir = tempfile::tempdir().unwrap();
        let p = ck.save(dir.path()).unwrap();
        let first = fs::read(&p).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let p2 = back.save(&dir.path().join("again")).unwrap();
        assert_eq!(fs::read(p2).unwrap(), first);
        assert_eq!(&first[..8], MAGIC);
        let net = back.build().unwrap();
        assert_eq!(net.store, ck.params);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = small().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..30]).is_err());
    }

    #[test]
    fn mismatched_architecture_reports_names() {
        let mut ck = small();
        ck.model.edge.enabled = false;
        match ck.build() {
            Err(Error::Incompatible { missing, extra }) => {
                assert!(missing.is_empty());
                assert!(extra.iter().all(|n| n.starts_with("edge.")) && !extra.is_empty());
            }
            other => panic!("{:?}", other.map(|_| ())),
        }
    }
}
