//! Checkpoint files: an 8-byte magic, a little-endian u64 header length, a
//! JSON header, then the parameter blobs as little-endian f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{config_hash, Network, NetworkConfig};
use crate::search_space::Architecture;

const MAGIC: &[u8; 8] = b"RUASCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config_hash: String,
    pub config: NetworkConfig,
    pub architecture: Architecture,
    pub params: Vec<BlobEntry>,
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    if net.is_supernet() {
        return Err(Error::Config("only discrete networks can be checkpointed".into()));
    }
    let mut params = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (_, p) in net.store.iter() {
        let len = p.tensor.numel();
        params.push(BlobEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().dims(),
            offset,
            len,
        });
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += len;
    }
    let header = Header {
        version: VERSION,
        config_hash: net.config_hash(),
        config: net.config.clone(),
        architecture: net.architecture(),
        params,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::io(path, "not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::io(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::io(path, e))?;
    if header.version != VERSION {
        return Err(Error::io(path, format!("unsupported version {}", header.version)));
    }
    Ok((header, bytes[16 + hlen..].to_vec()))
}

pub fn load(path: &Path) -> Result<Network> {
    let (header, blob) = read_header(path)?;
    let expected = config_hash(&header.config, &header.architecture);
    if expected != header.config_hash {
        return Err(Error::Config(format!(
            "checkpoint {} declares config hash {} but its configuration hashes to {}",
            path.display(),
            header.config_hash,
            expected
        )));
    }
    let mut net = Network::discrete(header.config.clone(), &header.architecture, 0)?;
    if net.store.len() != header.params.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, architecture needs {}",
            header.params.len(),
            net.store.len()
        )));
    }
    for entry in &header.params {
        let id = net.store.id(&entry.name).ok_or_else(|| {
            Error::Config(format!("checkpoint parameter {} unknown to the architecture", entry.name))
        })?;
        let t = &mut net.store.get_mut(id).tensor;
        if t.shape().dims() != entry.shape {
            return Err(Error::Config(format!(
                "parameter {} has shape {:?}, architecture needs {}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let start = entry.offset * 8;
        let raw = blob
            .get(start..start + entry.len * 8)
            .ok_or_else(|| Error::io(path, "truncated parameter data"))?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::OpKind;
    use crate::task::Variant;
    use crate::tensor::Shape;
    use crate::test_util::uniform;

    fn net() -> Network {
        let arch = Architecture {
            scene: vec![OpKind::Conv3, OpKind::ResConv3, OpKind::Skip, OpKind::Conv1, OpKind::DilConv3x2, OpKind::ResDilConv3x2, OpKind::ResConv1],
            task: vec![OpKind::ResConv3; 7],
        };
        let mut n = Network::discrete(NetworkConfig::default(), &arch, 3).unwrap();
        let b = n.denoiser.proj_out.bias.unwrap();
        n.store.get_mut(b).tensor.data_mut().fill(-0.02);
        n
    }

    #[test]
    fn round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let a = net();
        save(&a, &p).unwrap();
        let b = load(&p).unwrap();
        assert_eq!(a.architecture(), b.architecture());
        assert_eq!(a.config, b.config);
        let y = uniform(1, Shape::new(1, 3, 8, 8), 0.0, 0.6);
        for v in Variant::ALL {
            assert_eq!(a.enhance(&y, v).unwrap().data(), b.enhance(&y, v).unwrap().data());
        }
    }

    #[test]
    fn supernets_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let s = Network::default_supernet(NetworkConfig::default(), 0).unwrap();
        assert!(matches!(save(&s, &dir.path().join("s.ckpt")), Err(Error::Config(_))));
    }

    #[test]
    fn corrupt_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"hello").unwrap();
        assert!(matches!(load(&p), Err(Error::Io { .. })));
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
        let good = dir.path().join("g.ckpt");
        save(&net(), &good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(&p), Err(Error::Io { .. })));
    }

    #[test]
    fn hash_mismatch_names_both_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&net(), &p).unwrap();
        let (mut header, blob) = read_header(&p).unwrap();
        header.architecture.scene[0] = OpKind::Conv1;
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        std::fs::write(&p, out).unwrap();
        let msg = load(&p).unwrap_err().to_string();
        assert!(msg.contains(&header.config_hash));
        assert!(msg.contains(&config_hash(&header.config, &header.architecture)));
    }
}
