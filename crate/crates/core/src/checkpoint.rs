//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (config text, architecture hash, parameter table), then every
//! parameter as little-endian `f32` in table order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RFENETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    arch_hash: String,
    iteration: usize,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Hash of every parameter name and shape; two stores with the same hash
/// describe the same architecture.
pub fn arch_hash(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for (name, p) in store.iter() {
        h.update(name.as_bytes());
        h.update(format!("{:?}{}\n", p.value.shape(), p.trainable).as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes the checkpoint and returns the sha256 of the file.
pub fn save(path: &Path, cfg: &Config, store: &ParamStore<f32>, iteration: usize) -> Result<String> {
    let header = Header {
        config: cfg.render(),
        arch_hash: arch_hash(store),
        iteration,
        params: store
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(json.len() + 4 * store.iter().map(|(_, p)| p.value.numel()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

pub struct Checkpoint {
    pub config: Config,
    pub arch_hash: String,
    pub iteration: usize,
    pub params: ParamStore<f32>,
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
    let config = Config::parse(&header.config).map_err(|e| bad(&format!("embedded config: {e}")))?;
    let mut params = ParamStore::new();
    let mut off = 20 + hlen;
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(off..off + 4 * n).ok_or_else(|| bad("truncated parameter data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(&entry.name, Tensor::new(&entry.shape, data), entry.trainable);
        off += 4 * n;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    if arch_hash(&params) != header.arch_hash {
        return Err(bad("stored architecture hash does not match its parameter table"));
    }
    Ok(Checkpoint {
        config,
        arch_hash: header.arch_hash,
        iteration: header.iteration,
        params,
    })
}

/// Builds the network described by `cfg` and fills it from the checkpoint.
/// Fails when the checkpoint was made for a different architecture.
pub fn restore(ckpt: &Checkpoint, cfg: &Config) -> Result<(Network, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let net = Network::new(&cfg.model, &mut store)?;
    let want = arch_hash(&store);
    if want != ckpt.arch_hash {
        return Err(Error::Checkpoint(format!(
            "architecture hash mismatch: checkpoint has {}, config builds {}",
            &ckpt.arch_hash[..12],
            &want[..12]
        )));
    }
    Ok((net, ckpt.params.clone()))
}
