//! Binary checkpoints: magic, version, a JSON header with the model config,
//! then the parameters as little-endian `f64`. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, PolicyParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TUNECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    n_params: usize,
}

pub fn encode(params: &PolicyParams) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        n_params: params.len(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for x in &params.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<PolicyParams> {
    let bad = |m: &str| Error::Input(format!("malformed checkpoint: {m}"));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let raw = &bytes[12 + hlen..];
    if raw.len() != 8 * header.n_params {
        return Err(bad("parameter payload size mismatch"));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PolicyParams::from_data(header.config, data)
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = PolicyParams::init(ModelConfig::for_vocab(40), 9).unwrap();
        let q = decode(&encode(&p)).unwrap();
        assert_eq!(p, q);
        let bits = |v: &PolicyParams| v.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
        let fa = p.forward(&[1, 2, 3], &[2]).unwrap();
        let fb = q.forward(&[1, 2, 3], &[2]).unwrap();
        assert_eq!(fa.logits, fb.logits);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"nope").is_err());
        let mut bytes = encode(&PolicyParams::zeros(ModelConfig::for_vocab(10)).unwrap());
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }
}
