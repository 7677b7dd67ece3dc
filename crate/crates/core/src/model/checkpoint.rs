//! Binary network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | content                                         |
//! |----------------|-------------------------------------------------|
//! | 8              | magic `PSSLNET\0`                               |
//! | 4              | format version (`u32`, currently 1)             |
//! | 8              | header length `H` (`u64`)                       |
//! | H              | UTF-8 JSON header: `meta`, `network`, `tensors` |
//! | 8 * sum(sizes) | `f64` payload, tensors in header order          |
//!
//! `tensors` lists `{name, shape}` for every parameter value, then its
//! momentum buffer (`<name>.velocity`), then batch-norm running statistics
//! (`bn<k>.running_mean`, `bn<k>.running_var`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::meta::ArtifactMeta;
use crate::numerics::{Rng, Tensor};

pub const MAGIC: &[u8; 8] = b"PSSLNET\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: ArtifactMeta,
    network: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

fn collect(net: &Network) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (_, name, p) in net.named_params() {
        out.push((name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
        out.push((
            format!("{name}.velocity"),
            p.velocity.shape().to_vec(),
            p.velocity.data().to_vec(),
        ));
    }
    for (k, (mean, var)) in net.running_stats().into_iter().enumerate() {
        out.push((format!("bn{k}.running_mean"), vec![mean.len()], mean.to_vec()));
        out.push((format!("bn{k}.running_var"), vec![var.len()], var.to_vec()));
    }
    out
}

pub fn to_bytes(net: &Network, meta: &ArtifactMeta) -> Vec<u8> {
    let tensors = collect(net);
    let header = Header {
        meta: meta.clone(),
        network: net.config().clone(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * net.param_count() * 2);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Network, ArtifactMeta)> {
    let bad = |m: &str| Error::Validation(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
    let mut net = Network::build(&header.network, &mut Rng::new(0))?;

    let expected = collect(&net);
    if expected.len() != header.tensors.len() {
        return Err(bad("tensor count does not match the network config"));
    }
    let mut payload = &bytes[20 + hlen..];
    let mut values = Vec::with_capacity(expected.len());
    for ((name, shape, _), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(bad(&format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let len: usize = shape.iter().product();
        if payload.len() < 8 * len {
            return Err(bad("truncated payload"));
        }
        let data: Vec<f64> = payload[..8 * len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        payload = &payload[8 * len..];
        values.push(Tensor::new(shape.clone(), data)?);
    }
    if !payload.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }

    let mut it = values.into_iter();
    for layer in net.params_mut() {
        for p in layer {
            p.value = it.next().unwrap();
            p.velocity = it.next().unwrap();
        }
    }
    for (mean, var) in net.running_stats_mut() {
        *mean = it.next().unwrap().into_data();
        *var = it.next().unwrap().into_data();
        if var.iter().any(|&v| v <= 0.0) {
            return Err(bad("batch-norm running variance must be positive"));
        }
    }
    Ok((net, header.meta))
}

pub fn save(net: &Network, meta: &ArtifactMeta, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Network, ArtifactMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::parse(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    #[test]
    fn round_trip_is_exact() {
        let mut net = Network::build(&NetworkConfig::desk_default(1, 8), &mut Rng::new(4)).unwrap();
        let mut rng = Rng::new(2);
        let batch = Tensor::from_fn(&[3, 1, 8, 8], |_| rng.uniform());
        net.forward(&batch, &mut rng).unwrap();
        let meta = ArtifactMeta::new(4, "abc");
        let bytes = to_bytes(&net, &meta);
        let (back, meta2) = from_bytes(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(to_bytes(&back, &meta), bytes);
        let mut a = net.clone();
        let mut b = back;
        a.set_mode(Mode::Eval);
        b.set_mode(Mode::Eval);
        assert_eq!(a.predict(&batch).unwrap(), b.predict(&batch).unwrap());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let net = Network::build(&NetworkConfig::desk_default(1, 8), &mut Rng::new(4)).unwrap();
        let bytes = to_bytes(&net, &ArtifactMeta::new(0, "x"));
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut wrong = bytes;
        wrong[0] = b'X';
        assert!(from_bytes(&wrong).is_err());
    }
}
