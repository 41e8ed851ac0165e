//! Binary weight files.
//!
//! Layout, all integers little-endian: the magic bytes, a `u32` version, the
//! network config as TOML text (`u32` length + UTF-8), the `u64` init seed,
//! a `u32` tensor count, then per tensor its name (`u32` length + UTF-8), a
//! `u32` rank, `u64` dimensions and the values as `f32`.

use std::path::Path;

use super::network::Network;
use super::{NetError, NetworkConfig};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"IMUPOSEW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn weights_to_bytes(net: &Network<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * net.parameter_count() + 4096);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let config = toml::to_string(&net.config).expect("network config serializes");
    put_str(&mut out, &config);
    out.extend_from_slice(&net.seed.to_le_bytes());
    let tensors = net.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_str(&mut out, &name);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NetError::WeightsFormat(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, NetError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NetError::WeightsFormat("string is not UTF-8".into()))
    }
}

pub fn load_weights(bytes: &[u8]) -> Result<Network<f32>, NetError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(WEIGHTS_MAGIC.len())? != WEIGHTS_MAGIC {
        return Err(NetError::WeightsFormat("not a weights file".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(NetError::WeightsFormat(format!("unsupported version {version}")));
    }
    let config: NetworkConfig =
        toml::from_str(&r.string()?).map_err(|e| NetError::WeightsFormat(format!("embedded config: {e}")))?;
    config.validate()?;
    let mut net = Network::<f32>::zeros(&config);
    net.seed = r.u64()?;
    let expected: Vec<(String, Vec<usize>)> =
        net.tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(NetError::WeightsFormat(format!("{count} tensors, config implies {}", expected.len())));
    }
    let mut views = net.tensors_mut();
    for (i, (name, shape)) in expected.iter().enumerate() {
        let got = r.string()?;
        if &got != name {
            return Err(NetError::WeightsFormat(format!("tensor {i} is '{got}', expected '{name}'")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(NetError::WeightsFormat(format!("tensor '{name}' has shape {dims:?}, expected {shape:?}")));
        }
        let data = r.take(4 * views[i].len())?;
        for (dst, chunk) in views[i].iter_mut().zip(data.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    drop(views);
    if r.pos != bytes.len() {
        return Err(NetError::WeightsFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if !net.is_finite() {
        return Err(NetError::WeightsFormat("non-finite weight".into()));
    }
    Ok(net)
}

pub fn save_weights(path: &Path, net: &Network<f32>) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, weights_to_bytes(net))
}

/// Reads a weights file; I/O failures surface as [`NetError::WeightsFormat`].
pub fn read_weights(path: &Path) -> Result<Network<f32>, NetError> {
    let bytes = std::fs::read(path).map_err(|e| NetError::WeightsFormat(format!("{}: {e}", path.display())))?;
    load_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetworkConfig {
        let mut c = NetworkConfig::three_stage();
        c.hidden = vec![4, 3, 5];
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let net = Network::<f32>::init(&small(), 9, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let bytes = weights_to_bytes(&net);
        let back = load_weights(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(weights_to_bytes(&back), bytes);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let net = Network::<f32>::init(&small(), 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = weights_to_bytes(&net);
        assert!(load_weights(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(load_weights(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(load_weights(&bad).is_err());
        let mut nan = bytes;
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(load_weights(&nan).is_err());
    }
}
