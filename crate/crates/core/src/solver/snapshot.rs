//! Binary training snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BNFS" | u32 version | u64 iter | [u8; 32] config digest
//! | u32 word count | u64 words...            (epoch order seed, then generator state)
//! | u32 tensor count | per tensor: u32 name length, UTF-8 name,
//!                      u32 ndim, u32 dims..., f32 data...
//! | u64 checksum                             (first 8 bytes of SHA-256 over everything before it)
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::SolverError;
use crate::layers::ParamSet;
use crate::netdef::NetDef;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BNFS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub version: u32,
    pub iter: u64,
    pub config_digest: [u8; 32],
    /// `[epoch_order_seed, seed words x4, stream, word position lo, hi]`.
    pub rng_words: Vec<u64>,
    pub tensors: Vec<NamedTensor>,
}

pub fn rng_words(epoch_order_seed: u64, rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut words = vec![epoch_order_seed];
    words.extend(seed.chunks(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))));
    let pos = rng.get_word_pos();
    words.extend([rng.get_stream(), pos as u64, (pos >> 64) as u64]);
    words
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Value and momentum of every learnable, then bn running statistics.
pub fn param_tensors(params: &ParamSet<f32>) -> Vec<NamedTensor> {
    let entry = |name: String, t: &Tensor<f32>| NamedTensor { name, dims: t.shape().to_vec(), data: t.data().to_vec() };
    let mut out = Vec::new();
    for (name, p) in params.learnables() {
        out.push(entry(name.clone(), &p.value));
        out.push(entry(format!("{name}.momentum"), &p.velocity));
    }
    for (name, s) in &params.bn {
        let c = s.channels();
        out.push(NamedTensor { name: format!("{name}.running_mean"), dims: vec![c], data: s.running_mean.clone() });
        out.push(NamedTensor { name: format!("{name}.running_var"), dims: vec![c], data: s.running_var.clone() });
    }
    out
}

impl Snapshot {
    pub fn epoch_order_seed(&self) -> u64 {
        self.rng_words[0]
    }

    /// Generator state stored in the snapshot.
    pub fn rng(&self) -> Result<ChaCha8Rng, SolverError> {
        use rand::SeedableRng;
        if self.rng_words.len() != 8 {
            return Err(SolverError::Integrity(format!("expected 8 generator words, found {}", self.rng_words.len())));
        }
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_mut(8).zip(&self.rng_words[1..5]) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.rng_words[5]);
        rng.set_word_pos(self.rng_words[6] as u128 | (self.rng_words[7] as u128) << 64);
        Ok(rng)
    }

    /// Parameters of `net` filled from the snapshot; every tensor must match
    /// by name and shape.
    pub fn params(&self, net: &NetDef) -> Result<ParamSet<f32>, SolverError> {
        let mut params = ParamSet::<f32>::init(net, 0)?;
        let expected = param_tensors(&params);
        let names: Vec<&str> = self.tensors.iter().map(|t| t.name.as_str()).collect();
        let wanted: Vec<&str> = expected.iter().map(|t| t.name.as_str()).collect();
        if names != wanted {
            return Err(SolverError::Mismatch(format!(
                "snapshot holds tensors [{}], net '{}' needs [{}]",
                names.join(", "),
                net.name,
                wanted.join(", ")
            )));
        }
        for (t, e) in self.tensors.iter().zip(&expected) {
            if t.dims != e.dims {
                return Err(SolverError::Mismatch(format!("tensor '{}' has dims {:?}, net needs {:?}", t.name, t.dims, e.dims)));
            }
        }
        let mut it = self.tensors.iter();
        for (_, p) in params.learnables_mut() {
            p.value.data_mut().copy_from_slice(&it.next().expect("checked").data);
            p.velocity.data_mut().copy_from_slice(&it.next().expect("checked").data);
        }
        for s in params.bn.values_mut() {
            s.running_mean.copy_from_slice(&it.next().expect("checked").data);
            s.running_var.copy_from_slice(&it.next().expect("checked").data);
        }
        Ok(params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.version.to_le_bytes());
        b.extend_from_slice(&self.iter.to_le_bytes());
        b.extend_from_slice(&self.config_digest);
        b.extend_from_slice(&(self.rng_words.len() as u32).to_le_bytes());
        for w in &self.rng_words {
            b.extend_from_slice(&w.to_le_bytes());
        }
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            b.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            b.extend_from_slice(t.name.as_bytes());
            b.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SolverError> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..4] != MAGIC {
            return Err(SolverError::Integrity("not a snapshot (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if checksum(body) != stored {
            return Err(SolverError::Integrity("checksum mismatch (truncated or corrupted file)".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(SolverError::Version(version));
        }
        let iter = r.u64()?;
        let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let words = r.u32()? as usize;
        let rng_words = (0..words).map(|_| r.u64()).collect::<Result<_, _>>()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| SolverError::Integrity("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| SolverError::Integrity("tensor too large".into()))?)?;
            let data = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(SolverError::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Snapshot { version, iter, config_digest, rng_words, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SolverError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SolverError::Integrity("unexpected end of snapshot".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SolverError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, SolverError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_snapshot(snapshot: &Snapshot, path: &Path) -> Result<(), SolverError> {
    fs::write(path, snapshot.to_bytes()).map_err(|source| SolverError::Io { path: path.to_path_buf(), source })
}

pub fn load_snapshot(path: &Path) -> Result<Snapshot, SolverError> {
    let bytes = fs::read(path).map_err(|source| SolverError::Io { path: path.to_path_buf(), source })?;
    Snapshot::from_bytes(&bytes)
}
