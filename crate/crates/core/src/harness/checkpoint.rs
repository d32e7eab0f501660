//! Binary training snapshots.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "FFRT" | u32 version
//! u32 len | config text (UTF-8)
//! u64 step
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! f64 lr, beta1, beta2, eps, weight_decay | u64 optimizer step
//! u32 tensor count, then per tensor: u32 len | name | 4 x u32 shape
//! f64 payload: every parameter, then every first moment, then every second moment
//! [u8; 32] SHA-256 of all preceding bytes
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::network::param_specs;
use crate::numerics::{AdamWConfig, AdamWState, Tensor};
use crate::params::ParamSet;

use super::config::RunConfig;

pub const MAGIC: [u8; 4] = *b"FFRT";
pub const VERSION: u32 = 1;

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamSet,
    pub optim: AdamWState,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_text();
        b.extend_from_slice(&(text.len() as u32).to_le_bytes());
        b.extend_from_slice(text.as_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.rng.get_seed());
        b.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        b.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        let c = self.optim.config;
        for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.optim.step.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for group in [self.params.tensors(), &self.optim.m[..], &self.optim.v[..]] {
            for t in group {
                for v in t.data() {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        use CheckpointError::*;
        if bytes.len() < 8 {
            return Err(Truncated.into());
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(BadMagic(magic).into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(UnsupportedVersion(version).into());
        }
        if bytes.len() < 8 + 32 {
            return Err(Truncated.into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ChecksumMismatch.into());
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Malformed("config text is not UTF-8".into()))?;
        let config = RunConfig::parse(text).map_err(|e| Malformed(format!("embedded config: {e}")))?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let mut hyper = [0.0; 5];
        for h in &mut hyper {
            *h = r.f64()?;
        }
        let adam_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut names = Vec::with_capacity(count.min(1 << 16));
        let mut shapes = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            names.push(name);
            shapes.push(shape);
        }
        let read_group = |r: &mut Reader<'_>| -> Result<Vec<Tensor>> {
            shapes
                .iter()
                .map(|&s| {
                    let n: usize = s.iter().product();
                    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Tensor::new(s, data)
                })
                .collect()
        };
        let params = read_group(&mut r)?;
        let m = read_group(&mut r)?;
        let v = read_group(&mut r)?;
        if r.pos != body.len() {
            return Err(Malformed(format!("{} trailing bytes", body.len() - r.pos)).into());
        }
        let params = ParamSet::from_parts(names, params).map_err(|e| Malformed(e.to_string()))?;
        params
            .validate(&param_specs(&config.model)?)
            .map_err(|e| Malformed(e.to_string()))?;
        let optim = AdamWState {
            config: AdamWConfig {
                lr: hyper[0],
                beta1: hyper[1],
                beta2: hyper[2],
                eps: hyper[3],
                weight_decay: hyper[4],
            },
            step: adam_step,
            m,
            v,
        };
        Ok(Self {
            config,
            step,
            params,
            optim,
            rng,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &ck.encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelParams;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let config = RunConfig::parse("model.preset = tiny\nseed = 4").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::init(config.model.clone(), &mut rng).unwrap().values;
        let mut optim = AdamWState::new(config.optimizer.adamw(), params.shapes());
        optim.step = 3;
        optim.m[0].data_mut()[0] = 0.25;
        rng.next_u64();
        Checkpoint {
            config,
            step: 3,
            params,
            optim,
            rng,
        }
    }

    #[test]
    fn round_trip_is_canonical() {
        let ck = sample();
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"FFRT");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        let mut a = ck.rng.clone();
        let mut b = back.rng.clone();
        assert_eq!(a.next_u64(), b.next_u64());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.ffrt");
        save_checkpoint(&p, &ck).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn corruption_is_typed() {
        let bytes = sample().encode();
        let err = |b: &[u8]| match Checkpoint::decode(b) {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("{other:?}"),
        };
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert_eq!(err(&flipped), CheckpointError::ChecksumMismatch);
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert_eq!(err(&magic), CheckpointError::BadMagic(*b"XFRT"));
        let mut ver = bytes.clone();
        ver[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert_eq!(err(&ver), CheckpointError::UnsupportedVersion(VERSION + 1));
        assert_eq!(err(&bytes[..6]), CheckpointError::Truncated);
        // a short body with a valid digest
        let mut short = bytes[..100].to_vec();
        let d = Sha256::digest(&short);
        short.extend_from_slice(&d);
        assert_eq!(err(&short), CheckpointError::Truncated);
    }
}
