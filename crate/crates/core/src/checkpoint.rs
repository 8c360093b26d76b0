//! Binary checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes   "TCNNCKPT"
//! version    u32       1
//! arch       u32 length + UTF-8 name (e.g. "minps-maxps")
//! seed       u64
//! epoch      u32       epoch the parameters were taken from
//! accuracy   f64       test accuracy at that epoch
//! input      3 x u32   H, W, C
//! count      u32       number of tensors
//! tensors    count x { rank u32, rank x u64 dims, prod(dims) x f64 }
//! ```
//!
//! Tensors appear in [`Network::params`] order. Trailing bytes are an error.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Architecture, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TCNNCKPT";
pub const VERSION: u32 = 1;
const FORMAT: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub seed: u64,
    pub epoch: usize,
    pub accuracy: f64,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let name = self.network.arch().name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        out.extend_from_slice(&self.accuracy.to_le_bytes());
        for d in self.network.input_dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let params = self.network.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for t in params {
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format(FORMAT, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(FORMAT, format!("unsupported version {version}")));
        }
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::format(FORMAT, "arch name is not UTF-8"))?;
        let arch: Architecture = name.parse()?;
        let seed = r.u64()?;
        let epoch = r.u32()? as usize;
        let accuracy = r.f64()?;
        let input_dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::format(FORMAT, format!("tensor rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::format(FORMAT, format!("tensor {dims:?} exceeds file size")))?;
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.push(Tensor::from_vec(dims, data)?);
        }
        if r.remaining() != 0 {
            return Err(Error::format(FORMAT, format!("{} trailing bytes", r.remaining())));
        }
        let network = Network::from_params(arch, input_dims, params)?;
        Ok(Checkpoint {
            network,
            seed,
            epoch,
            accuracy,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(FORMAT, "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
