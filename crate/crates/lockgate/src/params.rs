//! Named parameter store with deterministic init, freeze flags, and a binary
//! checkpoint format.
//!
//! Initialization draws from a per-parameter RNG stream keyed by
//! (store seed, parameter name), so adding or reordering parameters never
//! changes the values of existing ones, and two stores built from the same
//! seed are bit-identical.
//!
//! # Checkpoint byte layout (version 1)
//!
//! All integers little-endian. Entries are sorted by name.
//!
//! ```text
//! magic      4 bytes   "LGCP"
//! version    u32       1
//! init_seed  u64       store seed
//! count      u32       number of entries
//! entry:
//!   name_len u32
//!   name     name_len bytes, utf-8
//!   rows     u32
//!   cols     u32
//!   frozen   u8        0 or 1
//!   payload  rows*cols f64, little-endian
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"LGCP";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, entries: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init from the stream keyed
    /// by (seed, name).
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) {
        assert!(!self.entries.contains_key(name), "duplicate parameter {name}");
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut r = rng::stream(self.seed, name);
        let data: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-bound..bound)).collect();
        self.entries.insert(name.to_string(), Param {
            value: Tensor { rows, cols, data },
            frozen: false,
        });
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        assert!(!self.entries.contains_key(name), "duplicate parameter {name}");
        self.entries.insert(name.to_string(), Param {
            value: Tensor::zeros(rows, cols),
            frozen: false,
        });
    }

    /// Direct insert, used by tests and by checkpoint load.
    pub fn insert_value(&mut self, name: &str, value: Tensor) {
        self.entries.insert(name.to_string(), Param { value, frozen: false });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .frozen = frozen;
    }

    /// Freeze or thaw every parameter whose name starts with one of the
    /// given prefixes.
    pub fn set_frozen_prefixes(&mut self, prefixes: &[&str], frozen: bool) {
        for (name, p) in self.entries.iter_mut() {
            if prefixes.iter().any(|pre| name.starts_with(pre)) {
                p.frozen = frozen;
            }
        }
    }

    pub fn thaw_all(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = false;
        }
    }

    /// Sorted iteration; the order is the checkpoint order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.all_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, p) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(p.value.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(p.value.cols as u32).to_le_bytes());
            buf.push(p.frozen as u8);
            for v in &p.value.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let seed = cur.u64()?;
        let count = cur.u32()? as usize;
        let mut store = ParamStore::new(seed);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let frozen = cur.u8()? != 0;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(cur.f64()?);
            }
            store.entries.insert(name, Param { value: Tensor { rows, cols, data }, frozen });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
