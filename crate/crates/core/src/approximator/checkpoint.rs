use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::adam::{AdamConfig, OptimState};
use super::net::Net;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSTEERCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named `f64` array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<u64>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len() as u64],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }
}

/// Ordered collection of named tensors.
///
/// Layout (little endian): magic, `u32` version, `u32` entry count, then per
/// entry a `u32`-prefixed UTF-8 name, `u32` rank, `u64` dims and the data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = t;
        } else {
            self.entries.push((name, t));
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.data.len() != 1 {
            return Err(Error::Checkpoint(format!("entry `{name}` is not a scalar")));
        }
        Ok(t.data[0])
    }

    pub fn put_net(&mut self, prefix: &str, net: &Net) {
        self.insert(
            format!("{prefix}.sizes"),
            Tensor::vector(net.sizes().iter().map(|&s| s as f64).collect()),
        );
        self.insert(format!("{prefix}.params"), Tensor::vector(net.params().to_vec()));
    }

    pub fn get_net(&self, prefix: &str) -> Result<Net> {
        let sizes: Vec<usize> = self
            .get(&format!("{prefix}.sizes"))?
            .data
            .iter()
            .map(|&s| s as usize)
            .collect();
        let params = self.get(&format!("{prefix}.params"))?.data.clone();
        Net::from_params(&sizes, params)
            .map_err(|e| Error::Checkpoint(format!("network `{prefix}`: {e}")))
    }

    pub fn put_optim(&mut self, prefix: &str, s: &OptimState) {
        let c = s.config;
        self.insert(
            format!("{prefix}.config"),
            Tensor::vector(vec![c.lr, c.beta1, c.beta2, c.eps]),
        );
        self.insert(format!("{prefix}.m"), Tensor::vector(s.m.clone()));
        self.insert(format!("{prefix}.v"), Tensor::vector(s.v.clone()));
        self.insert(format!("{prefix}.step"), Tensor::scalar(s.step as f64));
    }

    pub fn get_optim(&self, prefix: &str) -> Result<OptimState> {
        let c = &self.get(&format!("{prefix}.config"))?.data;
        if c.len() != 4 {
            return Err(Error::Checkpoint(format!("optimizer `{prefix}` config malformed")));
        }
        let m = self.get(&format!("{prefix}.m"))?.data.clone();
        let v = self.get(&format!("{prefix}.v"))?.data.clone();
        if m.len() != v.len() {
            return Err(Error::Checkpoint(format!("optimizer `{prefix}` moment lengths differ")));
        }
        Ok(OptimState {
            config: AdamConfig {
                lr: c[0],
                beta1: c[1],
                beta2: c[2],
                eps: c[3],
            },
            m,
            v,
            step: self.scalar(&format!("{prefix}.step"))? as u64,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, t) in &self.entries {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
            for &d in &t.shape {
                w.write_u64::<LittleEndian>(d)?;
            }
            w.write_u64::<LittleEndian>(t.data.len() as u64)?;
            for &v in &t.data {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let trunc = |_| bad("truncated checkpoint");
        let n = r.read_u32::<LittleEndian>().map_err(trunc)?;
        let mut ck = Checkpoint::new();
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            if len > 1 << 16 {
                return Err(bad("entry name too long"));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(trunc)?;
            let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
            let rank = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            if rank > 8 {
                return Err(bad("tensor rank too large"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>().map_err(trunc)?);
            }
            let count = r.read_u64::<LittleEndian>().map_err(trunc)?;
            let expected: u64 = shape.iter().product();
            if count != expected {
                return Err(Error::Checkpoint(format!(
                    "entry `{name}` has {count} values for shape {shape:?}"
                )));
            }
            if count > 1 << 32 {
                return Err(bad("tensor too large"));
            }
            let mut data = Vec::with_capacity(count as usize);
            for _ in 0..count {
                data.push(r.read_f64::<LittleEndian>().map_err(trunc)?);
            }
            ck.entries.push((name, Tensor { shape, data }));
        }
        Ok(ck)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
