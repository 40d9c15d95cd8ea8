//! Binary checkpoints. Layout, all integers and floats little-endian:
//!
//! ```text
//! "DEALCKPT" u16 version u64 seed u64 iteration
//! u32 len  config text (UTF-8)
//! u32 n    { u16 len name, f64 value }                      run state scalars
//! u32 n    { u16 len name, u8 trainable, u8 ndim, u32 dims[ndim], f32 data[] }
//! u32 n    { u16 len name, u8 kind, f64 lr beta1 beta2 eps, u64 steps,
//!            u32 n { u16 len name, u32 len, f32 m[len], f32 v[len] } }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::IoError;
use crate::tensor::{OptimizerKind, OptimizerState, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DEALCKPT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub iteration: u64,
    pub config: String,
    pub state: Vec<(String, f64)>,
    pub params: ParamStore<f32>,
    pub optimizers: Vec<(String, OptimizerState<f32>)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], IoError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| IoError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], IoError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, IoError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| IoError::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
    fn string(&mut self, n: usize) -> Result<String, IoError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| IoError::Checkpoint("invalid UTF-8".into()))
    }
    fn name(&mut self) -> Result<String, IoError> {
        let n = self.u16()? as usize;
        self.string(n)
    }
}

impl Checkpoint {
    pub fn state_value(&self, name: &str) -> Option<f64> {
        self.state.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    pub fn optimizer(&self, name: &str) -> Option<&OptimizerState<f32>> {
        self.optimizers.iter().find(|(k, _)| k == name).map(|(_, o)| o)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u16(VERSION);
        w.u64(self.seed);
        w.u64(self.iteration);
        w.u32(self.config.len() as u32);
        w.0.extend_from_slice(self.config.as_bytes());
        w.u32(self.state.len() as u32);
        for (k, v) in &self.state {
            w.name(k);
            w.f64(*v);
        }
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.name(name);
            w.u8(t.requires_grad as u8);
            w.u8(t.shape().len() as u8);
            for d in t.shape() {
                w.u32(*d as u32);
            }
            w.f32s(t.data());
        }
        w.u32(self.optimizers.len() as u32);
        for (name, o) in &self.optimizers {
            w.name(name);
            w.u8(match o.kind {
                OptimizerKind::Sgd => 0,
                OptimizerKind::Adam => 1,
            });
            for v in [o.lr, o.beta1, o.beta2, o.eps] {
                w.f64(v);
            }
            w.u64(o.step_count);
            w.u32(o.m.len() as u32);
            for (k, m) in &o.m {
                let v = o.v.get(k).map(Vec::as_slice).unwrap_or(&[]);
                w.name(k);
                w.u32(m.len() as u32);
                w.f32s(m);
                w.f32s(v);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(IoError::Checkpoint("missing DEALCKPT magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(IoError::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let seed = r.u64()?;
        let iteration = r.u64()?;
        let n = r.u32()? as usize;
        let config = r.string(n)?;
        let mut state = Vec::new();
        for _ in 0..r.u32()? {
            let k = r.name()?;
            state.push((k, r.f64()?));
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let trainable = r.u8()? != 0;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel = shape.iter().product();
            let data = r.f32s(numel)?;
            let mut t = Tensor::new(shape, data).map_err(|e| IoError::Checkpoint(format!("{name}: {e}")))?;
            t.requires_grad = trainable;
            params.insert(name, t);
        }
        let mut optimizers = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let kind = match r.u8()? {
                0 => OptimizerKind::Sgd,
                1 => OptimizerKind::Adam,
                k => return Err(IoError::Checkpoint(format!("unknown optimizer kind {k}"))),
            };
            let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let step_count = r.u64()?;
            let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
            for _ in 0..r.u32()? {
                let k = r.name()?;
                let len = r.u32()? as usize;
                m.insert(k.clone(), r.f32s(len)?);
                v.insert(k, r.f32s(len)?);
            }
            optimizers.push((
                name,
                OptimizerState {
                    kind,
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step_count,
                    m,
                    v,
                },
            ));
        }
        if r.pos != bytes.len() {
            return Err(IoError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            seed,
            iteration,
            config,
            state,
            params,
            optimizers,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IoError> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| IoError::file(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| IoError::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IoError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| IoError::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}
