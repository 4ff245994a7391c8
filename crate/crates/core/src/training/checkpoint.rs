//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "CMN1"  u32 version
//! u64 len, JSON {config, spec, optimizer}
//! u64 n_params, then per tensor:
//!     u64 len, name (UTF-8)   u32 rank   rank x u64 extent   f64 values
//! u64 n_velocity, then per tensor the same record keyed by parameter name
//! u64 FNV-1a hash of every preceding byte
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::{OptimizerState, ParamSet, Sgd, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CMN1";
const MAX_NAME: u64 = 4096;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub spec: ModelSpec,
    pub optimizer: OptimizerState,
    pub params: ParamSet,
    /// Momentum buffers keyed by parameter name, in parameter order.
    pub velocity: Vec<(String, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    config: TrainConfig,
    spec: ModelSpec,
    optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.spec.clone(), self.params.clone())
    }

    /// Optimizer with restored momentum, for resuming or fine-tuning.
    pub fn optimizer(&self) -> Result<Sgd> {
        let mut sgd = Sgd::new(self.optimizer.clone(), &self.params);
        for (name, v) in &self.velocity {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| Error::Format(format!("velocity for unknown parameter {name}")))?;
            sgd.set_velocity(id.index(), v)?;
        }
        Ok(sgd)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    put_u64(buf, name.len() as u64);
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        put_u64(buf, d as u64);
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let snap = serde_json::to_vec(&Snapshot {
        config: ckpt.config.clone(),
        spec: ckpt.spec.clone(),
        optimizer: ckpt.optimizer.clone(),
    })?;
    put_u64(&mut buf, snap.len() as u64);
    buf.extend_from_slice(&snap);
    put_u64(&mut buf, ckpt.params.len() as u64);
    for (name, t) in ckpt.params.iter() {
        put_tensor(&mut buf, name, t.shape(), t.data());
    }
    put_u64(&mut buf, ckpt.velocity.len() as u64);
    for (name, v) in &ckpt.velocity {
        let shape = ckpt
            .params
            .by_name(name)
            .map(|t| t.shape().to_vec())
            .unwrap_or_else(|| vec![v.len()]);
        put_tensor(&mut buf, name, &shape, v);
    }
    let hash = fnv1a(&buf);
    put_u64(&mut buf, hash);
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str, unit: usize) -> Result<usize> {
        let n = self.u64(what)?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).map_or(true, |b| b > remaining) {
            return Err(Error::Format(format!("{what} length {n} exceeds file size")));
        }
        Ok(n as usize)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.len("tensor name", 1)?;
        if n as u64 > MAX_NAME {
            return Err(Error::Format(format!("tensor name of {n} bytes")));
        }
        let name = std::str::from_utf8(self.take(n, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: u64 = 1;
        for _ in 0..rank {
            let d = self.u64("extent")?;
            count = count
                .checked_mul(d)
                .filter(|c| c * 8 <= (self.bytes.len() - self.pos) as u64)
                .ok_or_else(|| Error::Format(format!("tensor {name} extents exceed file size")))?;
            shape.push(d as usize);
        }
        let raw = self.take(count as usize * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    if bytes.len() < 16 {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(Error::Format("checksum mismatch".into()));
    }

    let mut c = Cursor { bytes: body, pos: 8 };
    let n = c.len("config snapshot", 1)?;
    let snap: Snapshot = serde_json::from_slice(c.take(n, "config snapshot")?)
        .map_err(|e| Error::Format(format!("config snapshot: {e}")))?;

    let n_params = c.len("parameter count", 1)?;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let (name, t) = c.tensor()?;
        params.add(name, t).map_err(|e| Error::Format(e.to_string()))?;
    }
    let n_vel = c.len("velocity count", 1)?;
    let mut velocity = Vec::with_capacity(n_vel);
    for _ in 0..n_vel {
        let (name, t) = c.tensor()?;
        match params.by_name(&name) {
            Some(p) if p.shape() == t.shape() => velocity.push((name, t.into_data())),
            _ => return Err(Error::Format(format!("velocity {name} does not match a parameter"))),
        }
    }
    if c.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - c.pos)));
    }
    // Validates names and shapes against the architecture.
    Model::from_params(snap.spec.clone(), params.clone())?;
    Ok(Checkpoint {
        config: snap.config,
        spec: snap.spec,
        optimizer: snap.optimizer,
        params,
        velocity,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(Error::file(path))?;
    write_checkpoint(std::io::BufWriter::new(f), ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(Error::file(path))?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langrep::Vocabulary;
    use crate::model::ModelKind;

    fn ckpt(kind: ModelKind) -> Checkpoint {
        let config = TrainConfig {
            model: kind,
            embed_dim: 4,
            hidden_dim: 3,
            ..Default::default()
        };
        let model = Model::new(config.model_spec(Vocabulary::shapeworld()), 9).unwrap();
        let velocity = model
            .params
            .iter()
            .enumerate()
            .map(|(k, (n, t))| (n.to_string(), vec![k as f64 * 0.5; t.len()]))
            .collect();
        Checkpoint {
            optimizer: config.optimizer_state().unwrap(),
            spec: model.spec.clone(),
            params: model.params,
            velocity,
            config,
        }
    }

    fn bytes(c: &Checkpoint) -> Vec<u8> {
        let mut b = Vec::new();
        write_checkpoint(&mut b, c).unwrap();
        b
    }

    #[test]
    fn round_trip_is_bitwise() {
        for kind in [ModelKind::Cmn, ModelKind::BaselineLoc] {
            let c = ckpt(kind);
            let back = read_checkpoint(bytes(&c).as_slice()).unwrap();
            assert_eq!(back.velocity, c.velocity);
            assert_eq!(back.config, c.config);
            for ((n1, a), (n2, b)) in c.params.iter().zip(back.params.iter()) {
                assert_eq!(n1, n2);
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
            assert_eq!(bytes(&back), bytes(&c));
        }
    }

    #[test]
    fn corruption_is_a_format_error() {
        let good = bytes(&ckpt(ModelKind::Cmn));
        let mut cases = vec![good[..good.len() / 2].to_vec(), b"CMN2".to_vec(), Vec::new()];
        let mut magic = good.clone();
        magic[0] = b'X';
        cases.push(magic);
        let mut version = good.clone();
        version[4] = 7;
        cases.push(version);
        let mut flip = good.clone();
        let mid = flip.len() / 2;
        flip[mid] ^= 0x10;
        cases.push(flip);
        for c in cases {
            assert!(matches!(read_checkpoint(c.as_slice()), Err(Error::Format(_))));
        }
    }

    #[test]
    fn optimizer_restores_velocity() {
        let c = ckpt(ModelKind::Cmn);
        let sgd = c.optimizer().unwrap();
        assert_eq!(sgd.velocity()[3], c.velocity[3].1);
    }
}
