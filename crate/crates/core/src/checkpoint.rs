//! Binary checkpoint format.
//!
//! ```text
//! "ELF1" | version u32 | epoch u32 | count u32 |
//!   count × ( name_len u16 | name | rank u8 | dims u32 × rank | dtype u8 | payload )
//! | crc32 u32
//! ```
//!
//! All integers and `f32` payloads are little-endian; the CRC covers every
//! preceding byte. Optimizer moments are stored as extra tensors under the
//! `adam.m/` and `adam.v/` prefixes with the step count in `adam.t`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ElfModel;
use crate::nn::ParameterStore;
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"ELF1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";
const STEP_NAME: &str = "adam.t";

/// Largest step count an `f32` holds exactly.
const MAX_STEP: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Malformed(format!("name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Malformed(format!("rank too large: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Malformed(format!("dimension too large: {name}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(DTYPE_F32);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    let count = u32::try_from(ckpt.tensors.len()).map_err(|_| Error::Malformed("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &ckpt.tensors {
        put_tensor(&mut out, name, t)?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Malformed("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotACheckpoint);
    }
    if bytes.len() < 20 {
        return Err(Error::Malformed("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt);
    }
    let mut c = Cursor { bytes: body, pos: 4 };
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let epoch = c.u32()?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Malformed(format!("unknown dtype tag {dtype} for `{name}`")));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Malformed("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    if c.pos != body.len() {
        return Err(Error::Malformed("trailing bytes after the last tensor".into()));
    }
    Ok(Checkpoint { epoch, tensors })
}

/// Gathers parameters and, when given, optimizer state.
pub fn to_checkpoint(params: &ParameterStore<f32>, adam: Option<&AdamState>, epoch: u32) -> Result<Checkpoint> {
    let mut tensors: Vec<(String, Tensor)> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    if let Some(a) = adam {
        if a.t >= MAX_STEP {
            return Err(Error::Malformed(format!("step count {} exceeds the storable range", a.t)));
        }
        tensors.extend(a.m.iter().map(|(n, t)| (format!("{M_PREFIX}{n}"), t.clone())));
        tensors.extend(a.v.iter().map(|(n, t)| (format!("{V_PREFIX}{n}"), t.clone())));
        tensors.push((STEP_NAME.to_string(), Tensor::scalar(a.t as f32)));
    }
    Ok(Checkpoint { epoch, tensors })
}

pub fn save_checkpoint(params: &ParameterStore<f32>, adam: Option<&AdamState>, epoch: u32, path: &Path) -> Result<()> {
    let bytes = encode(&to_checkpoint(params, adam, epoch)?)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

/// Weights, optimizer state and epoch restored into a copy of `template`.
#[derive(Debug, Clone)]
pub struct Restored {
    pub model: ElfModel,
    pub adam: Option<AdamState>,
    pub epoch: u32,
}

/// Applies a decoded checkpoint to a copy of `template`. The parameter
/// names must match the template exactly and every shape must agree.
pub fn restore(ckpt: Checkpoint, template: &ElfModel) -> Result<Restored> {
    let mut model = template.clone();
    let mut adam = AdamState::new(&template.params);
    let mut seen_params = 0;
    let (mut seen_m, mut seen_v, mut step) = (0, 0, None);
    let incompatible = |msg: String| Error::IncompatibleModel(msg);

    for (name, t) in ckpt.tensors {
        let (store, key) = if let Some(rest) = name.strip_prefix(M_PREFIX) {
            seen_m += 1;
            (&mut adam.m, rest.to_string())
        } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
            seen_v += 1;
            (&mut adam.v, rest.to_string())
        } else if name == STEP_NAME {
            step = Some(t.data().first().copied().unwrap_or(0.0) as u32);
            continue;
        } else {
            seen_params += 1;
            (&mut model.params, name.clone())
        };
        let expected = store
            .get(&key)
            .ok_or_else(|| incompatible(format!("unexpected tensor `{name}`")))?;
        if expected.shape() != t.shape() {
            return Err(incompatible(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                expected.shape()
            )));
        }
        store.set(&key, t)?;
    }
    let n = template.params.len();
    if seen_params != n {
        return Err(incompatible(format!("checkpoint holds {seen_params} of {n} parameters")));
    }
    let adam = match (seen_m, seen_v, step) {
        (0, 0, None) => None,
        (m, v, Some(t)) if m == n && v == n => {
            adam.t = t;
            Some(adam)
        }
        _ => return Err(incompatible("optimizer state is incomplete".into())),
    };
    Ok(Restored {
        model,
        adam,
        epoch: ckpt.epoch,
    })
}

pub fn load_checkpoint(path: &Path, template: &ElfModel) -> Result<Restored> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    restore(decode(&bytes)?, template)
}
