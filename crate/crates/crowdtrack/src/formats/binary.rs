//! Little-endian binary containers: density maps (`DMAP`) and named-tensor
//! checkpoints (`STNW`).

use std::collections::BTreeMap;
use std::path::Path;

use crowdtrack_core::network::{ModelState, ParamStore, Stage};
use crowdtrack_core::Tensor;

use crate::error::{Error, Result};

pub const DMAP_MAGIC: &[u8; 4] = b"DMAP";
pub const STNW_MAGIC: &[u8; 4] = b"STNW";
/// Checkpoint entry holding the training stage as a one-element tensor.
pub const STAGE_KEY: &str = "meta.stage";

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, 0, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4)? != m {
            return Err(Error::format(self.path, 0, format!("bad magic, expected {}", String::from_utf8_lossy(m))));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, 0, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// `map` must be `[H, W]` or `[1, H, W]`; values are stored as f32.
pub fn encode_dmap(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match map.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(Error::Usage(format!("density map must be 2-d, got shape {s:?}"))),
    };
    let mut out = Vec::with_capacity(12 + 4 * h * w);
    out.extend_from_slice(DMAP_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn write_dmap(path: &Path, map: &Tensor) -> Result<()> {
    std::fs::write(path, encode_dmap(map)?).map_err(|e| Error::io(path, e))
}

/// Density map as an `[H, W]` tensor.
pub fn read_dmap(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { path, bytes: &bytes, pos: 0 };
    c.magic(DMAP_MAGIC)?;
    let h = c.u32()? as usize;
    let w = c.u32()? as usize;
    let n = h.checked_mul(w).ok_or_else(|| Error::format(path, 0, "extent overflow"))?;
    if bytes.len() < 12 + 4 * n {
        return Err(Error::format(path, 0, format!("expected {} values", n)));
    }
    let data = (0..n).map(|_| c.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    c.finish()?;
    Ok(Tensor::new(vec![h, w], data)?)
}

pub fn encode_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(STNW_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Usage(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Usage(format!("rank too large: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(path: &Path, bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut c = Cursor { path, bytes, pos: 0 };
    c.magic(STNW_MAGIC)?;
    let count = c.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format(path, 0, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|&n| n.saturating_mul(8) <= bytes.len())
            .ok_or_else(|| Error::format(path, 0, format!("tensor `{name}` larger than file")))?;
        let data = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::format(path, 0, format!("duplicate tensor `{name}`")));
        }
    }
    c.finish()?;
    Ok(out)
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    let mut all: ParamStore = state.params.clone();
    all.insert(STAGE_KEY.into(), Tensor::from_vec(vec![f64::from(state.stage.number())]));
    std::fs::write(path, encode_tensors(&all)?).map_err(|e| Error::io(path, e))
}

/// Model state with the stage restored from `meta.stage`; stage-two
/// checkpoints come back with the density heads frozen.
pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut params = decode_tensors(path, &bytes)?;
    let stage = params
        .remove(STAGE_KEY)
        .ok_or_else(|| Error::format(path, 0, format!("missing `{STAGE_KEY}` entry")))?;
    let stage = match stage.data() {
        [v] if *v == 1.0 || *v == 2.0 => Stage::from_number(*v as u8)?,
        d => return Err(Error::format(path, 0, format!("bad `{STAGE_KEY}` value {d:?}"))),
    };
    let mut state = ModelState {
        params,
        stage: Stage::One,
        frozen: Default::default(),
    };
    if stage == Stage::Two {
        state.enter_stage_two();
    }
    Ok(state)
}
