//! Named-tensor checkpoint container.
//!
//! Layout, all integers little-endian: magic `VISACKPT`, version `u32`,
//! count `u32`, then per tensor a `u16` name length and UTF-8 name, a `u8`
//! dtype tag (0 = f32, 1 = f64), a `u8` rank, `rank` extents as `u64` and
//! the row-major data.

use std::path::Path;

use visa_core::{ParamStore, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"VISACKPT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;

/// Serializes every parameter value as f64, in store order.
pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + store.total_elements() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| CliError::Precondition("too many parameters".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for p in store.iter() {
        let name = p.name().as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| CliError::Precondition(format!("parameter name too long: {}", p.name())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F64);
        let shape = p.value.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| CliError::Precondition(format!("rank of {} exceeds 255", p.name())))?);
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated at byte {} (wanted {n} more)", self.pos)
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Parses a container into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = u32::from_le_bytes(r.array()?);
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| format!("parameter name: {e}"))?.to_string();
        let [dtype] = r.array()?;
        let [rank] = r.array()?;
        let shape = (0..rank)
            .map(|_| {
                let e = u64::from_le_bytes(r.array()?);
                usize::try_from(e).map_err(|_| format!("{name}: extent {e} too large"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| format!("{name}: shape {shape:?} overflows"))?;
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r
                .take(n.checked_mul(8).ok_or("size overflow")?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
            DTYPE_F32 => r
                .take(n.checked_mul(4).ok_or("size overflow")?)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
                .collect(),
            other => return Err(format!("{name}: unknown dtype tag {other}")),
        };
        let tensor = Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(store)?).map_err(CliError::io(path))
}

/// Copies checkpoint values into `store`. The checkpoint must hold exactly
/// the store's parameter names, each with the same shape.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    let entries = decode(&bytes).map_err(|m| CliError::format(path, m))?;
    apply(entries, store)
}

pub fn apply(entries: Vec<(String, Tensor)>, store: &mut ParamStore) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for (name, tensor) in entries {
        let id = store
            .find(&name)
            .ok_or_else(|| CliError::Mismatch(format!("unexpected parameter {name:?}")))?;
        let slot = &mut store.get_mut(id).value;
        if slot.shape() != tensor.shape() {
            return Err(CliError::Mismatch(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(CliError::Mismatch(format!("duplicate parameter {name:?}")));
        }
        *slot = tensor;
    }
    if let Some(missing) = store.iter().zip(&seen).find(|(_, s)| !**s) {
        return Err(CliError::Mismatch(format!("missing parameter {:?}", missing.0.name())));
    }
    Ok(())
}
