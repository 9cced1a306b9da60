use std::fs;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::numerics::{ParamSet, Tensor};

/// Leading bytes of every checkpoint.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MASTC1\0\0";

/// Named tensors in file order.
pub type Entries = Vec<(String, Tensor)>;

pub fn encode_checkpoint<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let Ok(len) = u16::try_from(name.len()) else {
            bail!(Argument, "parameter name of {} bytes is too long", name.len());
        };
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            bail!(Format, "checkpoint truncated at byte {}", self.pos);
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Entries> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        bail!(Format, "missing checkpoint magic");
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            bail!(Format, "{name}: implausible rank {rank}");
        }
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(numel) = numel.filter(|&n| n <= body.len()) else {
            bail!(Format, "{name}: shape {shape:?} exceeds the file");
        };
        let data = r
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|w| f32::from_le_bytes(w.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != body.len() {
        bail!(Format, "{} trailing bytes after the last entry", body.len() - r.pos);
    }
    Ok(entries)
}

pub fn save_checkpoint<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    fs::write(path, encode_checkpoint(entries)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Entries> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Entries of `params` with every name prefixed.
pub fn prefixed<'a>(prefix: &'a str, params: &'a ParamSet<f32>) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    params.iter().map(move |(n, t)| (format!("{prefix}{n}"), t))
}

/// Overwrites every tensor of `params` with the entry named `prefix + name`.
pub fn restore_params(params: &mut ParamSet<f32>, entries: &Entries, prefix: &str) -> Result<()> {
    for (name, t) in params.iter_mut() {
        let key = format!("{prefix}{name}");
        let Some((_, src)) = entries.iter().find(|(n, _)| *n == key) else {
            bail!(State, "checkpoint has no entry {key}");
        };
        if src.shape() != t.shape() {
            bail!(State, "checkpoint entry {key} has shape {:?}, model expects {:?}", src.shape(), t.shape());
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}
