use std::fs;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::numerics::Tensor;

/// Leading bytes of every feature file.
pub const FEATURE_MAGIC: &[u8; 8] = b"MASTF1\0\0";

/// One row of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub relative_path: String,
    pub label_id: usize,
}

pub fn encode_features(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let mut words = bytes.get(8..).unwrap_or_default().chunks_exact(4);
    if bytes.get(..8) != Some(FEATURE_MAGIC.as_slice()) {
        bail!(Format, "missing feature-file magic");
    }
    let mut next = || {
        words
            .next()
            .map(|w| u32::from_le_bytes(w.try_into().expect("4-byte chunk")))
            .ok_or_else(|| Error::Format("feature file truncated in header".into()))
    };
    let rank = next()? as usize;
    if rank == 0 || rank > 8 {
        bail!(Format, "implausible feature rank {rank}");
    }
    let shape = (0..rank)
        .map(|_| next().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let payload = &bytes[8 + 4 * (rank + 1)..];
    if payload.len() != 4 * numel {
        bail!(
            Format,
            "feature payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * numel
        );
    }
    let data = payload
        .chunks_exact(4)
        .map(|w| f32::from_le_bytes(w.try_into().expect("4-byte chunk")))
        .collect();
    Tensor::from_vec(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_feature_file(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_features(t)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["relative_path", "label_id"]).map_err(csv_err)?;
    for e in entries {
        w.write_record([e.relative_path.as_str(), &e.label_id.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?;
    if headers.iter().collect::<Vec<_>>() != ["relative_path", "label_id"] {
        bail!(
            Data,
            "{}: expected header relative_path,label_id",
            path.display()
        );
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(csv_err)?;
            let label_id = rec[1].trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: line {}: bad label id {:?}",
                    path.display(),
                    i + 2,
                    &rec[1]
                ))
            })?;
            Ok(ManifestEntry {
                relative_path: rec[0].to_string(),
                label_id,
            })
        })
        .collect()
}

/// Truncates or edge-pads a `T × F` grid along time to exactly `frames` rows.
pub fn fit_frames(t: &Tensor, frames: usize) -> Result<Tensor> {
    if t.rank() != 2 || frames == 0 {
        bail!(Shape, "cannot fit {:?} to {frames} frames", t.shape());
    }
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(frames * cols);
    for r in 0..frames {
        data.extend_from_slice(t.row(r.min(rows - 1)));
    }
    Tensor::from_vec(&[frames, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_bytes_round_trip() {
        let t = Tensor::from_fn(&[3, 5], |i| i as f32 - 2.5);
        let bytes = encode_features(&t);
        assert_eq!(&bytes[..8], b"MASTF1\0\0");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 12 + 60);
        assert_eq!(decode_features(&bytes).unwrap(), t);
        assert!(matches!(decode_features(&bytes[..30]), Err(Error::Format(_))));
        assert!(decode_features(b"MASTC1\0\0").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let entries = vec![
            ManifestEntry {
                relative_path: "a/x.mastf".into(),
                label_id: 3,
            },
            ManifestEntry {
                relative_path: "b,c.mastf".into(),
                label_id: 0,
            },
        ];
        write_manifest(&path, &entries).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("relative_path,label_id\n"));
        assert_eq!(read_manifest(&path).unwrap(), entries);
        fs::write(&path, "relative_path,label_id\nx,notanumber\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Data(_))));
    }

    #[test]
    fn fit_truncates_and_pads() {
        let t = Tensor::from_fn(&[3, 2], |i| i as f32);
        assert_eq!(fit_frames(&t, 2).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(
            fit_frames(&t, 4).unwrap().data(),
            &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 5.0]
        );
    }
}
