//! Dataset manifests and tensor blobs.
//!
//! A blob is a concatenation of tensor records:
//!
//! ```text
//! "SAUT" | version: u32 | dtype: u8 | rank: u32 | dims: u64 * rank | payload
//! ```
//!
//! All integers and payload values are little-endian, payload row-major.
//! Dtype 0 is `f32`; dtype 1 (`f64`) is used by checkpoints.
//!
//! A manifest holds one JSON object per line naming a sample and the byte
//! offset of its record in the sibling `.bin` blob.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SAUT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RecordData {
    pub fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn encode_record(out: &mut Vec<u8>, shape: &[usize], data: &RecordData) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    match data {
        RecordData::F32(_) => out.push(DType::F32 as u8),
        RecordData::F64(_) => out.push(DType::F64 as u8),
    }
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match data {
        RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::MalformedBlob(format!(
                "truncated {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes the record at `offset`; returns its shape, data and the offset of
/// the byte after it.
pub fn decode_record(bytes: &[u8], offset: usize) -> Result<(Vec<usize>, RecordData, usize)> {
    if offset > bytes.len() {
        return Err(Error::MalformedBlob(format!(
            "offset {offset} beyond blob of {} bytes",
            bytes.len()
        )));
    }
    let mut cur = Cursor { bytes, pos: offset };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::MalformedBlob(format!("bad magic at byte {offset}")));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::MalformedBlob(format!("unsupported version {version}")));
    }
    let dtype = cur.take(1, "dtype")?[0];
    let rank = cur.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u64("dims")? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimensionMismatch(format!("dims {shape:?} overflow")))?;
    let width = match dtype {
        0 => 4,
        1 => 8,
        other => return Err(Error::MalformedBlob(format!("unknown dtype code {other}"))),
    };
    let available = bytes.len() - cur.pos;
    if available < count * width {
        return Err(Error::DimensionMismatch(format!(
            "dims {shape:?} need {} payload bytes, blob has {available}",
            count * width
        )));
    }
    let payload = cur.take(count * width, "payload")?;
    let data = if dtype == 0 {
        RecordData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        RecordData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    };
    Ok((shape, data, cur.pos))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: u64,
    pub label: usize,
    pub is_synthetic: bool,
    pub quality: f64,
    pub offset: u64,
}

/// Path of the blob that accompanies `manifest`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn write_dataset(manifest: &Path, samples: &[Sample]) -> Result<()> {
    let mut blob = Vec::new();
    let mut lines = Vec::with_capacity(samples.len());
    for s in samples {
        let rec = ManifestRecord {
            id: s.id,
            label: s.label,
            is_synthetic: s.is_synthetic,
            quality: s.quality,
            offset: blob.len() as u64,
        };
        encode_record(
            &mut blob,
            s.features.shape(),
            &RecordData::F32(s.features.data().to_vec()),
        );
        lines.push(serde_json::to_string(&rec).expect("manifest record serializes"));
    }
    let blob_file = blob_path(manifest);
    fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    let file = fs::File::create(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(manifest, e))
}

pub fn read_manifest(manifest: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedManifest {
                line: i + 1,
                message: e.to_string(),
            })?;
        if !(0.0..=1.0).contains(&rec.quality) {
            return Err(Error::MalformedManifest {
                line: i + 1,
                message: format!("quality {} outside [0, 1]", rec.quality),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let blob_file = blob_path(manifest);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    records
        .into_iter()
        .map(|rec| {
            let (shape, data, _) = decode_record(&blob, rec.offset as usize)?;
            let RecordData::F32(values) = data else {
                return Err(Error::MalformedBlob(format!(
                    "sample {} is not stored as f32",
                    rec.id
                )));
            };
            Ok(Sample {
                id: rec.id,
                label: rec.label,
                is_synthetic: rec.is_synthetic,
                quality: rec.quality,
                features: Tensor::new(shape, values)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples() -> Vec<Sample> {
        vec![
            Sample::real(0, 1, Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 3.25]).unwrap()),
            Sample {
                id: 7,
                label: 0,
                is_synthetic: true,
                quality: 0.25,
                features: Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            },
        ]
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.jsonl");
        write_dataset(&path, &samples()).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), samples());
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_blob_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.jsonl");
        write_dataset(&path, &samples()).unwrap();
        let blob = blob_path(&path);
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.jsonl");
        write_dataset(&path, &samples()).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"id\": 3}\n");
        std::fs::write(&path, text).unwrap();
        match read_dataset(&path) {
            Err(Error::MalformedManifest { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn record_layout_is_bit_exact() {
        let mut out = Vec::new();
        encode_record(&mut out, &[2], &RecordData::F32(vec![1.0, -2.0]));
        let mut expected = b"SAUT".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(0);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(out, expected);
        let (shape, data, end) = decode_record(&out, 0).unwrap();
        assert_eq!(shape, vec![2]);
        assert_eq!(data, RecordData::F32(vec![1.0, -2.0]));
        assert_eq!(end, out.len());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut out = Vec::new();
        encode_record(&mut out, &[1], &RecordData::F64(vec![1.0]));
        out[0] = b'X';
        assert!(matches!(decode_record(&out, 0), Err(Error::MalformedBlob(_))));
    }
}
