//! On-disk formats.
//!
//! Embedding files (`.cvre`), all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "CVRE"
//! version  u32      1
//! dim      u32
//! count    u64
//! count x { id_len u16, id (UTF-8, id_len bytes), dim x f32 }
//! ```
//!
//! Manifests and lookup tables are JSONL: one UTF-8 JSON object per line,
//! blank lines ignored.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CvrError, Result};

pub const MAGIC: &[u8; 4] = b"CVRE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

pub fn write_embeddings<W: Write>(
    mut w: W,
    dim: usize,
    records: impl IntoIterator<Item = (String, Vec<f32>)>,
) -> std::io::Result<()> {
    let records: Vec<(String, Vec<f32>)> = records.into_iter().collect();
    let bad = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidInput, msg);
    let dim32 = u32::try_from(dim).map_err(|_| bad(format!("dim {dim} too large")))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&dim32.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (id, values) in &records {
        if values.len() != dim {
            return Err(bad(format!("record `{id}` has {} values, expected {dim}", values.len())));
        }
        let len = u16::try_from(id.len()).map_err(|_| bad(format!("id `{id}` too long")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn write_embeddings_file(
    path: &Path,
    dim: usize,
    records: impl IntoIterator<Item = (String, Vec<f32>)>,
) -> Result<()> {
    let f = File::create(path).map_err(|e| CvrError::io(path, e))?;
    write_embeddings(BufWriter::new(f), dim, records).map_err(|e| CvrError::io(path, e))
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn take<const N: usize>(&mut self) -> std::io::Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf)?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn take_vec(&mut self, n: usize) -> std::io::Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        self.offset += n as u64;
        Ok(buf)
    }
}

/// Parses an embedding stream. Structural problems are reported with the byte
/// offset; value checks (finite, unique ids) are left to [`validate_embeddings`].
pub fn read_embeddings<R: Read>(r: R, path: &Path) -> Result<EmbeddingFile> {
    let mut r = CountingReader { inner: r, offset: 0 };
    let err = |offset: u64, msg: String| CvrError::format(path, format!("byte {offset}"), msg);
    let eof = |offset: u64, what: &str, e: std::io::Error| {
        err(offset, format!("truncated while reading {what}: {e}"))
    };

    let magic = r.take::<4>().map_err(|e| eof(0, "magic", e))?;
    if &magic != MAGIC {
        return Err(err(0, format!("bad magic {magic:?}, expected \"CVRE\"")));
    }
    let version = u32::from_le_bytes(r.take::<4>().map_err(|e| eof(4, "version", e))?);
    if version != FORMAT_VERSION {
        return Err(err(4, format!("unsupported format version {version}")));
    }
    let dim = u32::from_le_bytes(r.take::<4>().map_err(|e| eof(8, "dim", e))?) as usize;
    if dim == 0 {
        return Err(err(8, "dim must be positive".into()));
    }
    let count = u64::from_le_bytes(r.take::<8>().map_err(|e| eof(12, "count", e))?);

    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let at = r.offset;
        let len = u16::from_le_bytes(
            r.take::<2>()
                .map_err(|e| eof(at, &format!("record {i} id length"), e))?,
        ) as usize;
        let id_bytes = r
            .take_vec(len)
            .map_err(|e| eof(at, &format!("record {i} id"), e))?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| err(at, format!("record {i} id is not UTF-8")))?;
        let raw = r
            .take_vec(dim * 4)
            .map_err(|e| eof(at, &format!("record {i} (`{id}`) values"), e))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        records.push(EmbeddingRecord { id, values });
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| CvrError::io(path, e))? != 0 {
        return Err(err(r.offset, format!("trailing bytes after {count} records")));
    }
    Ok(EmbeddingFile { dim, records })
}

pub fn read_embeddings_file(path: &Path) -> Result<EmbeddingFile> {
    let f = File::open(path).map_err(|e| CvrError::io(path, e))?;
    read_embeddings(BufReader::new(f), path)
}

/// Rejects empty ids, duplicate ids and non-finite or all-zero vectors,
/// naming the offending record.
pub fn validate_embeddings(file: &EmbeddingFile, path: &Path) -> Result<()> {
    let mut seen = HashSet::with_capacity(file.records.len());
    for (i, rec) in file.records.iter().enumerate() {
        let loc = format!("record {i} (`{}`)", rec.id);
        if rec.id.is_empty() {
            return Err(CvrError::format(path, loc, "empty clip id"));
        }
        if rec.values.len() != file.dim {
            return Err(CvrError::format(
                path,
                loc,
                format!("dimension mismatch: expected {}, found {}", file.dim, rec.values.len()),
            ));
        }
        if let Some(j) = rec.values.iter().position(|v| !v.is_finite()) {
            return Err(CvrError::format(
                path,
                loc,
                format!("non-finite value {} at component {j}", rec.values[j]),
            ));
        }
        if crate::embedding::norm(&rec.values) <= crate::embedding::MIN_NORM {
            return Err(CvrError::format(path, loc, "zero vector"));
        }
        if !seen.insert(rec.id.as_str()) {
            return Err(CvrError::format(path, loc, format!("duplicate clip id `{}`", rec.id)));
        }
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| CvrError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CvrError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            CvrError::format(path, format!("line {}", i + 1), e.to_string())
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let f = File::create(path).map_err(|e| CvrError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| CvrError::io(path, e))?;
    }
    w.flush().map_err(|e| CvrError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(dim: usize, recs: Vec<(String, Vec<f32>)>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_embeddings(&mut buf, dim, recs).unwrap();
        buf
    }

    fn p() -> &'static Path {
        Path::new("mem.cvre")
    }

    #[test]
    fn header_layout_is_exact() {
        let buf = encode(2, vec![("ab".into(), vec![1.0, -2.0])]);
        let mut expected = b"CVRE".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u16.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn structural_errors_carry_offsets() {
        let buf = encode(2, vec![("ab".into(), vec![1.0, 2.0])]);
        let e = read_embeddings(&buf[..buf.len() - 1], p()).unwrap_err().to_string();
        assert!(e.contains("byte 20") && e.contains("`ab`"), "{e}");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_embeddings(&bad[..], p()).unwrap_err().to_string().contains("bad magic"));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_embeddings(&extra[..], p()).unwrap_err().to_string().contains("trailing"));
        let mut v2 = buf;
        v2[4] = 2;
        assert!(read_embeddings(&v2[..], p()).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn validation_names_offender() {
        let f = EmbeddingFile {
            dim: 2,
            records: vec![
                EmbeddingRecord { id: "ok".into(), values: vec![1.0, 0.0] },
                EmbeddingRecord { id: "clip-nan".into(), values: vec![f32::NAN, 0.0] },
            ],
        };
        let e = validate_embeddings(&f, p()).unwrap_err().to_string();
        assert!(e.contains("clip-nan") && e.contains("non-finite"), "{e}");

        let f = EmbeddingFile {
            dim: 2,
            records: vec![
                EmbeddingRecord { id: "a".into(), values: vec![1.0, 0.0] },
                EmbeddingRecord { id: "a".into(), values: vec![0.0, 1.0] },
            ],
        };
        assert!(validate_embeddings(&f, p()).unwrap_err().to_string().contains("duplicate clip id `a`"));

        let f = EmbeddingFile {
            dim: 2,
            records: vec![EmbeddingRecord { id: "short".into(), values: vec![1.0] }],
        };
        assert!(validate_embeddings(&f, p()).unwrap_err().to_string().contains("dimension mismatch"));
    }

    #[test]
    fn jsonl_errors_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        std::fs::write(&path, "{\"a\": 1}\n\n{\"a\": }\n").unwrap();
        #[derive(serde::Deserialize, Debug)]
        #[allow(dead_code)]
        struct A {
            a: u32,
        }
        let e = read_jsonl::<A>(&path).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
    }

    proptest! {
        #[test]
        fn embedding_round_trip_is_bit_exact(
            (dim, recs) in (1usize..16).prop_flat_map(|d| (
                Just(d),
                prop::collection::vec(
                    ("[a-z0-9_\\-]{1,12}", prop::collection::vec(any::<u32>().prop_map(f32::from_bits), d)),
                    0..20,
                ),
            ))
        ) {
            let buf = encode(dim, recs.clone());
            let back = read_embeddings(&buf[..], p()).unwrap();
            prop_assert_eq!(back.dim, dim);
            prop_assert_eq!(back.records.len(), recs.len());
            for (r, (id, vals)) in back.records.iter().zip(&recs) {
                prop_assert_eq!(&r.id, id);
                let a: Vec<u32> = r.values.iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = vals.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
