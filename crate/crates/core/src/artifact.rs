//! Binary artifact formats.
//!
//! * Checkpoint: `MVAE`, u32 version, u32 header length, JSON header (model
//!   kind, config, optional config hash, tensor directory), then the raw
//!   little-endian f32 payloads in directory order.
//! * Encoding file: `ENCD`, u32 version, u32 count, u32 d, then per frame
//!   u32 index and d f32 each of mean, log-variance and sample.
//! * Sequence-encoding file: `SEQE`, u32 version, u32 count, u32 d, then per
//!   window u32 window index and d f32 vector, then the window-index table
//!   (u32 length followed by that many u32 frame indices, per window).
//!
//! Encoding and sequence files may end with a trailer `HASH`, u32 length,
//! UTF-8 config hash. Readers accept files with or without it.

use std::fs;
use std::path::Path;

use latent_scope_tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vae::Encoding;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MVAE";
pub const ENCODING_MAGIC: [u8; 4] = *b"ENCD";
pub const SEQUENCE_MAGIC: [u8; 4] = *b"SEQE";
const TRAILER_MAGIC: [u8; 4] = *b"HASH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    tensors: Vec<TensorEntry>,
}

/// Parameters plus the metadata stored next to them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `"vae"` or `"fp"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: Option<String>,
    pub params: ParamSet<f32>,
}

/// A sequence encoding with the frames its window covers.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub window: usize,
    pub vector: Vec<f32>,
    pub frames: Vec<usize>,
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.bytes.len())));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, out: &mut Vec<f32>) -> Result<()> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        out.extend(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        Ok(())
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::format(
                self.path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(&expected)
                ),
            ));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                self.path,
                format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        Ok(())
    }

    fn trailer(&mut self) -> Result<Option<String>> {
        if self.pos == self.bytes.len() {
            return Ok(None);
        }
        if self.take(4)? != TRAILER_MAGIC {
            return Err(Error::format(self.path, "unexpected bytes after the last record"));
        }
        let n = self.u32()? as usize;
        let hash = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::format(self.path, "config hash is not UTF-8"))?
            .to_string();
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "unexpected bytes after the trailer"));
        }
        Ok(Some(hash))
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize, path: &Path) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(path, format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_trailer(buf: &mut Vec<u8>, hash: Option<&str>, path: &Path) -> Result<()> {
    if let Some(h) = hash {
        buf.extend_from_slice(&TRAILER_MAGIC);
        put_u32(buf, h.len(), path)?;
        buf.extend_from_slice(h.as_bytes());
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let header = CheckpointHeader {
        kind: checkpoint.kind.clone(),
        config: checkpoint.config.clone(),
        config_hash: checkpoint.config_hash.clone(),
        tensors: checkpoint
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 12 + checkpoint.params.numel() * 4);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, json.len(), path)?;
    buf.extend_from_slice(&json);
    for t in checkpoint.params.tensors() {
        put_f32s(&mut buf, t.data());
    }
    write_file(path, &buf)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let n = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let mut params = ParamSet::new();
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(numel.min(bytes.len() / 4));
        r.f32s(numel, &mut data)?;
        let t = Tensor::new(entry.shape, data)
            .map_err(|e| Error::format(path, format!("tensor {}: {e}", entry.name)))?;
        params.push(entry.name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "unexpected bytes after the last tensor"));
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        config_hash: header.config_hash,
        params,
    })
}

/// Reads a checkpoint and checks its model kind.
pub fn read_checkpoint_of_kind(path: &Path, kind: &str) -> Result<Checkpoint> {
    let c = read_checkpoint(path)?;
    if c.kind != kind {
        return Err(Error::format(
            path,
            format!("holds a {:?} model, expected {kind:?}", c.kind),
        ));
    }
    Ok(c)
}

pub fn write_encodings(path: &Path, encodings: &[Encoding], config_hash: Option<&str>) -> Result<()> {
    let d = encodings.first().map_or(0, Encoding::dim);
    let mut buf = Vec::with_capacity(16 + encodings.len() * (4 + 12 * d));
    buf.extend_from_slice(&ENCODING_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, encodings.len(), path)?;
    put_u32(&mut buf, d, path)?;
    for e in encodings {
        if e.mean.len() != d || e.log_variance.len() != d || e.sample.len() != d {
            return Err(Error::invalid(format!("encoding {} does not have dimension {d}", e.index)));
        }
        put_u32(&mut buf, e.index, path)?;
        put_f32s(&mut buf, &e.mean);
        put_f32s(&mut buf, &e.log_variance);
        put_f32s(&mut buf, &e.sample);
    }
    put_trailer(&mut buf, config_hash, path)?;
    write_file(path, &buf)
}

/// Encodings plus the config hash from the trailer, if present.
pub fn read_encodings(path: &Path) -> Result<(Vec<Encoding>, Option<String>)> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(ENCODING_MAGIC)?;
    let count = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(bytes.len() / 4));
    for _ in 0..count {
        let index = r.u32()? as usize;
        let (mut mean, mut lv, mut sample) = (Vec::new(), Vec::new(), Vec::new());
        r.f32s(d, &mut mean)?;
        r.f32s(d, &mut lv)?;
        r.f32s(d, &mut sample)?;
        out.push(Encoding {
            index,
            mean,
            log_variance: lv,
            sample,
        });
    }
    let hash = r.trailer()?;
    Ok((out, hash))
}

pub fn write_sequence_encodings(path: &Path, records: &[SequenceRecord], config_hash: Option<&str>) -> Result<()> {
    let d = records.first().map_or(0, |r| r.vector.len());
    let mut buf = Vec::new();
    buf.extend_from_slice(&SEQUENCE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, records.len(), path)?;
    put_u32(&mut buf, d, path)?;
    for rec in records {
        if rec.vector.len() != d {
            return Err(Error::invalid(format!("sequence {} does not have dimension {d}", rec.window)));
        }
        put_u32(&mut buf, rec.window, path)?;
        put_f32s(&mut buf, &rec.vector);
    }
    for rec in records {
        put_u32(&mut buf, rec.frames.len(), path)?;
        for &f in &rec.frames {
            put_u32(&mut buf, f, path)?;
        }
    }
    put_trailer(&mut buf, config_hash, path)?;
    write_file(path, &buf)
}

pub fn read_sequence_encodings(path: &Path) -> Result<(Vec<SequenceRecord>, Option<String>)> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(SEQUENCE_MAGIC)?;
    let count = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(bytes.len() / 4));
    for _ in 0..count {
        let window = r.u32()? as usize;
        let mut vector = Vec::with_capacity(d);
        r.f32s(d, &mut vector)?;
        out.push(SequenceRecord {
            window,
            vector,
            frames: Vec::new(),
        });
    }
    for rec in &mut out {
        let n = r.u32()? as usize;
        for _ in 0..n {
            rec.frames.push(r.u32()? as usize);
        }
    }
    let hash = r.trailer()?;
    Ok((out, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::VaeParams;

    fn encodings() -> Vec<Encoding> {
        (0..3)
            .map(|i| Encoding {
                index: i * 5 + 1,
                mean: vec![i as f32, -0.5, f32::MIN_POSITIVE],
                log_variance: vec![-20.0, 0.25, 3.0],
                sample: vec![1e-30, 7.5, -(i as f32)],
            })
            .collect()
    }

    #[test]
    fn encodings_round_trip_with_and_without_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        write_encodings(&path, &encodings(), Some("abc123")).unwrap();
        let (back, hash) = read_encodings(&path).unwrap();
        assert_eq!(back, encodings());
        assert_eq!(hash.as_deref(), Some("abc123"));

        write_encodings(&path, &encodings(), None).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 3 * (4 + 3 * 3 * 4));
        assert_eq!(&bytes[..4], b"ENCD");
        assert_eq!(read_encodings(&path).unwrap().1, None);
    }

    #[test]
    fn truncated_encoding_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        write_encodings(&path, &encodings(), None).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_encodings(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        write_encodings(&path, &encodings(), None).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        let err = read_encodings(&path).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        assert!(read_checkpoint(&path).unwrap_err().to_string().contains("magic"));
    }

    fn checkpoint() -> Checkpoint {
        Checkpoint {
            kind: "vae".into(),
            config: serde_json::json!({"latent_dim": 4}),
            config_hash: Some("feed".into()),
            params: VaeParams::<f32>::init(4, 3).unwrap().params().clone(),
        }
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        write_checkpoint(&a, &checkpoint()).unwrap();
        let loaded = read_checkpoint(&a).unwrap();
        assert_eq!(loaded, checkpoint());
        write_checkpoint(&b, &loaded).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        write_checkpoint(&path, &checkpoint()).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(read_checkpoint(&path).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn checkpoint_into_wrong_architecture_names_tensor() {
        let c = checkpoint();
        let err = VaeParams::from_params(8, c.params).unwrap_err().to_string();
        assert!(err.contains("encoder.fc3.weight"), "{err}");
    }

    #[test]
    fn checkpoint_kind_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        write_checkpoint(&path, &checkpoint()).unwrap();
        assert!(read_checkpoint_of_kind(&path, "vae").is_ok());
        assert!(read_checkpoint_of_kind(&path, "fp").is_err());
    }

    #[test]
    fn sequence_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.bin");
        let recs = vec![
            SequenceRecord {
                window: 0,
                vector: vec![0.5; 64],
                frames: vec![1, 6, 11, 16, 21],
            },
            SequenceRecord {
                window: 1,
                vector: (0..64).map(|i| i as f32).collect(),
                frames: vec![6, 11, 16, 21, 26],
            },
        ];
        write_sequence_encodings(&path, &recs, Some("h")).unwrap();
        let (back, hash) = read_sequence_encodings(&path).unwrap();
        assert_eq!(back, recs);
        assert_eq!(hash.as_deref(), Some("h"));
    }
}
