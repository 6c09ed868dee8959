//! Bit-exact persistence: the "VPAC" tensor container, metrics CSV, and the
//! JSON run summary.
//!
//! Container layout: magic `VPAC` (4 bytes), version u32 LE, header_len
//! u64 LE, UTF-8 JSON array of `{name, dtype, shape}` descriptors, then raw
//! little-endian row-major payload in header order. Non-tensor metadata
//! (model config, dataset generator spec) travels in a JSON sidecar at
//! `<path>.json`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VpaError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VPAC";
pub const VERSION: u32 = 1;
/// Refuse to allocate more than this from an unvalidated header.
pub const DEFAULT_PAYLOAD_CAP: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::I64(_) => "i64",
        }
    }

    fn elem_size(dtype: &str) -> Option<usize> {
        match dtype {
            "f32" => Some(4),
            "f64" => Some(8),
            "i64" => Some(8),
            _ => None,
        }
    }
}

/// One named tensor inside a container.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Entry {
    pub fn f64(name: impl Into<String>, t: &Tensor) -> Entry {
        Entry { name: name.into(), shape: t.shape.clone(), data: TensorData::F64(t.data.clone()) }
    }

    pub fn i64(name: impl Into<String>, shape: Vec<usize>, v: Vec<i64>) -> Entry {
        Entry { name: name.into(), shape, data: TensorData::I64(v) }
    }

    pub fn as_tensor(&self) -> Result<Tensor> {
        match &self.data {
            TensorData::F64(v) => Tensor::new(self.shape.clone(), v.clone()),
            TensorData::F32(v) => {
                Tensor::new(self.shape.clone(), v.iter().map(|&x| x as f64).collect())
            }
            TensorData::I64(_) => {
                Err(VpaError::Contract(format!("tensor {} holds i64 data", self.name)))
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

fn io_err(path: &Path, source: std::io::Error) -> VpaError {
    VpaError::Io { path: path.display().to_string(), source }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> VpaError {
    VpaError::Format { path: path.display().to_string(), msg: msg.into() }
}

/// Write a container; fsyncs before returning. Names must be unique and
/// non-empty.
pub fn save_container(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for e in entries {
        if e.name.is_empty() {
            return Err(VpaError::Contract("empty tensor name".into()));
        }
        if !seen.insert(&e.name) {
            return Err(VpaError::Contract(format!("duplicate tensor name {}", e.name)));
        }
        let n: usize = e.shape.iter().product();
        if n != e.data.len() {
            return Err(VpaError::Shape(format!(
                "tensor {}: shape {:?} does not match {} elements",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
    }
    let header: Vec<HeaderEntry> = entries
        .iter()
        .map(|e| HeaderEntry {
            name: e.name.clone(),
            dtype: e.data.dtype().into(),
            shape: e.shape.clone(),
        })
        .collect();
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| VpaError::Contract(format!("header serialization: {e}")))?;

    let mut f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(&mut f);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())?;
        w.write_all(&header_json)?;
        for e in entries {
            match &e.data {
                TensorData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::I64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))?;
    drop(w);
    f.sync_all().map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Vec<Entry>> {
    load_container_capped(path, DEFAULT_PAYLOAD_CAP)
}

pub fn load_container_capped(path: &Path, cap: u64) -> Result<Vec<Entry>> {
    let mut f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(fmt_err(path, format!("bad magic {:?}", magic)));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4).map_err(|e| io_err(path, e))?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(fmt_err(path, format!("unsupported container version {version}")));
    }
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8).map_err(|e| io_err(path, e))?;
    let header_len = u64::from_le_bytes(buf8);
    if header_len > cap {
        return Err(fmt_err(path, format!("header length {header_len} exceeds cap {cap}")));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    f.read_exact(&mut header_bytes).map_err(|e| io_err(path, e))?;
    let header: Vec<HeaderEntry> = serde_json::from_slice(&header_bytes)
        .map_err(|e| fmt_err(path, format!("header JSON: {e}")))?;

    let mut total: u64 = 0;
    for h in &header {
        let esz = TensorData::elem_size(&h.dtype)
            .ok_or_else(|| fmt_err(path, format!("tensor {}: unknown dtype {}", h.name, h.dtype)))?;
        let n: usize = h.shape.iter().product();
        total += (n * esz) as u64;
        if total > cap {
            return Err(fmt_err(path, format!("payload exceeds cap {cap} at tensor {}", h.name)));
        }
    }

    let mut entries = Vec::with_capacity(header.len());
    for h in header {
        let n: usize = h.shape.iter().product();
        let esz = TensorData::elem_size(&h.dtype).unwrap();
        let mut raw = vec![0u8; n * esz];
        f.read_exact(&mut raw).map_err(|_| {
            fmt_err(&path.to_path_buf(), format!("truncated payload in tensor {}", h.name))
        })?;
        let data = match h.dtype.as_str() {
            "f32" => TensorData::F32(
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            "f64" => TensorData::F64(
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            "i64" => TensorData::I64(
                raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            _ => unreachable!(),
        };
        entries.push(Entry { name: h.name, shape: h.shape, data });
    }
    // trailing garbage is a format violation, not silently ignored
    let mut rest = [0u8; 1];
    match f.read(&mut rest) {
        Ok(0) => {}
        Ok(_) => return Err(fmt_err(path, "trailing bytes after payload")),
        Err(e) => return Err(io_err(path, e)),
    }
    Ok(entries)
}

/// Sidecar JSON (config/metadata) next to a container file.
pub fn save_sidecar<T: Serialize>(container_path: &Path, meta: &T) -> Result<()> {
    let path = sidecar_path(container_path);
    let json = serde_json::to_vec_pretty(meta)
        .map_err(|e| VpaError::Contract(format!("sidecar serialization: {e}")))?;
    std::fs::write(&path, json).map_err(|e| io_err(&path, e))
}

pub fn load_sidecar<T: for<'de> Deserialize<'de>>(container_path: &Path) -> Result<T> {
    let path = sidecar_path(container_path);
    let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| fmt_err(&path, format!("sidecar JSON: {e}")))
}

fn sidecar_path(container_path: &Path) -> std::path::PathBuf {
    let mut s = container_path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// One per-batch metrics row, written to CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stream_index: usize,
    pub regime: String,
    pub lifecycle: String,
    pub loss_first_step: f64,
    pub loss_last_step: f64,
    pub entropy_pre: f64,
    pub entropy_post: f64,
    pub accuracy: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(
        "stream_index,regime,lifecycle,loss_first_step,loss_last_step,entropy_pre,entropy_post,accuracy\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.stream_index,
            r.regime,
            r.lifecycle,
            r.loss_first_step,
            r.loss_last_step,
            r.entropy_pre,
            r.entropy_post,
            r.accuracy
        ));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// End-of-run summary, written as JSON next to the metrics CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub regime: String,
    pub lifecycle: String,
    pub prompt_kind: String,
    pub data_label: String,
    pub seed: u64,
    pub source_acc: f64,
    pub adapted_acc: f64,
    pub accuracy_delta: f64,
    pub entropy_pre: f64,
    pub entropy_post: f64,
    pub n_images: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("vpa-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let entries = vec![
            Entry::f64("weights.w", &t),
            Entry::i64("labels", vec![4], vec![0, 3, -7, 9]),
            Entry { name: "half".into(), shape: vec![2], data: TensorData::F32(vec![1.5, -0.25]) },
        ];
        let p = tmp("roundtrip.vpac");
        save_container(&p, &entries).unwrap();
        let loaded = load_container(&p).unwrap();
        assert_eq!(entries, loaded);
    }

    #[test]
    fn empty_container_is_valid() {
        let p = tmp("empty.vpac");
        save_container(&p, &[]).unwrap();
        assert!(load_container(&p).unwrap().is_empty());
    }

    #[test]
    fn header_parses_independently_of_payload() {
        let t = Tensor::scalar(2.5);
        let p = tmp("header.vpac");
        save_container(&p, &[Entry::f64("x", &t)]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        assert_eq!(header[0]["name"], "x");
        assert_eq!(header[0]["dtype"], "f64");
    }

    #[test]
    fn bad_magic_rejected() {
        let p = tmp("badmagic.vpac");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00\x02\x00\x00\x00\x00\x00\x00\x00[]").unwrap();
        assert!(matches!(load_container(&p), Err(VpaError::Format { .. })));
    }

    #[test]
    fn truncation_names_offending_tensor() {
        let t = Tensor::full(&[4], 1.25);
        let p = tmp("trunc.vpac");
        save_container(&p, &[Entry::f64("culprit", &t)]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&p, bytes).unwrap();
        match load_container(&p) {
            Err(VpaError::Format { msg, .. }) => assert!(msg.contains("culprit"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn future_version_rejected_explicitly() {
        let t = Tensor::scalar(1.0);
        let p = tmp("version.vpac");
        save_container(&p, &[Entry::f64("x", &t)]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        match load_container(&p) {
            Err(VpaError::Format { msg, .. }) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::scalar(1.0);
        let p = tmp("dup.vpac");
        let e = vec![Entry::f64("x", &t), Entry::f64("x", &t)];
        assert!(matches!(save_container(&p, &e), Err(VpaError::Contract(_))));
    }

    #[test]
    fn payload_cap_enforced() {
        let t = Tensor::full(&[1024], 0.0);
        let p = tmp("cap.vpac");
        save_container(&p, &[Entry::f64("big", &t)]).unwrap();
        assert!(load_container_capped(&p, 100).is_err());
        assert!(load_container_capped(&p, 1 << 20).is_ok());
    }
}
