//! On-disk tensor container and checkpoint directories.
//!
//! A container file is a UTF-8 JSON header followed by the raw element bytes:
//!
//! ```text
//! {"shape":[2,3],"dtype":"f32","byte_offset":64}<spaces>\n<raw LE bytes>
//! ```
//!
//! The header is padded with spaces to `byte_offset`, which is always a
//! multiple of 64 so the payload stays alignment-friendly. Elements are
//! IEEE-754 little-endian, row-major. Readers locate the payload via
//! `byte_offset`, never by guessing where the JSON ends.
//!
//! A checkpoint is a directory of `<param>.tensor` containers plus a
//! `meta.json` recording the step count, the config hash the run was keyed
//! by, and the exact parameter list (load uses the list, not a dir scan).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::Params;
use crate::numerics::scalar::{DType, Scalar};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: DType,
    byte_offset: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    t.assert_finite("write_tensor")?;

    // The offset appears inside the header, so size the header first with a
    // placeholder, then round up to the next 64-byte boundary.
    let mut header = Header {
        shape: t.shape().to_vec(),
        dtype: T::DTYPE,
        byte_offset: 0,
    };
    let probe = serde_json::to_string(&header).expect("header always serializes");
    // Offsets up to 20 digits fit; the probe used 1 digit.
    let byte_offset = (probe.len() + 19).div_ceil(64) * 64;
    header.byte_offset = byte_offset;
    let mut head_bytes = serde_json::to_string(&header)
        .expect("header always serializes")
        .into_bytes();
    assert!(head_bytes.len() < byte_offset);
    head_bytes.resize(byte_offset - 1, b' ');
    head_bytes.push(b'\n');

    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&head_bytes).map_err(|e| io_err(path, e))?;
    match T::DTYPE {
        DType::F32 => {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
            file.write_all(&buf).map_err(|e| io_err(path, e))?;
        }
        DType::F64 => {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for &v in t.data() {
                buf.extend_from_slice(&v.to_f64().to_le_bytes());
            }
            file.write_all(&buf).map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;

    // Parse exactly one JSON value from the front; trailing padding and the
    // payload are not the parser's business.
    let mut stream = serde_json::Deserializer::from_slice(&bytes).into_iter::<Header>();
    let header: Header = match stream.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(malformed(path, format!("bad header: {e}"))),
        None => return Err(malformed(path, "empty file")),
    };
    let header_end = stream.byte_offset();
    if header.byte_offset < header_end {
        return Err(malformed(
            path,
            format!(
                "byte_offset {} overlaps the {}–byte header",
                header.byte_offset, header_end
            ),
        ));
    }
    if header.dtype != T::DTYPE {
        return Err(malformed(
            path,
            format!("dtype is {}, expected {}", header.dtype, T::DTYPE),
        ));
    }
    let n: usize = header.shape.iter().product();
    let esize = match header.dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let need = header
        .byte_offset
        .checked_add(n * esize)
        .ok_or_else(|| malformed(path, "size overflow"))?;
    if bytes.len() != need {
        return Err(malformed(
            path,
            format!("payload is {} bytes, expected {}", bytes.len(), need),
        ));
    }
    let payload = &bytes[header.byte_offset..];
    let mut data = Vec::with_capacity(n);
    match header.dtype {
        DType::F32 => {
            for c in payload.chunks_exact(4) {
                data.push(T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64));
            }
        }
        DType::F64 => {
            for c in payload.chunks_exact(8) {
                data.push(T::from_f64(f64::from_le_bytes(c.try_into().unwrap())));
            }
        }
    }
    let t = Tensor::new(header.shape, data)
        .map_err(|e| malformed(path, format!("inconsistent header: {e}")))?;
    if !t.all_finite() {
        return Err(malformed(path, "payload contains non-finite values"));
    }
    Ok(t)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Optimizer steps completed when the checkpoint was written.
    pub step: u64,
    /// Hash of the run configuration that produced these weights.
    pub config_hash: String,
    /// Parameter names, the authoritative list for loading.
    pub params: Vec<String>,
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.tensor"))
}

pub fn save_checkpoint<T: Scalar>(
    dir: impl AsRef<Path>,
    params: &Params<T>,
    step: u64,
    config_hash: &str,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta = CheckpointMeta {
        step,
        config_hash: config_hash.to_string(),
        params: params.names().cloned().collect(),
    };
    let meta_path = dir.join("meta.json");
    let body = serde_json::to_string_pretty(&meta).expect("meta always serializes");
    fs::write(&meta_path, body).map_err(|e| io_err(&meta_path, e))?;
    for (name, tensor) in params.iter() {
        write_tensor(tensor_path(dir, name), tensor)?;
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Params<T>, CheckpointMeta)> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let body = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&body).map_err(|e| malformed(&meta_path, format!("{e}")))?;
    let mut params = Params::new();
    for name in &meta.params {
        let t = read_tensor::<T>(tensor_path(dir, name))?;
        params.insert(name.clone(), t)?;
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_f32_and_f64() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(vec![2, 3], vec![1.5f32, -2.0, 0.0, 3.25, 1e-7, 9.0]).unwrap();
        let p = dir.path().join("a.tensor");
        write_tensor(&p, &a).unwrap();
        let back: Tensor<f32> = read_tensor(&p).unwrap();
        assert_eq!(back, a);

        let b = Tensor::new(vec![4], vec![std::f64::consts::PI, -1.0, 0.5, 2e-200]).unwrap();
        let q = dir.path().join("b.tensor");
        write_tensor(&q, &b).unwrap();
        let back: Tensor<f64> = read_tensor(&q).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tensor");
        write_tensor(&p, &Tensor::from_vec(vec![1.0f32, 2.0])).unwrap();
        assert!(read_tensor::<f64>(&p).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tensor");
        write_tensor(&p, &Tensor::from_vec(vec![1.0f32, 2.0, 3.0])).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_tensor::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("expected"), "got: {err}");
    }

    #[test]
    fn garbage_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tensor");
        fs::write(&p, b"not json at all").unwrap();
        assert!(read_tensor::<f32>(&p).is_err());
    }

    #[test]
    fn header_is_valid_json_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tensor");
        write_tensor(&p, &Tensor::from_vec(vec![7.0f32])).unwrap();
        let bytes = fs::read(&p).unwrap();
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        let head: serde_json::Value =
            serde_json::from_slice(&bytes[..newline]).expect("header line parses as JSON");
        assert_eq!(head["dtype"], "f32");
        assert_eq!(head["shape"][0], 1);
        assert_eq!(head["byte_offset"], 64);
        assert_eq!(newline + 1, 64);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Params::new();
        p.insert("net.w", Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        p.insert("net.b", Tensor::from_vec(vec![0.5f32])).unwrap();
        save_checkpoint(dir.path().join("ck"), &p, 42, "deadbeef").unwrap();
        let (q, meta) = load_checkpoint::<f32>(dir.path().join("ck")).unwrap();
        assert_eq!(meta.step, 42);
        assert_eq!(meta.config_hash, "deadbeef");
        assert_eq!(meta.params, vec!["net.b".to_string(), "net.w".to_string()]);
        assert_eq!(&q, &p);
    }

    #[test]
    fn non_finite_payload_is_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tensor");
        write_tensor(&p, &Tensor::from_vec(vec![1.0f32, 2.0])).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let off = bytes.len() - 8;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(read_tensor::<f32>(&p).is_err());
    }
}
