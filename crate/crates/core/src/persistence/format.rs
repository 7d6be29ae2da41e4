//! The MFCK checkpoint file.
//!
//! ```text
//! "MFCK" | version u32 | count u32
//! count × { name_len u16 | name | dtype u8 | rank u8 | dims u64[rank] | byte_len u64 | data }
//! crc32 u32 over every preceding byte
//! ```
//! All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CheckpointErrorKind, Error, Result};
use crate::tensor::codec::{self, Reader};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MFCK";
pub const VERSION: u32 = 1;

fn err(kind: CheckpointErrorKind, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        kind,
        message: message.into(),
    }
}

fn corrupt(message: impl Into<String>) -> Error {
    err(CheckpointErrorKind::Corrupt, message)
}

pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::invalid("too many tensors for one checkpoint"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::invalid(format!("duplicate checkpoint name '{name}'")));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("name '{name}' is too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        codec::write_header(&mut out, t)?;
        out.extend_from_slice(&(codec::data_len(t) as u64).to_le_bytes());
        codec::write_data(&mut out, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 16 {
        return Err(corrupt(format!("file of {} bytes is too short", bytes.len())));
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(footer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(corrupt(format!("crc mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let wire = |e: Error| corrupt(e.to_string());
    let mut r = Reader::new(body);
    if r.bytes(4).map_err(wire)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32().map_err(wire)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32().map_err(wire)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16().map_err(wire)? as usize;
        let name = String::from_utf8(r.bytes(len).map_err(wire)?.to_vec()).map_err(|e| corrupt(e.to_string()))?;
        let (dtype, shape) = codec::read_header(&mut r).map_err(wire)?;
        let byte_len = r.u64().map_err(wire)? as usize;
        let start = r.position();
        let t = codec::read_data(&mut r, dtype, shape).map_err(wire)?;
        if r.position() - start != byte_len {
            return Err(corrupt(format!("record '{name}' declares {byte_len} bytes, holds {}", r.position() - start)));
        }
        out.push((name, t));
    }
    r.finish().map_err(wire)?;
    Ok(out)
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes a checkpoint atomically: a temporary file in the same directory
/// is renamed over `path`.
pub fn save(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(entries)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("'{}' is not a file path", path.display())))?
        .to_string_lossy();
    let tmp: PathBuf = dir.join(format!(
        ".{file_name}.tmp.{}.{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(Error::from)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => err(CheckpointErrorKind::FileNotFound, format!("{}", path.display())),
        _ => Error::Io(e),
    })?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint { kind, message } => err(kind, format!("{}: {message}", path.display())),
        other => other,
    })
}

/// Reads one named tensor. The whole file is verified first, so a corrupt
/// file never yields a partial tensor.
pub fn restore(path: impl AsRef<Path>, name: &str) -> Result<Tensor> {
    let path = path.as_ref();
    load(path)?
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| err(CheckpointErrorKind::NameNotFound, format!("'{name}' not in {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::codec::tests::arb_tensor;
    use proptest::prelude::*;

    #[test]
    fn one_scalar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt-1.mfck");
        save(&p, &[("w".into(), Tensor::scalar(2.5f64))]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(restore(&p, "w").unwrap(), Tensor::scalar(2.5f64));
    }

    #[test]
    fn empty_checkpoint_is_valid() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), 16);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn distinct_error_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.mfck");
        assert_eq!(restore(&p, "w").unwrap_err().checkpoint_kind(), Some(CheckpointErrorKind::FileNotFound));
        save(&p, &[("w".into(), Tensor::vector(vec![1i64, 2, 3]))]).unwrap();
        assert_eq!(restore(&p, "zz").unwrap_err().checkpoint_kind(), Some(CheckpointErrorKind::NameNotFound));
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert_eq!(restore(&p, "w").unwrap_err().checkpoint_kind(), Some(CheckpointErrorKind::Corrupt));
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let bytes = encode(&[("a".into(), Tensor::vector(vec![1.0f32, -2.0])), ("b".into(), Tensor::scalar(true))]).unwrap();
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(decode(&b).is_err(), "flip at {i} went unnoticed");
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::scalar(1i32);
        assert!(encode(&[("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact(ts in prop::collection::vec(arb_tensor(), 0..100)) {
            let entries: Vec<(String, Tensor)> = ts.into_iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect();
            let back = decode(&encode(&entries).unwrap()).unwrap();
            prop_assert_eq!(back.len(), entries.len());
            for ((n1, a), (n2, b)) in entries.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert!(a.bit_eq(b));
            }
        }
    }
}
