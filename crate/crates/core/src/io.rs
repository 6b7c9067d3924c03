//! Versioned binary container: magic, schema version, JSON header, then raw
//! little-endian `f64` payload.
//!
//! ```text
//! [4]  magic
//! [4]  u32 schema version
//! [8]  u64 header length H
//! [H]  UTF-8 JSON header
//! [8]  u64 payload length P (number of f64 values)
//! [8P] f64 values, little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write_container(
    path: &Path,
    magic: &[u8; 4],
    version: u32,
    header: &impl Serialize,
    payload: &[f64],
) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_vec(header)?;
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(ctx(), e));
    put(magic)?;
    put(&version.to_le_bytes())?;
    put(&(header.len() as u64).to_le_bytes())?;
    put(&header)?;
    put(&(payload.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    put(&buf)?;
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_container<H: DeserializeOwned>(path: &Path, magic: &[u8; 4], version: u32) -> Result<(H, Vec<f64>)> {
    let ctx = || format!("reading {}", path.display());
    let file = File::open(path).map_err(|e| Error::io(ctx(), e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(ctx(), e))?;
    let bad = |reason: &str| Error::format(path, reason);
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(|| bad("truncated"))?;
        at += n;
        Ok(s)
    };
    if take(4)? != magic {
        return Err(bad("wrong magic"));
    }
    let found = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if found != version {
        return Err(bad(&format!("schema version {found}, expected {version}")));
    }
    let hlen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let header: H = serde_json::from_slice(take(hlen)?).map_err(|e| bad(&format!("header: {e}")))?;
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let raw = take(n.checked_mul(8).ok_or_else(|| bad("payload length overflow"))?)?;
    let payload = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let payload = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, std::f64::consts::PI];
        write_container(&p, b"TEST", 3, &vec!["a", "b"], &payload).unwrap();
        let (h, back): (Vec<String>, Vec<f64>) = read_container(&p, b"TEST", 3).unwrap();
        assert_eq!(h, vec!["a", "b"]);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&payload));
    }

    #[test]
    fn rejects_wrong_magic_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_container(&p, b"TEST", 1, &0u8, &[1.0, 2.0]).unwrap();
        assert!(read_container::<u8>(&p, b"NOPE", 1).is_err());
        assert!(read_container::<u8>(&p, b"TEST", 2).is_err());
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_container::<u8>(&p, b"TEST", 1),
            Err(Error::Format { .. })
        ));
    }
}
