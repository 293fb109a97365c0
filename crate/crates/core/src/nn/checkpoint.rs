//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "ESPOCKPT"
//! version      u32
//! count        u64      number of arrays
//! per array:
//!   name_len   u64
//!   name       name_len bytes of UTF-8
//!   rank       u64
//!   dims       rank x u64
//!   values     prod(dims) x f32
//! ```
//!
//! Values are stored in single precision; loading widens them to `f64`, so a
//! load/save cycle reproduces the file byte for byte.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParameterSet;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ESPOCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_params<W: Write>(mut w: W, params: &ParameterSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for a in params.arrays() {
        let name = a.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(a.shape.len() as u64).to_le_bytes())?;
        for &d in &a.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(a.data.len() * 4);
        for &v in &a.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Upper bound on a single dimension or name length, against corrupt headers.
const SANE_LIMIT: u64 = 1 << 32;

pub fn read_params<R: Read>(mut r: R) -> Result<ParameterSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u64(&mut r)?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)?;
        if name_len > SANE_LIMIT {
            return Err(Error::Format("name length out of range".into()));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)?;
        if rank > 8 {
            return Err(Error::Format(format!("rank {rank} out of range for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            if d > SANE_LIMIT {
                return Err(Error::Format(format!("dimension out of range for `{name}`")));
            }
            shape.push(d as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params
            .insert(&name, &shape, data)
            .map_err(|e| Error::Format(format!("array `{name}`: {e}")))?;
    }
    Ok(params)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save(path: &Path, params: &ParameterSet) -> Result<()> {
    let mut buf = Vec::new();
    write_params(&mut buf, params)?;
    write_atomic(path, &buf)
}

pub fn load(path: &Path) -> Result<ParameterSet> {
    let f = fs::File::open(path)?;
    read_params(std::io::BufReader::new(f))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("tok_emb", &[2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3, -7.5])
            .unwrap();
        p.insert("head.b", &[2], vec![0.1, 0.2]).unwrap();
        p
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_params(&mut buf, &sample()).unwrap();
        assert_eq!(&buf[..8], b"ESPOCKPT");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[20..28].try_into().unwrap()), 7);
        assert_eq!(&buf[28..35], b"tok_emb");
        // total: 20 + (8+7+8+16+24) + (8+6+8+8+8)
        assert_eq!(buf.len(), 20 + 63 + 38);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut buf = Vec::new();
        write_params(&mut buf, &sample()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_params(&bad[..]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(read_params(&bad[..]), Err(Error::Format(_))));
        assert!(read_params(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &sample()).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.array(0).data[4], 1e-3f32 as f64);
        assert!(!dir.path().join(".model.ckpt.tmp").exists());
    }

    proptest! {
        #[test]
        fn bytes_roundtrip_exactly(vals in proptest::collection::vec(-1e6f64..1e6, 1..40), split in 1usize..5) {
            let mut p = ParameterSet::new();
            let n = vals.len();
            let k = (n / split).max(1);
            p.insert("a", &[k], vals[..k].to_vec()).unwrap();
            p.insert("b.c", &[1, n - k], vals[k..].to_vec()).unwrap();
            let mut first = Vec::new();
            write_params(&mut first, &p).unwrap();
            let loaded = read_params(&first[..]).unwrap();
            let mut second = Vec::new();
            write_params(&mut second, &loaded).unwrap();
            prop_assert_eq!(&first, &second);
            // f32-representable values survive unchanged
            let again = read_params(&second[..]).unwrap();
            prop_assert_eq!(loaded, again);
        }
    }
}
