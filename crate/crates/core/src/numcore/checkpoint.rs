//! `GRPT` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     b"GRPT"
//! version   u32
//! count     u32
//! count x { name_len u32, name utf-8, rank u32, dims u32 x rank, payload f32 x prod(dims) }
//! ```
//!
//! Tensors are written in name order. The trainable flag is not stored;
//! loaders decide which namespaces to train.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::params::{hex, ParamStore};
use crate::numcore::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GRPT";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.num_values() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes; every entry is loaded as frozen.
pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamStore<f32>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic bytes, expected GRPT"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("name length")? as usize;
        let name_bytes = r.take(len, "name")?.to_vec();
        let name = match String::from_utf8(name_bytes) {
            Ok(n) => n,
            Err(_) => {
                r.pos = start + 4;
                return Err(r.fail("tensor name is not valid UTF-8"));
            }
        };
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        if rank == 0 || dims.contains(&0) {
            return Err(r.fail(format!("tensor {name} has invalid dims {dims:?}")));
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(dims, data).expect("dims validated above");
        if store.insert(name.clone(), tensor, false).is_err() {
            r.pos = start;
            return Err(r.fail(format!("duplicate tensor name {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok(store)
}

/// Writes to a sibling temp file and renames it into place, so readers never
/// observe a partial checkpoint.
pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<String> {
    let bytes = encode(store);
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(format!("checkpoint {}", path.display())),
        _ => Error::Io(e),
    })?;
    decode(&bytes, path)
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
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

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("pgi/level0/fused_gc/w", Tensor::from_fn(&[2, 2], |i| i as f32 * -0.25), true)
            .unwrap();
        s.insert("base/out/b", Tensor::new(vec![3], vec![f32::MIN_POSITIVE, -0.0, 1e30]).unwrap(), false)
            .unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let b = encode(&sample_store());
        assert_eq!(&b[..4], b"GRPT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        // first entry in name order
        let len = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
        assert_eq!(&b[16..16 + len], b"base/out/b");
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut b = encode(&sample_store());
        b[0] = b'X';
        match decode(&b, Path::new("x.grpt")) {
            Err(Error::CorruptCheckpoint { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_version_reports_offset_four() {
        let mut b = encode(&sample_store());
        b[4] = 99;
        match decode(&b, Path::new("x.grpt")) {
            Err(Error::CorruptCheckpoint { offset, reason, .. }) => {
                assert_eq!(offset, 4);
                assert!(reason.contains("version 99"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let b = encode(&sample_store());
        let cut = &b[..b.len() - 3];
        assert!(matches!(
            decode(cut, Path::new("x")),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn save_is_atomic_and_hashes_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.grpt");
        let hash = save(&sample_store(), &path).unwrap();
        assert_eq!(hash, file_hash(&path).unwrap());
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1, "temp file left behind: {names:?}");
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        assert!(matches!(
            load(Path::new("/nonexistent/none.grpt")),
            Err(Error::MissingArtifact(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in prop::collection::btree_map(
                "[a-z]{1,6}(/[a-z0-9]{1,4}){0,3}",
                (prop::collection::vec(1usize..4, 1..4), any::<u64>()),
                1..6,
            )
        ) {
            let mut s = ParamStore::new();
            for (name, (dims, seed)) in &tensors {
                let n: usize = dims.iter().product();
                let data = (0..n)
                    .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) >> 7) as u32 & 0xff7f_ffff))
                    .collect();
                s.insert(name.clone(), Tensor::new(dims.clone(), data).unwrap(), false).unwrap();
            }
            let bytes = encode(&s);
            let back = decode(&bytes, Path::new("p")).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            for ((n1, p1), (n2, p2)) in s.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert!(p1.tensor.bit_eq(&p2.tensor));
            }
        }
    }
}
