//! Per-query hard-negative tables and their on-disk form.
//!
//! File layout (little-endian): magic `XNCF`, version `u32`, `N` as `u64`,
//! `k_h` as `u32`, the snapshot epoch as `u32`, then `N * k_h` label ids
//! as `u32`, row-major.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"XNCF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeCache {
    n_queries: usize,
    k_h: usize,
    ids: Vec<u32>,
    built_from_epoch: u32,
}

impl NegativeCache {
    /// Builds a cache from per-row id lists, checking that every row has
    /// exactly `k_h` unique ids below `n_labels`.
    pub fn from_rows(k_h: usize, rows: &[Vec<u32>], built_from_epoch: u32, n_labels: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len() * k_h);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k_h {
                return Err(Error::Dimension(format!(
                    "cache row {i} holds {} ids, expected {k_h}",
                    r.len()
                )));
            }
            ids.extend_from_slice(r);
        }
        let cache = Self {
            n_queries: rows.len(),
            k_h,
            ids,
            built_from_epoch,
        };
        cache.validate(n_labels)?;
        Ok(cache)
    }

    pub fn validate(&self, n_labels: usize) -> Result<()> {
        for i in 0..self.n_queries() {
            let row = self.row(i);
            if let Some(&l) = row.iter().find(|&&l| l as usize >= n_labels) {
                return Err(Error::OutOfRange {
                    what: "cached label id",
                    index: l as usize,
                    bound: n_labels,
                });
            }
            let mut sorted = row.to_vec();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!("cache row {i} repeats a label")));
            }
        }
        Ok(())
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn k_h(&self) -> usize {
        self.k_h
    }

    pub fn built_from_epoch(&self) -> u32 {
        self.built_from_epoch
    }

    /// Hard negatives of query `i`, best first. Empty when `k_h = 0`.
    pub fn row(&self, i: usize) -> &[u32] {
        if self.k_h == 0 {
            &[]
        } else {
            &self.ids[i * self.k_h..(i + 1) * self.k_h]
        }
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LE>(VERSION).map_err(io)?;
        w.write_u64::<LE>(self.n_queries as u64).map_err(io)?;
        w.write_u32::<LE>(self.k_h as u32).map_err(io)?;
        w.write_u32::<LE>(self.built_from_epoch).map_err(io)?;
        for &id in &self.ids {
            w.write_u32::<LE>(id).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a cache file. The caller should [`validate`](Self::validate)
    /// it against the label count in use.
    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(std::fs::File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "bad magic, expected XNCF"));
        }
        let version = r.read_u32::<LE>().map_err(io)?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let n = r.read_u64::<LE>().map_err(io)? as usize;
        let k_h = r.read_u32::<LE>().map_err(io)? as usize;
        let built_from_epoch = r.read_u32::<LE>().map_err(io)?;
        let mut ids = vec![0u32; n * k_h];
        r.read_u32_into::<LE>(&mut ids).map_err(io)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(Error::format(path, "trailing bytes after cache body"));
        }
        Ok(Self {
            n_queries: n,
            k_h,
            ids,
            built_from_epoch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let rows = vec![vec![3, 1], vec![0, 2], vec![4, 3]];
        let cache = NegativeCache::from_rows(2, &rows, 12, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.xncf");
        cache.write_file(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"XNCF");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 4 + 4 + 6 * 4);
        let back = NegativeCache::read_file(&path).unwrap();
        assert_eq!(back.n_queries(), 3);
        assert_eq!(back, cache);
        assert_eq!(back.row(2), &[4, 3]);
        assert_eq!(back.built_from_epoch(), 12);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(NegativeCache::from_rows(2, &[vec![1, 1]], 0, 5).is_err());
        assert!(NegativeCache::from_rows(2, &[vec![1, 9]], 0, 5).is_err());
        assert!(NegativeCache::from_rows(2, &[vec![1]], 0, 5).is_err());
        let empty = NegativeCache::from_rows(0, &[vec![], vec![]], 0, 5).unwrap();
        assert!(empty.row(1).is_empty());
        assert_eq!(empty.n_queries(), 2);
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xncf");
        let cache = NegativeCache::from_rows(1, &[vec![0], vec![1]], 0, 2).unwrap();
        cache.write_file(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(NegativeCache::read_file(&path).is_err());
    }
}
