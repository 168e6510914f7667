//! Binary dataset cache.
//!
//! Layout (little-endian): magic `XCDS`, version `u32`, `N D L` as `u64`,
//! row CSR (offsets `u64` x N+1, feature ids `u32`, values `f32`), positives
//! (offsets `u64` x N+1, label ids `u32`), a presence byte, then the label
//! feature CSR (offsets `u64` x L+1, ids, values) when present.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{SparseDataset, SparseVector};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"XCDS";
const VERSION: u32 = 1;

pub fn write_binary(ds: &SparseDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(ds, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_binary(path: impl AsRef<Path>) -> Result<SparseDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode(&mut BufReader::new(file), path)
}

fn encode_csr<W: Write>(rows: &[SparseVector], w: &mut W) -> std::io::Result<()> {
    let mut offset = 0u64;
    w.write_u64::<LE>(0)?;
    for r in rows {
        offset += r.nnz() as u64;
        w.write_u64::<LE>(offset)?;
    }
    for r in rows {
        for &j in r.indices() {
            w.write_u32::<LE>(j)?;
        }
    }
    for r in rows {
        for &v in r.values() {
            w.write_f32::<LE>(v)?;
        }
    }
    Ok(())
}

fn encode<W: Write>(ds: &SparseDataset, w: &mut W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u64::<LE>(ds.n_points() as u64)?;
    w.write_u64::<LE>(ds.n_features() as u64)?;
    w.write_u64::<LE>(ds.n_labels() as u64)?;
    encode_csr(ds.rows(), w)?;

    let mut offset = 0u64;
    w.write_u64::<LE>(0)?;
    for p in ds.all_positives() {
        offset += p.len() as u64;
        w.write_u64::<LE>(offset)?;
    }
    for p in ds.all_positives() {
        for &l in p {
            w.write_u32::<LE>(l)?;
        }
    }
    match ds.label_features() {
        Some(lf) => {
            w.write_u8(1)?;
            encode_csr(lf, w)
        }
        None => w.write_u8(0),
    }
}

fn read_offsets<R: Read>(r: &mut R, n: usize, path: &Path) -> Result<Vec<usize>> {
    let mut offsets = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        offsets.push(r.read_u64::<LE>().map_err(|e| Error::io(path, e))? as usize);
    }
    if offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::format(path, "offsets not monotone from zero"));
    }
    Ok(offsets)
}

fn decode_csr<R: Read>(r: &mut R, n: usize, path: &Path) -> Result<Vec<SparseVector>> {
    let offsets = read_offsets(r, n, path)?;
    let nnz = offsets[n];
    let mut ids = vec![0u32; nnz];
    let mut vals = vec![0f32; nnz];
    r.read_u32_into::<LE>(&mut ids).map_err(|e| Error::io(path, e))?;
    r.read_f32_into::<LE>(&mut vals).map_err(|e| Error::io(path, e))?;
    offsets
        .windows(2)
        .map(|w| {
            SparseVector::new(ids[w[0]..w[1]].to_vec(), vals[w[0]..w[1]].to_vec())
                .map_err(|e| Error::format(path, e.to_string()))
        })
        .collect()
}

fn decode<R: Read>(r: &mut R, path: &Path) -> Result<SparseDataset> {
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::format(path, "bad magic, expected XCDS"));
    }
    let version = r.read_u32::<LE>().map_err(io)?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = r.read_u64::<LE>().map_err(io)? as usize;
    let d = r.read_u64::<LE>().map_err(io)? as usize;
    let l = r.read_u64::<LE>().map_err(io)? as usize;
    let rows = decode_csr(r, n, path)?;

    let offsets = read_offsets(r, n, path)?;
    let mut labels = vec![0u32; offsets[n]];
    r.read_u32_into::<LE>(&mut labels).map_err(io)?;
    let positives = offsets.windows(2).map(|w| labels[w[0]..w[1]].to_vec()).collect();

    let label_features = match r.read_u8().map_err(io)? {
        0 => None,
        1 => Some(decode_csr(r, l, path)?),
        b => return Err(Error::format(path, format!("bad presence flag {b}"))),
    };
    SparseDataset::new(d, l, rows, positives, label_features)
}
