//! Model checkpoint files.
//!
//! Layout (little-endian): magic `XAST`, version `u32`, the 32-byte config
//! digest, the encoder section (`input_dim`, `proj_dim`, `out_dim`,
//! `hidden` as `u64`, then the projection, hidden weight and bias as
//! row-major `f32`), and the classifier section (`L`, `d` as `u64`, then
//! `L * d` row-major `f32`).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::classifier::ClassifierBank;
use crate::encoder::{EncoderParams, EncoderShape, HiddenLayer};
use crate::linalg::DenseMatrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"XAST";
const VERSION: u32 = 1;

/// Final parameters of a run with the digest of the config that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub encoder: EncoderParams<f32>,
    pub bank: ClassifierBank<f32>,
    pub config_digest: [u8; 32],
}

fn write_f32s<W: Write>(w: &mut W, v: &[f32]) -> std::io::Result<()> {
    v.iter().try_for_each(|&x| w.write_f32::<LE>(x))
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> std::io::Result<DenseMatrix<f32>> {
    let mut data = vec![0f32; rows * cols];
    r.read_f32_into::<LE>(&mut data)?;
    Ok(DenseMatrix::from_vec(rows, cols, data).expect("sized buffer"))
}

impl TrainedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out).expect("writing to memory");
        out
    }

    fn encode<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_all(&self.config_digest)?;
        let s = self.encoder.shape();
        for dim in [s.input_dim, s.proj_dim, s.out_dim, s.hidden as usize] {
            w.write_u64::<LE>(dim as u64)?;
        }
        for t in self.encoder.tensors() {
            write_f32s(w, t)?;
        }
        w.write_u64::<LE>(self.bank.n_labels() as u64)?;
        w.write_u64::<LE>(self.bank.dim() as u64)?;
        write_f32s(w, self.bank.weights().as_slice())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        self.encode(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(std::fs::File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "bad magic, expected XAST"));
        }
        let version = r.read_u32::<LE>().map_err(io)?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let mut config_digest = [0u8; 32];
        r.read_exact(&mut config_digest).map_err(io)?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.read_u64::<LE>().map_err(io)? as usize;
        }
        let shape = EncoderShape {
            input_dim: dims[0],
            proj_dim: dims[1],
            out_dim: dims[2],
            hidden: match dims[3] {
                0 => false,
                1 => true,
                f => return Err(Error::format(path, format!("bad hidden flag {f}"))),
            },
        };
        if shape.input_dim == 0 || shape.proj_dim == 0 || shape.out_dim == 0 {
            return Err(Error::format(path, "zero encoder dimension"));
        }
        let projection = read_matrix(&mut r, shape.input_dim, shape.proj_dim).map_err(io)?;
        let hidden = if shape.hidden {
            let weight = read_matrix(&mut r, shape.proj_dim, shape.out_dim).map_err(io)?;
            let mut bias = vec![0f32; shape.out_dim];
            r.read_f32_into::<LE>(&mut bias).map_err(io)?;
            Some(HiddenLayer { weight, bias })
        } else {
            None
        };
        let encoder = EncoderParams::new(projection, hidden).map_err(|e| Error::format(path, e.to_string()))?;
        let n_labels = r.read_u64::<LE>().map_err(io)? as usize;
        let dim = r.read_u64::<LE>().map_err(io)? as usize;
        if dim != shape.out_dim {
            return Err(Error::format(
                path,
                format!(
                    "classifier dimension {dim} differs from embedding dimension {}",
                    shape.out_dim
                ),
            ));
        }
        let weights = read_matrix(&mut r, n_labels, dim).map_err(io)?;
        let bank = ClassifierBank::new(weights, 0.0).map_err(|e| Error::format(path, e.to_string()))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Self {
            encoder,
            bank,
            config_digest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::init_classifiers;
    use crate::encoder::{init_encoder, InitScheme};

    #[test]
    fn round_trip_both_encoder_kinds() {
        for hidden in [false, true] {
            let shape = EncoderShape {
                input_dim: 11,
                proj_dim: if hidden { 5 } else { 4 },
                out_dim: 4,
                hidden,
            };
            let model = TrainedModel {
                encoder: init_encoder(shape, InitScheme::UniformScaled, 3).unwrap(),
                bank: init_classifiers(9, 4, InitScheme::UniformScaled, 4).unwrap(),
                config_digest: [7; 32],
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.xast");
            model.save(&path).unwrap();
            let bytes = std::fs::read(&path).unwrap();
            assert_eq!(bytes, model.to_bytes());
            assert_eq!(&bytes[..4], b"XAST");
            assert_eq!(TrainedModel::load(&path).unwrap(), model);
            std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
            assert!(TrainedModel::load(&path).is_err());
        }
    }
}
