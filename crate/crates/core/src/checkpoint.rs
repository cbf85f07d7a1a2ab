//! Binary checkpoints for the backbone and the matching modules.
//!
//! Layout (all integers little-endian): 4-byte magic `EFCK`, u16 format
//! version, u8 payload kind, u64 master seed, kind-specific dimension
//! table, then every parameter as f64 in `param_slices` order. Round-trips
//! are bit-exact; any trailing bytes or truncation is an error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::backbone::SplitModel;
use crate::error::{Error, Result};
use crate::math::{DenseLayer, Mlp};
use crate::semgroup::CommModules;

const MAGIC: &[u8; 4] = b"EFCK";
const VERSION: u16 = 1;
const KIND_BACKBONE: u8 = 1;
const KIND_COMM: u8 = 2;
/// Upper bound on any stored dimension count or width; rejects garbage
/// length fields before they turn into huge allocations.
const MAX_DIM: u32 = 1 << 20;

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(&b);
        Ok(u64::from_le_bytes(a))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| {
                let mut a = [0u8; 8];
                a.copy_from_slice(c);
                f64::from_le_bytes(a)
            })
            .collect())
    }

    fn dim(&mut self) -> Result<usize> {
        let v = self.u32()?;
        if v == 0 || v > MAX_DIM {
            return Err(Error::Checkpoint(format!("implausible dimension {v}")));
        }
        Ok(v as usize)
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut one = [0u8; 1];
        match self.inner.read(&mut one) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Checkpoint("trailing bytes after payload".into())),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

fn read_header<R: Read>(r: &mut Reader<R>, expected_kind: u8) -> Result<u64> {
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let kind = r.u8()?;
    if kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "payload kind {kind}, expected {expected_kind}"
        )));
    }
    r.u64()
}

fn write_header<W: Write>(w: &mut W, kind: u8, seed: u64) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    w.write_all(&seed.to_le_bytes())?;
    Ok(())
}

fn write_dims<W: Write>(w: &mut W, dims: &[usize]) -> Result<()> {
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_dims<R: Read>(r: &mut Reader<R>) -> Result<Vec<usize>> {
    let n = r.u32()?;
    if !(2..=64).contains(&n) {
        return Err(Error::Checkpoint(format!("implausible width count {n}")));
    }
    (0..n).map(|_| r.dim()).collect()
}

fn mlp_widths(mlp: &Mlp) -> Vec<usize> {
    let mut widths = vec![mlp.in_dim()];
    widths.extend(mlp.layers().iter().map(|l| l.out_dim()));
    widths
}

fn write_params<W: Write>(w: &mut W, slices: &[&[f64]]) -> Result<()> {
    for slice in slices {
        for v in *slice {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_mlp<R: Read>(r: &mut Reader<R>, widths: &[usize]) -> Result<Mlp> {
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let wv = r.f64_vec(fan_out * fan_in)?;
        let weight = Array2::from_shape_vec((fan_out, fan_in), wv)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bias = Array1::from_vec(r.f64_vec(fan_out)?);
        layers.push(DenseLayer { weight, bias });
    }
    Mlp::from_layers(layers)
}

pub fn save_backbone(path: &Path, model: &SplitModel, seed: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, KIND_BACKBONE, seed)?;
    w.write_all(&(model.split() as u32).to_le_bytes())?;
    write_dims(&mut w, &mlp_widths(model.mlp()))?;
    write_params(&mut w, &model.mlp().param_slices())?;
    w.flush()?;
    Ok(())
}

pub fn load_backbone(path: &Path) -> Result<(SplitModel, u64)> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let seed = read_header(&mut r, KIND_BACKBONE)?;
    let split = r.u32()? as usize;
    let widths = read_dims(&mut r)?;
    let mlp = read_mlp(&mut r, &widths)?;
    r.expect_eof()?;
    let classes = *widths.last().expect("non-empty widths");
    SplitModel::from_parts(mlp, split, classes).map(|m| (m, seed))
}

pub fn save_comm(path: &Path, modules: &CommModules, seed: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, KIND_COMM, seed)?;
    write_dims(&mut w, &mlp_widths(&modules.phi_q))?;
    write_dims(&mut w, &mlp_widths(&modules.phi_k))?;
    write_dims(&mut w, &[modules.w_a.nrows(), modules.w_a.ncols()])?;
    write_params(&mut w, &modules.param_slices())?;
    w.flush()?;
    Ok(())
}

pub fn load_comm(path: &Path) -> Result<(CommModules, u64)> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let seed = read_header(&mut r, KIND_COMM)?;
    let q_widths = read_dims(&mut r)?;
    let k_widths = read_dims(&mut r)?;
    let wa_dims = read_dims(&mut r)?;
    if wa_dims.len() != 2 {
        return Err(Error::Checkpoint(format!(
            "attention weight needs 2 dims, found {}",
            wa_dims.len()
        )));
    }
    let phi_q = read_mlp(&mut r, &q_widths)?;
    let phi_k = read_mlp(&mut r, &k_widths)?;
    let wv = r.f64_vec(wa_dims[0] * wa_dims[1])?;
    let w_a = Array2::from_shape_vec((wa_dims[0], wa_dims[1]), wv)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    r.expect_eof()?;
    CommModules::from_parts(phi_q, phi_k, w_a).map(|m| (m, seed))
}
