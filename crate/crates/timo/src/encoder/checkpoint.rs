use crate::error::{Error, Result};
use crate::nn::ParamVisit;
use crate::numerics::{Dtype, Element, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TMCK";
const VERSION: u32 = 1;

/// Serialize named tensors as a flat ordered list:
/// magic, version, count, then per tensor
/// `{name_len, name, dtype code, rank, extents…, little-endian payload}`.
pub fn write_named_tensors<E: Element, W: Write>(
    w: &mut W,
    items: &[(String, &Tensor<E>)],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for (name, t) in items {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&E::DTYPE.code().to_le_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        match E::DTYPE {
            Dtype::F32 => {
                for &v in t.data() {
                    w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &v in t.data() {
                    w.write_all(&v.to_f64().to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_named_tensors<E: Element, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<E>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".to_string()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".to_string()))?;
        let dtype = Dtype::from_code(read_u32(r)?)?;
        if dtype != E::DTYPE {
            return Err(Error::Format(format!(
                "tensor {name} has dtype {dtype}, expected {}",
                E::DTYPE
            )));
        }
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        match E::DTYPE {
            Dtype::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut buf)?;
                    data.push(E::from_f64(f32::from_le_bytes(buf) as f64));
                }
            }
            Dtype::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut buf)?;
                    data.push(E::from_f64(f64::from_le_bytes(buf)));
                }
            }
        }
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

/// Write every tensor of a parameter tree (learnable values and
/// buffers) to `path` in visitation order.
pub fn save_params<E: Element, P: ParamVisit<E>>(params: &P, path: &Path) -> Result<()> {
    let mut items: Vec<(String, Tensor<E>)> = Vec::new();
    params.visit_tensors("", &mut |name, t| items.push((name, t.clone())));
    let refs: Vec<(String, &Tensor<E>)> =
        items.iter().map(|(n, t)| (n.clone(), t)).collect();
    let mut w = BufWriter::new(File::create(path)?);
    write_named_tensors(&mut w, &refs)?;
    w.flush()?;
    Ok(())
}

/// Load a checkpoint produced by [`save_params`] into an identically
/// structured parameter tree. Entries must match the visitation order,
/// names, and shapes exactly.
pub fn load_params<E: Element, P: ParamVisit<E>>(params: &mut P, path: &Path) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let entries = read_named_tensors::<E, _>(&mut r)?;
    let mut i = 0;
    let mut err: Option<Error> = None;
    params.visit_tensors_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some((ename, etensor)) = entries.get(i) else {
            err = Some(Error::Schema(format!(
                "checkpoint is missing tensor {name}"
            )));
            return;
        };
        if *ename != name {
            err = Some(Error::Schema(format!(
                "checkpoint order mismatch: expected {name}, found {ename}"
            )));
            return;
        }
        if etensor.shape() != t.shape() {
            err = Some(Error::Schema(format!(
                "tensor {name}: shape {:?} in file, {:?} in params",
                etensor.shape(),
                t.shape()
            )));
            return;
        }
        *t = etensor.clone();
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != entries.len() {
        return Err(Error::Schema(format!(
            "checkpoint has {} extra tensors",
            entries.len() - i
        )));
    }
    Ok(())
}
