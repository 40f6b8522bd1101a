//! Binary checkpoint format.
//!
//! ```text
//! magic   "ESDSCKPT"            8 bytes
//! version u32 LE
//! count   u32 LE
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, values f64 LE × Π dims }
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};

use super::net::{Dense, GatedCell, PolicyParams};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ESDSCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(params: &PolicyParams) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::with_capacity(16 + params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

type Tensor = (Vec<usize>, Vec<f64>);

pub fn from_bytes(bytes: &[u8]) -> Result<PolicyParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
        }
        tensors.push((name, (shape, values)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    assemble(tensors)
}

fn assemble(tensors: Vec<(String, Tensor)>) -> Result<PolicyParams> {
    let mut map: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut take = |name: &str| map.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")));
    fn mat((shape, v): Tensor) -> Result<Array2<f64>> {
        match shape[..] {
            [r, c] => Array2::from_shape_vec((r, c), v).map_err(|e| Error::Checkpoint(e.to_string())),
            _ => Err(Error::Checkpoint("expected a matrix".into())),
        }
    }
    fn vec1((shape, v): Tensor) -> Result<Array1<f64>> {
        match shape[..] {
            [_] => Ok(Array1::from(v)),
            _ => Err(Error::Checkpoint("expected a vector".into())),
        }
    }
    let mut trunk = Vec::new();
    let mut i = 0;
    while let Ok(w) = take(&format!("trunk.{i}.w")) {
        trunk.push(Dense { w: mat(w)?, b: vec1(take(&format!("trunk.{i}.b"))?)? });
        i += 1;
    }
    let cell = match take("cell.wz") {
        Ok(wz) => Some(GatedCell {
            wz: mat(wz)?,
            uz: mat(take("cell.uz")?)?,
            wc: mat(take("cell.wc")?)?,
            uc: mat(take("cell.uc")?)?,
            bz: vec1(take("cell.bz")?)?,
            bc: vec1(take("cell.bc")?)?,
        }),
        Err(_) => None,
    };
    let params = PolicyParams {
        trunk,
        cell,
        mean: Dense { w: mat(take("mean.w")?)?, b: vec1(take("mean.b")?)? },
        value: Dense { w: mat(take("value.w")?)?, b: vec1(take("value.b")?)? },
        log_std: vec1(take("log_std")?)?,
    };
    if let Some(name) = map.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    check_shapes(&params)?;
    Ok(params)
}

fn check_shapes(p: &PolicyParams) -> Result<()> {
    let mut width = p.obs_dim();
    for d in &p.trunk {
        if d.w.nrows() != width || d.b.len() != d.w.ncols() {
            return Err(Error::Checkpoint("inconsistent trunk shapes".into()));
        }
        width = d.w.ncols();
    }
    if let Some(c) = &p.cell {
        let n = c.size();
        let ok = c.wz.dim() == (width, n)
            && c.wc.dim() == (width, n)
            && c.uz.dim() == (n, n)
            && c.uc.dim() == (n, n)
            && c.bc.len() == n;
        if !ok {
            return Err(Error::Checkpoint("inconsistent recurrent cell shapes".into()));
        }
        width = n;
    }
    let act = p.log_std.len();
    if p.mean.w.dim() != (width, act) || p.mean.b.len() != act || p.value.w.dim() != (width, 1) || p.value.b.len() != 1 {
        return Err(Error::Checkpoint("inconsistent head shapes".into()));
    }
    Ok(())
}

pub fn save(path: impl AsRef<Path>, params: &PolicyParams) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<PolicyParams> {
    from_bytes(&std::fs::read(path)?)
}
