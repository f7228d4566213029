//! Little-endian binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       8           magic "CCVDARR\0"
//! 8       4           dtype code (1 = f64)
//! 12      4           ndim
//! 16      8 * ndim    dims, u64 each
//! ...     8 * n       row-major f64 payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CCVDARR\0";
const DTYPE_F64: u32 = 1;

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let expect: usize = dims.iter().product();
    if expect != data.len() {
        return Err(Error::shape(
            format!("write_tensor {}", path.display()),
            expect,
            data.len(),
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&DTYPE_F64.to_le_bytes()).map_err(io)?;
    w.write_all(&(dims.len() as u32).to_le_bytes()).map_err(io)?;
    for d in dims {
        w.write_all(&(*d as u64).to_le_bytes()).map_err(io)?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path.display().to_string(), e);
    let parse = |reason: &str| Error::Parse {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(parse("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    if u32::from_le_bytes(b4) != DTYPE_F64 {
        return Err(parse("unsupported dtype"));
    }
    r.read_exact(&mut b4).map_err(io)?;
    let ndim = u32::from_le_bytes(b4) as usize;
    if ndim > 8 {
        return Err(parse("implausible rank"));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut b8 = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut b8).map_err(io)?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8).map_err(io)?;
        data.push(f64::from_le_bytes(b8));
    }
    // trailing garbage means a corrupt file
    if r.read(&mut b8).map_err(io)? != 0 {
        return Err(parse("trailing bytes"));
    }
    Ok((dims, data))
}

pub fn write_array1(path: &Path, a: &Array1<f64>) -> Result<()> {
    write_tensor(path, &[a.len()], a.as_slice().expect("contiguous"))
}

pub fn read_array1(path: &Path) -> Result<Array1<f64>> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 1 {
        return Err(Error::shape(path.display().to_string(), "rank 1", dims.len()));
    }
    Ok(Array1::from_vec(data))
}

pub fn write_array2(path: &Path, a: &Array2<f64>) -> Result<()> {
    let flat: Vec<f64> = a.iter().cloned().collect();
    write_tensor(path, &[a.nrows(), a.ncols()], &flat)
}

pub fn read_array2(path: &Path) -> Result<Array2<f64>> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 2 {
        return Err(Error::shape(path.display().to_string(), "rank 2", dims.len()));
    }
    Array2::from_shape_vec((dims[0], dims[1]), data).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn write_array4(path: &Path, a: &Array4<f64>) -> Result<()> {
    let (d0, d1, d2, d3) = a.dim();
    let flat: Vec<f64> = a.iter().cloned().collect();
    write_tensor(path, &[d0, d1, d2, d3], &flat)
}

pub fn read_array4(path: &Path) -> Result<Array4<f64>> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 4 {
        return Err(Error::shape(path.display().to_string(), "rank 4", dims.len()));
    }
    Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data).map_err(|e| {
        Error::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let a = rng::normal_array2(&mut rng::stream_rng(1, 0), 5, 7, 3.0);
        write_array2(&p, &a).unwrap();
        let b = read_array2(&p).unwrap();
        assert_eq!(a, b);
        // same content writes identical bytes
        let p2 = dir.path().join("t2.bin");
        write_array2(&p2, &b).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let a = Array1::from_vec(vec![1.0, 2.0, 3.0]);
        write_array1(&p, &a).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_array1(&p).is_err());

        write_array1(&p, &a).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_array1(&p).is_err());
    }

    #[test]
    fn special_values_survive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let vals = vec![0.0, -0.0, f64::MIN_POSITIVE, 1e300, -1e-300];
        write_tensor(&p, &[5], &vals).unwrap();
        let (_, back) = read_tensor(&p).unwrap();
        for (a, b) in vals.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
