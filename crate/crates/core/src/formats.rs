//! On-disk formats shared by the harness and the CLI.
//!
//! OMTN tensor layout (all little-endian):
//! - magic `b"OMTN"`
//! - version: u32 (= 1)
//! - rank: u32
//! - dims: rank × u64
//! - data: f32 × product(dims), row-major
//!
//! Id sidecars hold one decimal token id per line, in column order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sequence::TokenId;

pub const OMTN_MAGIC: [u8; 4] = *b"OMTN";
pub const OMTN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let numel: u64 = dims.iter().product();
        if numel != data.len() as u64 {
            return Err(Error::invalid(format!(
                "tensor dims {dims:?} hold {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::from_vec(r as usize, c as usize, self.data),
            _ => Err(Error::schema(format!("expected a rank-2 tensor, got dims {:?}", self.dims))),
        }
    }
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(&OMTN_MAGIC)?;
    w.write_all(&OMTN_VERSION.to_le_bytes())?;
    w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
    for d in &t.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != OMTN_MAGIC {
        return Err(Error::schema(format!("bad magic {magic:02x?}")));
    }
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf).map_err(truncated)?;
    let version = u32::from_le_bytes(u32_buf);
    if version != OMTN_VERSION {
        return Err(Error::schema(format!("unsupported OMTN version {version}")));
    }
    r.read_exact(&mut u32_buf).map_err(truncated)?;
    let rank = u32::from_le_bytes(u32_buf) as usize;

    let mut dims = Vec::with_capacity(rank);
    let mut u64_buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut u64_buf).map_err(truncated)?;
        dims.push(u64::from_le_bytes(u64_buf));
    }
    let numel = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::schema("tensor size overflows"))?;

    let mut bytes = Vec::new();
    r.take(numel).read_to_end(&mut bytes)?;
    if bytes.len() as u64 != numel {
        return Err(Error::schema(format!(
            "tensor data truncated: expected {numel} bytes, got {}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor { dims, data })
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::schema("tensor header truncated")
    } else {
        Error::Io(e)
    }
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_tensor(BufWriter::new(File::create(path)?), t)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| missing(path, e))?;
    read_tensor(BufReader::new(f))
}

pub fn save_ids(path: impl AsRef<Path>, ids: &[TokenId]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_ids(path: impl AsRef<Path>) -> Result<Vec<TokenId>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| missing(path, e))?;
    let mut ids = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id = line.parse().map_err(|_| {
            Error::schema(format!("{}:{}: not a token id: {line:?}", path.display(), n + 1))
        })?;
        ids.push(id);
    }
    Ok(ids)
}

/// A missing input file is reported as an invalid input rather than an I/O
/// failure so callers can tell it apart from write errors.
fn missing(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::invalid(format!("missing file {}", path.display()))
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let expected: Vec<u8> = [
            &b"OMTN"[..],
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &2u64.to_le_bytes(),
            &1u64.to_le_bytes(),
            &1.0f32.to_le_bytes(),
            &(-2.5f32).to_le_bytes(),
        ]
        .concat();
        assert_eq!(buf, expected);
        assert_eq!(&buf[..8], &[0x4F, 0x4D, 0x54, 0x4E, 1, 0, 0, 0]);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(matches!(read_tensor(&b"NOPE\x01\0\0\0"[..]), Err(Error::Schema(_))));
        let mut v2 = b"OMTN".to_vec();
        v2.extend(2u32.to_le_bytes());
        v2.extend(0u32.to_le_bytes());
        assert!(matches!(read_tensor(&v2[..]), Err(Error::Schema(_))));
        let mut short = Vec::new();
        write_tensor(&mut short, &Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        short.truncate(short.len() - 2);
        assert!(matches!(read_tensor(&short[..]), Err(Error::Schema(_))));
        assert!(matches!(read_tensor(&b"OM"[..]), Err(Error::Schema(_))));
    }

    #[test]
    fn ids_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cols.ids");
        save_ids(&p, &[4, 0, 17]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "4\n0\n17\n");
        assert_eq!(load_ids(&p).unwrap(), vec![4, 0, 17]);
        std::fs::write(&p, "4\nx\n").unwrap();
        assert!(matches!(load_ids(&p), Err(Error::Schema(_))));
        assert!(matches!(load_ids(dir.path().join("nope")), Err(Error::InvalidInput(_))));
    }

    proptest! {
        #[test]
        fn tensor_round_trip(dims in prop::collection::vec(0u64..5, 0..4), seed in any::<u64>()) {
            let n: u64 = dims.iter().product();
            let mut rng = crate::numerics::Rng::new(seed);
            let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.next_u64() as u32)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&buf[..]).unwrap();
            prop_assert_eq!(&back.dims, &t.dims);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back.data), bits(&t.data));
        }
    }
}
