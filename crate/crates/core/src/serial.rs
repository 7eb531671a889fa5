//! Binary round-trip serialization of banded and hierarchical matrices.
//!
//! Self-describing container: magic bytes, format version, a kind tag, then
//! the dimensions and tree. All floats are IEEE-754 little-endian bit
//! patterns, so a round trip reproduces the matrix exactly.

use crate::banded::BandedMatrix;
use crate::error::{Error, Result};
use crate::hmatrix::{HBlock, HMatrix};
use crate::lowrank::LowRankFactor;
use nalgebra::DMatrix;
use std::io::{Read, Write};

pub const MAGIC: [u8; 4] = *b"QSMX";
pub const VERSION: u32 = 1;

const KIND_BANDED: u8 = 1;
const KIND_HMATRIX: u8 = 2;

const TAG_LEAF: u8 = 0;
const TAG_BRANCH: u8 = 1;

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_usize(r: &mut impl Read, what: &str) -> Result<usize> {
    let v = get_u64(r)?;
    usize::try_from(v).map_err(|_| Error::Format(format!("{what} out of range: {v}")))
}

fn get_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0f64; count];
    let mut b = [0u8; 8];
    for v in out.iter_mut() {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(out)
}

fn put_matrix(w: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    put_u64(w, m.nrows() as u64)?;
    put_u64(w, m.ncols() as u64)?;
    put_f64s(w, m.as_slice())
}

fn get_matrix(r: &mut impl Read) -> Result<DMatrix<f64>> {
    let rows = get_usize(r, "matrix rows")?;
    let cols = get_usize(r, "matrix cols")?;
    if rows.checked_mul(cols).is_none() || rows * cols > (1usize << 34) {
        return Err(Error::Format(format!("matrix size {rows}x{cols} implausible")));
    }
    let data = get_f64s(r, rows * cols)?;
    Ok(DMatrix::from_column_slice(rows, cols, &data))
}

fn put_header(w: &mut impl Write, kind: u8) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    Ok(())
}

fn check_header(r: &mut impl Read, kind: u8) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let k = get_u8(r)?;
    if k != kind {
        return Err(Error::Format(format!(
            "container holds kind {k}, expected {kind}"
        )));
    }
    Ok(())
}

pub fn write_banded(w: &mut impl Write, m: &BandedMatrix) -> Result<()> {
    put_header(w, KIND_BANDED)?;
    let n = m.size();
    put_u64(w, n as u64)?;
    put_u64(w, m.lower_bandwidth() as u64)?;
    put_u64(w, m.upper_bandwidth() as u64)?;
    w.write_all(&[u8::from(m.is_symmetric_flagged())])?;
    for i in 0..n {
        let (j0, j1) = m.row_range(i);
        for j in j0..j1 {
            w.write_all(&m.get(i, j).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_banded(r: &mut impl Read) -> Result<BandedMatrix> {
    check_header(r, KIND_BANDED)?;
    let n = get_usize(r, "banded size")?;
    if n == 0 || n > (1usize << 32) {
        return Err(Error::Format(format!("banded size {n} implausible")));
    }
    let lb = get_usize(r, "lower bandwidth")?;
    let ub = get_usize(r, "upper bandwidth")?;
    if lb >= n || ub >= n {
        return Err(Error::Format("bandwidths exceed the size".into()));
    }
    let sym = get_u8(r)? != 0;
    if sym && lb != ub {
        return Err(Error::Format("symmetric flag with unequal bandwidths".into()));
    }
    let mut m = BandedMatrix::zeros(n, lb, ub);
    let mut b = [0u8; 8];
    for i in 0..n {
        let (j0, j1) = m.row_range(i);
        for j in j0..j1 {
            r.read_exact(&mut b)?;
            m.set(i, j, f64::from_le_bytes(b));
        }
    }
    if sym {
        m.set_symmetric_flag(true);
    }
    Ok(m)
}

fn put_lowrank(w: &mut impl Write, f: &LowRankFactor) -> Result<()> {
    w.write_all(&[u8::from(f.is_symmetric())])?;
    put_matrix(w, f.u())?;
    put_matrix(w, f.d())?;
    if !f.is_symmetric() {
        put_matrix(w, f.v())?;
    }
    Ok(())
}

fn get_lowrank(r: &mut impl Read) -> Result<LowRankFactor> {
    let sym = get_u8(r)? != 0;
    let u = get_matrix(r)?;
    let d = get_matrix(r)?;
    if u.ncols() != d.nrows() || !d.is_square() {
        return Err(Error::Format("inconsistent low-rank factor shapes".into()));
    }
    if sym {
        Ok(LowRankFactor::new_symmetric(u, d))
    } else {
        let v = get_matrix(r)?;
        if v.ncols() != d.ncols() {
            return Err(Error::Format("inconsistent low-rank factor shapes".into()));
        }
        Ok(LowRankFactor::new(u, d, v))
    }
}

fn put_node(w: &mut impl Write, h: &HMatrix) -> Result<()> {
    match h.block() {
        HBlock::Leaf(m) => {
            w.write_all(&[TAG_LEAF])?;
            put_matrix(w, m)
        }
        HBlock::Branch { a11, a22, a12, a21 } => {
            w.write_all(&[TAG_BRANCH])?;
            put_u64(w, a11.size() as u64)?;
            put_u64(w, a22.size() as u64)?;
            put_lowrank(w, a12)?;
            put_lowrank(w, a21)?;
            put_node(w, a11)?;
            put_node(w, a22)
        }
    }
}

fn get_node(r: &mut impl Read, depth: usize) -> Result<HMatrix> {
    if depth > 64 {
        return Err(Error::Format("tree deeper than 64 levels".into()));
    }
    match get_u8(r)? {
        TAG_LEAF => {
            let m = get_matrix(r)?;
            if !m.is_square() {
                return Err(Error::Format("leaf block is not square".into()));
            }
            Ok(HMatrix::from_leaf(m))
        }
        TAG_BRANCH => {
            let n1 = get_usize(r, "first block size")?;
            let n2 = get_usize(r, "second block size")?;
            let a12 = get_lowrank(r)?;
            let a21 = get_lowrank(r)?;
            if a12.nrows() != n1 || a12.ncols() != n2 || a21.nrows() != n2 || a21.ncols() != n1 {
                return Err(Error::Format("offdiagonal factor shapes disagree".into()));
            }
            let a11 = get_node(r, depth + 1)?;
            let a22 = get_node(r, depth + 1)?;
            if a11.size() != n1 || a22.size() != n2 {
                return Err(Error::Format("child sizes disagree with the header".into()));
            }
            Ok(HMatrix::branch(a11, a22, a12, a21))
        }
        t => Err(Error::Format(format!("unknown node tag {t}"))),
    }
}

pub fn write_hmatrix(w: &mut impl Write, h: &HMatrix) -> Result<()> {
    put_header(w, KIND_HMATRIX)?;
    put_u64(w, h.size() as u64)?;
    put_node(w, h)
}

pub fn read_hmatrix(r: &mut impl Read) -> Result<HMatrix> {
    check_header(r, KIND_HMATRIX)?;
    let n = get_usize(r, "matrix size")?;
    let h = get_node(r, 0)?;
    if h.size() != n {
        return Err(Error::Format("tree size disagrees with the header".into()));
    }
    Ok(h)
}

pub fn save_banded(path: &std::path::Path, m: &BandedMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_banded(&mut f, m)
}

pub fn load_banded(path: &std::path::Path) -> Result<BandedMatrix> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_banded(&mut f)
}

pub fn save_hmatrix(path: &std::path::Path, h: &HMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_hmatrix(&mut f, h)
}

pub fn load_hmatrix(path: &std::path::Path) -> Result<HMatrix> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_hmatrix(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::test_rng;
    use rand::Rng;

    #[test]
    fn banded_roundtrip_bitexact() {
        let mut rng = test_rng(111);
        let mut m = BandedMatrix::zeros(33, 2, 4);
        for i in 0..33 {
            let (j0, j1) = m.row_range(i);
            for j in j0..j1 {
                m.set(i, j, rng.random::<f64>() - 0.5);
            }
        }
        let mut buf = Vec::new();
        write_banded(&mut buf, &m).unwrap();
        let m2 = read_banded(&mut buf.as_slice()).unwrap();
        assert_eq!(m.to_dense(), m2.to_dense());
        assert_eq!(m.lower_bandwidth(), m2.lower_bandwidth());
    }

    #[test]
    fn hmatrix_roundtrip_bitexact() {
        let mut rng = test_rng(112);
        let d = DMatrix::<f64>::from_fn(100, 100, |i, j| {
            if i.abs_diff(j) < 4 {
                rng.random::<f64>()
            } else {
                1.0 / (1.0 + (i as f64 - j as f64).powi(2))
            }
        });
        let h = HMatrix::from_dense(&d, 1e-8, 30);
        let mut buf = Vec::new();
        write_hmatrix(&mut buf, &h).unwrap();
        let h2 = read_hmatrix(&mut buf.as_slice()).unwrap();
        assert_eq!(h.to_dense(), h2.to_dense());
        assert_eq!(h.hss_rank(), h2.hss_rank());
    }

    #[test]
    fn rejects_corrupt_header() {
        let mut buf = Vec::new();
        write_banded(&mut buf, &BandedMatrix::identity(4)).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_banded(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
        let mut buf2 = Vec::new();
        write_banded(&mut buf2, &BandedMatrix::identity(4)).unwrap();
        // kind mismatch
        assert!(read_hmatrix(&mut buf2.as_slice()).is_err());
    }
}
