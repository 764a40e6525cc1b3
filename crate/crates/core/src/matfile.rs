//! Binary matrix file format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CDLM"
//! 4       2     version (u16 LE) = 1
//! 6       4     rows (u32 LE)
//! 10      4     cols (u32 LE)
//! 14      8*rows*cols  f64 LE payload, column-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDLM";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 14;

pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    let rows = u32::try_from(m.nrows())
        .map_err(|_| Error::InvalidParameter(format!("{} rows exceed u32", m.nrows())))?;
    let cols = u32::try_from(m.ncols())
        .map_err(|_| Error::InvalidParameter(format!("{} cols exceed u32", m.ncols())))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<DMatrix<f64>> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected CDLM".into()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
        data.push(f64::from_le_bytes(buf));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(DMatrix::from_vec(rows, cols, data))
}

pub fn save(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    write_matrix(BufWriter::new(File::create(path)?), m)
}

pub fn load(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_matrix(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round_trip(m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut buf = Vec::new();
        write_matrix(&mut buf, m).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + 8 * m.len());
        read_matrix(buf.as_slice()).unwrap()
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in 0usize..6, cols in 0usize..6, bits in prop::collection::vec(any::<u64>(), 36)) {
            let m = DMatrix::from_fn(rows, cols, |i, j| f64::from_bits(bits[i * 6 + j]));
            let back = round_trip(&m);
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in m.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn signed_zero_and_subnormals_survive() {
        let vals = [0.0, -0.0, f64::MIN_POSITIVE / 4.0, -5e-324, f64::INFINITY, 1.5];
        let m = DMatrix::from_column_slice(2, 3, &vals);
        let back = round_trip(&m);
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout() {
        let m = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(&buf[0..4], b"CDLM");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..10], &[2, 0, 0, 0]);
        assert_eq!(&buf[10..14], &[1, 0, 0, 0]);
        assert_eq!(&buf[14..22], &1.0f64.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = DMatrix::from_column_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_matrix(bad_magic.as_slice()), Err(Error::Format(_))));

        let mut bad_version = buf.clone();
        bad_version[4] = 2;
        assert!(matches!(read_matrix(bad_version.as_slice()), Err(Error::Format(_))));

        assert!(matches!(read_matrix(&buf[..buf.len() - 1]), Err(Error::Format(_))));

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(read_matrix(trailing.as_slice()), Err(Error::Format(_))));
    }
}
