//! Matrix files.
//!
//! Two formats are understood, chosen by file extension:
//!
//! * `.hsm`: the 4 ASCII bytes `HSM1`, then `rows` and `cols` as little-endian
//!   `u64`, then `rows * cols` little-endian `f64` values in column-major order.
//! * anything else: CSV, one matrix row per line, `#` starts a comment line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Result, UnmixError};

pub const HSM_MAGIC: &[u8; 4] = b"HSM1";
const HSM_HEADER_LEN: usize = 4 + 8 + 8;

fn format_err(path: &Path, reason: impl Into<String>) -> UnmixError {
    UnmixError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> UnmixError {
    let path = path.to_path_buf();
    move |source| UnmixError::Io { path, source }
}

fn is_binary(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("hsm"))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    if is_binary(path) {
        decode_hsm(&bytes).map_err(|reason| format_err(path, reason))
    } else {
        decode_csv(&bytes).map_err(|reason| format_err(path, reason))
    }
}

pub fn write_matrix(path: impl AsRef<Path>, matrix: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_binary(path) {
        encode_hsm(matrix)
    } else {
        encode_csv(matrix)
    };
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))
}

pub fn encode_hsm(matrix: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HSM_HEADER_LEN + 8 * matrix.len());
    out.extend_from_slice(HSM_MAGIC);
    out.extend_from_slice(&(matrix.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.ncols() as u64).to_le_bytes());
    // nalgebra storage is already column-major.
    for v in matrix.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_hsm(bytes: &[u8]) -> std::result::Result<DMatrix<f64>, String> {
    if bytes.len() < HSM_HEADER_LEN {
        return Err(format!("file is {} bytes, shorter than the header", bytes.len()));
    }
    if &bytes[..4] != HSM_MAGIC {
        return Err("missing HSM1 magic".into());
    }
    let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let rows = read_u64(4);
    let cols = read_u64(12);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| format!("dimensions {rows}x{cols} overflow"))?;
    let payload = &bytes[HSM_HEADER_LEN..];
    if payload.len() as u64 != expected {
        return Err(format!(
            "payload holds {} bytes but a {rows}x{cols} matrix needs {expected}",
            payload.len()
        ));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    Ok(DMatrix::from_iterator(rows as usize, cols as usize, values))
}

fn encode_csv(matrix: &DMatrix<f64>) -> Vec<u8> {
    let mut out = String::new();
    for row in matrix.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

fn decode_csv(bytes: &[u8]) -> std::result::Result<DMatrix<f64>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        let row = record
            .iter()
            .map(|field| {
                field
                    .parse::<f64>()
                    .map_err(|_| format!("record {}: `{field}` is not a number", line + 1))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err("no data rows".into());
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Writes a CSV table with a header row (row means, benchmark tallies).
pub fn write_table(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    writer.write_record(header).map_err(|e| csv_io(path, e))?;
    for r in rows {
        writer.write_record(r).map_err(|e| csv_io(path, e))?;
    }
    writer.flush().map_err(io_err(path))
}

fn csv_io(path: &Path, e: csv::Error) -> UnmixError {
    UnmixError::Io {
        path: PathBuf::from(path),
        source: std::io::Error::other(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_small_binary_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        for name in ["m.hsm", "m.csv"] {
            let p = dir.path().join(name);
            write_matrix(&p, &m).unwrap();
            assert_eq!(read_matrix(&p).unwrap(), m);
        }
    }

    #[test]
    fn binary_layout_is_column_major_le() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = encode_hsm(&m);
        assert_eq!(&b[..4], b"HSM1");
        assert_eq!(u64::from_le_bytes(b[4..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        let second = f64::from_le_bytes(b[28..36].try_into().unwrap());
        assert_eq!(second, 3.0);
    }

    #[test]
    fn csv_comments_are_skipped() {
        let m = decode_csv(b"# header comment\n1, 2\n# mid\n3,4\n").unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn ragged_csv_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "1,2\n3\n").unwrap();
        assert!(matches!(read_matrix(&p), Err(UnmixError::Format { .. })));
    }

    #[test]
    fn truncated_binary_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.hsm");
        let mut b = encode_hsm(&DMatrix::from_element(3, 3, 1.0));
        b.truncate(b.len() - 5);
        fs::write(&p, b).unwrap();
        assert!(matches!(read_matrix(&p), Err(UnmixError::Format { .. })));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut b = encode_hsm(&DMatrix::from_element(1, 1, 1.0));
        b[0] = b'X';
        assert!(decode_hsm(&b).is_err());
    }

    proptest! {
        #[test]
        fn binary_roundtrip_is_bit_exact(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 36),
        ) {
            let m = DMatrix::from_fn(rows, cols, |i, j| seed[i * 6 + j]);
            let back = decode_hsm(&encode_hsm(&m)).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
