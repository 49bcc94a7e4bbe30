//! Binary matrix container.
//!
//! Layout: the 6-byte magic `ORIM1\n`, an ASCII header line
//! `<rows> <cols> f64le\n`, then `rows * cols` little-endian IEEE doubles in
//! row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use orim_core::{OrimError, Result};

pub const MAGIC: &[u8; 6] = b"ORIM1\n";
const ENCODING: &str = "f64le";
/// Longest header line accepted, newline included.
const MAX_HEADER: usize = 64;

pub fn encode(m: &DMatrix<f64>) -> Vec<u8> {
    let header = format!("{} {} {ENCODING}\n", m.nrows(), m.ncols());
    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

fn malformed(msg: impl Into<String>) -> OrimError {
    OrimError::Format(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| malformed("missing ORIM1 magic"))?;
    let newline = rest
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("unterminated header line"))?;
    let header = std::str::from_utf8(&rest[..newline]).map_err(|_| malformed("header is not ASCII"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    let [rows, cols, enc] = fields[..] else {
        return Err(malformed(format!(
            "expected `<rows> <cols> {ENCODING}`, got `{header}`"
        )));
    };
    if enc != ENCODING {
        return Err(malformed(format!("unsupported encoding `{enc}`")));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| malformed(format!("bad {what} count `{s}`")))
    };
    let (rows, cols) = (parse(rows, "row")?, parse(cols, "column")?);
    let payload = &rest[newline + 1..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| malformed("dimensions overflow"))?;
    if payload.len() != expected {
        return Err(malformed(format!(
            "payload has {} bytes, header promises {expected} ({rows}x{cols})",
            payload.len()
        )));
    }
    Ok(DMatrix::from_row_iterator(
        rows,
        cols,
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))),
    ))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| OrimError::Io(format!("{}: {e}", path.display())))?;
    file.write_all(&encode(m))
        .map_err(|e| OrimError::Io(format!("{}: {e}", path.display())))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| OrimError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        OrimError::Format(msg) => OrimError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Plain CSV copy, one matrix row per line, shortest round-trip formatting.
pub fn to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_row_major_little_endian() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = encode(&m);
        let header = b"ORIM1\n2 3 f64le\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 48);
        let second = f64::from_le_bytes(bytes[header.len() + 8..header.len() + 16].try_into().unwrap());
        assert_eq!(second, 2.0);
    }

    #[test]
    fn empty_matrix_round_trips() {
        let m = DMatrix::<f64>::zeros(0, 4);
        assert_eq!(decode(&encode(&m)).unwrap().shape(), (0, 4));
    }

    #[test]
    fn special_values_survive() {
        let m = DMatrix::from_row_slice(
            1,
            5,
            &[f64::NAN, -0.0, f64::INFINITY, f64::MIN_POSITIVE / 2.0, f64::MAX],
        );
        let back = decode(&encode(&m)).unwrap();
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_damaged_input() {
        let good = encode(&DMatrix::from_element(2, 2, 1.5));
        assert!(decode(&good[1..]).is_err());
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        assert!(decode(b"ORIM1\n2 2 f32le\n").is_err());
        assert!(decode(b"ORIM1\n2 x f64le\n").is_err());
        assert!(decode(b"ORIM1\n2 2").is_err());
        assert!(decode(b"ORIM1\n99999999999999999999 2 f64le\n").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.orim");
        let m = DMatrix::from_fn(7, 3, |i, j| (i as f64 - 2.5) / (j as f64 + 0.3));
        write_matrix(&path, &m).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
        let missing = read_matrix(&dir.path().join("nope.orim")).unwrap_err();
        assert!(matches!(missing, OrimError::Io(_)));
    }

    #[test]
    fn csv_parses_back_exactly() {
        let m = DMatrix::from_row_slice(2, 2, &[0.1, -1e-300, 1.0 / 3.0, 7.0]);
        let parsed: Vec<f64> = to_csv(&m)
            .lines()
            .flat_map(|l| l.split(',').map(|c| c.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(parsed, vec![0.1, -1e-300, 1.0 / 3.0, 7.0]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in 0usize..6,
            cols in 0usize..6,
            seed in proptest::collection::vec(any::<u64>(), 36),
        ) {
            let m = DMatrix::from_fn(rows, cols, |i, j| f64::from_bits(seed[i * 6 + j]));
            let back = decode(&encode(&m)).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in m.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
