//! Parameter container serialization.
//!
//! Layout (also documented in docs/formats.md):
//!
//! ```text
//! PARAMS 1\n
//! <count>\n
//! <name> <rows> <cols>\n   (count lines, registration order)
//! DATA\n
//! <raw little-endian f32 values, concatenated in header order>
//! ```
//!
//! Values are stored as 32-bit floats regardless of the in-memory scalar
//! type; loading reproduces `f32` stores bit-for-bit.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::{DenseArray, Scalar};

const MAGIC: &str = "PARAMS 1";

/// Write the store to `w` in the container layout above.
pub fn write_params<S: Scalar, W: Write>(store: &ParamStore<S>, w: &mut W) -> Result<()> {
    let io_err = |e: std::io::Error| Error::io("<params>", e);
    writeln!(w, "{MAGIC}").map_err(io_err)?;
    writeln!(w, "{}", store.len()).map_err(io_err)?;
    for i in 0..store.len() {
        let v = store.value_at(i);
        writeln!(w, "{} {} {}", store.name_at(i), v.rows(), v.cols()).map_err(io_err)?;
    }
    writeln!(w, "DATA").map_err(io_err)?;
    let mut buf = Vec::with_capacity(store.element_count() * 4);
    for i in 0..store.len() {
        for &x in store.value_at(i).as_slice() {
            buf.extend_from_slice(&x.into_f32().to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io_err)?;
    Ok(())
}

/// Read a store written by [`write_params`].
pub fn read_params<R: BufRead>(r: &mut R) -> Result<ParamStore<f32>> {
    let data_err = |m: String| Error::Data(format!("params container: {m}"));
    let mut line = String::new();
    let mut read_line = |r: &mut R, what: &str| -> Result<String> {
        line.clear();
        let n = r
            .read_line(&mut line)
            .map_err(|e| Error::io("<params>", e))?;
        if n == 0 {
            return Err(data_err(format!("unexpected end of file reading {what}")));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };

    let magic = read_line(r, "magic")?;
    if magic != MAGIC {
        return Err(data_err(format!("bad magic `{magic}`")));
    }
    let count: usize = read_line(r, "count")?
        .parse()
        .map_err(|e| data_err(format!("bad count: {e}")))?;
    let mut headers = Vec::with_capacity(count);
    for i in 0..count {
        let h = read_line(r, "header")?;
        let parts: Vec<&str> = h.split(' ').collect();
        if parts.len() != 3 {
            return Err(data_err(format!("header line {i} malformed: `{h}`")));
        }
        let rows: usize = parts[1]
            .parse()
            .map_err(|e| data_err(format!("header line {i} rows: {e}")))?;
        let cols: usize = parts[2]
            .parse()
            .map_err(|e| data_err(format!("header line {i} cols: {e}")))?;
        headers.push((parts[0].to_string(), rows, cols));
    }
    let sep = read_line(r, "DATA separator")?;
    if sep != "DATA" {
        return Err(data_err(format!("expected DATA, got `{sep}`")));
    }
    let total: usize = headers.iter().map(|(_, r2, c)| r2 * c).sum();
    let mut bytes = vec![0u8; total * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| data_err(format!("binary block short: {e}")))?;
    let mut store = ParamStore::new();
    let mut off = 0usize;
    for (name, rows, cols) in headers {
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let b = [
                bytes[(off + i) * 4],
                bytes[(off + i) * 4 + 1],
                bytes[(off + i) * 4 + 2],
                bytes[(off + i) * 4 + 3],
            ];
            data.push(f32::from_le_bytes(b));
        }
        off += n;
        store.register(&name, DenseArray::new(rows, cols, data)?)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut store = ParamStore::<f32>::new();
        let (w, b) = super::super::params::init_linear::<f32>(5, 3, 7);
        store.register("layer.w", w).unwrap();
        store.register("layer.b", b).unwrap();
        store.register("eta", DenseArray::scalar(-2.659_26_f32)).unwrap();

        let mut buf = Vec::new();
        write_params(&store, &mut buf).unwrap();
        let loaded = read_params(&mut Cursor::new(&buf)).unwrap();

        assert_eq!(loaded.names(), store.names());
        for name in store.names() {
            let a = store.value(name).unwrap();
            let b = loaded.value(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_data_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.register("w", DenseArray::zeros(2, 2)).unwrap();
        let mut buf = Vec::new();
        write_params(&store, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_params(&mut Cursor::new(&buf)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = read_params(&mut Cursor::new(b"NOPE 9\n")).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
