//! The `SEGT` tensor file format: a one-line ASCII header
//! `SEGT <H_f> <W_f> <C> <H> <W>\n` followed by `H_f * W_f * C` little-endian
//! `f32` values in row-priority order.
//!
//! Feature maps store their grid dimensions plus the source image size. Other
//! tensors (checkpoint parameters, correspondence dumps) reuse the same
//! container with the trailing `<H> <W>` fields mirroring the leading dims.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const SEGT_MAGIC: &str = "SEGT";

#[derive(Debug, Error)]
pub enum SegtError {
    #[error("i/o error reading tensor: {0}")]
    Io(#[from] io::Error),
    #[error("bad tensor header: {0}")]
    Header(String),
    #[error("tensor payload truncated: expected {expected} f32 values, got {got}")]
    Truncated { expected: usize, got: usize },
}

/// A tensor as stored on disk: dims `(d0, d1, d2)` and the source-image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SegtTensor {
    pub dims: (usize, usize, usize),
    pub source: (usize, usize),
    pub data: Vec<f32>,
}

impl SegtTensor {
    pub fn new(dims: (usize, usize, usize), source: (usize, usize), data: Vec<f32>) -> Self {
        assert_eq!(dims.0 * dims.1 * dims.2, data.len(), "dims/data mismatch");
        SegtTensor { dims, source, data }
    }

    /// Wrap a flat parameter vector; the source fields mirror the leading dims.
    pub fn from_flat(d0: usize, d1: usize, data: Vec<f32>) -> Self {
        assert_eq!(d0 * d1, data.len());
        SegtTensor { dims: (d0, d1, 1), source: (d0, d1), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn write_segt<W: Write>(w: &mut W, t: &SegtTensor) -> Result<(), SegtError> {
    writeln!(
        w,
        "{} {} {} {} {} {}",
        SEGT_MAGIC, t.dims.0, t.dims.1, t.dims.2, t.source.0, t.source.1
    )?;
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_segt<R: Read>(r: &mut R) -> Result<SegtTensor, SegtError> {
    let mut header = Vec::with_capacity(64);
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(SegtError::Header("unexpected end of file".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > 256 {
            return Err(SegtError::Header("header line too long".into()));
        }
    }
    let line = String::from_utf8(header).map_err(|_| SegtError::Header("non-utf8 header".into()))?;
    let fields: Vec<&str> = line.split_ascii_whitespace().collect();
    if fields.len() != 6 || fields[0] != SEGT_MAGIC {
        return Err(SegtError::Header(format!("expected `SEGT d0 d1 d2 h w`, got `{line}`")));
    }
    let parse = |s: &str| -> Result<usize, SegtError> {
        s.parse::<usize>()
            .map_err(|_| SegtError::Header(format!("bad dimension `{s}`")))
    };
    let dims = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    let source = (parse(fields[4])?, parse(fields[5])?);
    let expected = dims.0 * dims.1 * dims.2;

    let mut buf = vec![0u8; expected * 4];
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(SegtError::Truncated { expected, got: filled / 4 });
        }
        filled += n;
    }
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(SegtTensor { dims, source, data })
}

pub fn save_segt(path: &Path, t: &SegtTensor) -> Result<(), SegtError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_segt(&mut w, t)
}

pub fn load_segt(path: &Path) -> Result<SegtTensor, SegtError> {
    let mut r = BufReader::new(File::open(path)?);
    read_segt(&mut r)
}
