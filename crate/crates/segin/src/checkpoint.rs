//! Checkpoint archive: a JSON config header followed by named parameter
//! tensors, each stored as a `SEGT` blob. Loading matches tensors to the
//! model by name, so archives stay compatible across layout-preserving code
//! changes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::segt::{read_segt, write_segt, SegtError, SegtTensor};

const MAGIC: &str = "SEGAR 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad archive: {0}")]
    Malformed(String),
    #[error("bad header json: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] SegtError),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has {got} values, expected {expected}")]
    LengthMismatch { name: String, expected: usize, got: usize },
}

/// A named flat tensor with its original shape.
pub type NamedTensor = (String, Vec<usize>, Vec<f32>);

fn to_segt(shape: &[usize], data: &[f32]) -> SegtTensor {
    let d0 = shape.first().copied().unwrap_or(1).max(1);
    let rest: usize = if shape.len() > 1 { shape[1..].iter().product() } else { 1 };
    SegtTensor::from_flat(d0, rest.max(1), data.to_vec())
}

pub fn save_archive(
    path: &Path,
    header: &serde_json::Value,
    tensors: &[NamedTensor],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    let header_line = serde_json::to_string(header)?;
    writeln!(w, "{header_line}")?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let mut blob = Vec::new();
        write_segt(&mut blob, &to_segt(shape, data))?;
        w.write_all(&(blob.len() as u32).to_le_bytes())?;
        w.write_all(&blob)?;
    }
    Ok(())
}

fn read_line<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let mut buf = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(CheckpointError::Malformed("unexpected end of file".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        buf.push(byte[0]);
        if buf.len() > 1 << 20 {
            return Err(CheckpointError::Malformed("header line too long".into()));
        }
    }
    String::from_utf8(buf).map_err(|_| CheckpointError::Malformed("non-utf8 header".into()))
}

fn read_exact_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn load_archive(path: &Path) -> Result<(serde_json::Value, Vec<NamedTensor>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_line(&mut r)?;
    if magic != MAGIC {
        return Err(CheckpointError::Malformed(format!("bad magic `{magic}`")));
    }
    let header: serde_json::Value = serde_json::from_str(&read_line(&mut r)?)?;
    let count = u32::from_le_bytes(read_exact_vec(&mut r, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact_vec(&mut r, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact_vec(&mut r, name_len)?)
            .map_err(|_| CheckpointError::Malformed("non-utf8 tensor name".into()))?;
        let blob_len = u32::from_le_bytes(read_exact_vec(&mut r, 4)?.try_into().unwrap()) as usize;
        let blob = read_exact_vec(&mut r, blob_len)?;
        let t = read_segt(&mut blob.as_slice())?;
        tensors.push((name, vec![t.dims.0, t.dims.1, t.dims.2], t.data));
    }
    Ok((header, tensors))
}

/// Copy `tensors` into named destination slices, erroring on absent names or
/// length mismatches. Extra tensors in the archive are ignored.
pub fn assign_by_name(
    tensors: &[NamedTensor],
    targets: &mut [(String, &mut [f32])],
) -> Result<(), CheckpointError> {
    for (name, value) in targets.iter_mut() {
        let found = tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if found.2.len() != value.len() {
            return Err(CheckpointError::LengthMismatch {
                name: name.clone(),
                expected: value.len(),
                got: found.2.len(),
            });
        }
        value.copy_from_slice(&found.2);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let header = serde_json::json!({"version": 1, "step": 7});
        let tensors: Vec<NamedTensor> = vec![
            ("gen.w".into(), vec![2, 3], vec![0.1, -0.2, 0.3, 1e-30, f32::MIN_POSITIVE, 5.0]),
            ("disc.u".into(), vec![2], vec![0.6, -0.8]),
        ];
        save_archive(&path, &header, &tensors).unwrap();
        let (h, back) = load_archive(&path).unwrap();
        assert_eq!(h["step"], 7);
        assert_eq!(back.len(), 2);
        for ((n1, _, d1), (n2, _, d2)) in tensors.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(d1.len(), d2.len());
            for (a, b) in d1.iter().zip(d2.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn assign_reports_missing_and_mismatched() {
        let tensors: Vec<NamedTensor> = vec![("a".into(), vec![2], vec![1.0, 2.0])];
        let mut buf = [0.0f32; 2];
        let mut targets = vec![("a".to_string(), &mut buf[..])];
        assign_by_name(&tensors, &mut targets).unwrap();
        assert_eq!(buf, [1.0, 2.0]);

        let mut buf3 = [0.0f32; 3];
        let mut targets = vec![("a".to_string(), &mut buf3[..])];
        assert!(matches!(
            assign_by_name(&tensors, &mut targets),
            Err(CheckpointError::LengthMismatch { .. })
        ));

        let mut buf = [0.0f32; 1];
        let mut targets = vec![("zz".to_string(), &mut buf[..])];
        assert!(matches!(
            assign_by_name(&tensors, &mut targets),
            Err(CheckpointError::MissingTensor(_))
        ));
    }
}
