//! Parameter checkpoint I/O.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "CAMLCKPT"
//! u32   tensor count
//! per tensor:
//!   u32  name length, then name bytes (UTF-8)
//!   u32  rank, then rank x u64 extents
//!   f32  payload (product of extents entries)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{CamlError, Result};

pub const CKPT_MAGIC: &[u8; 8] = b"CAMLCKPT";

pub fn save_checkpoint(path: &Path, named: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, tensor) in named {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &e in &shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in tensor.data().value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads every tensor in file order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != CKPT_MAGIC {
        return Err(CamlError::Format(format!(
            "{}: bad checkpoint magic {:?}",
            path.display(),
            magic
        )));
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, path)?;
        let name = String::from_utf8(name).map_err(|_| {
            CamlError::Format(format!("{}: tensor name is not UTF-8", path.display()))
        })?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, path)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0.0f32; numel];
        for v in payload.iter_mut() {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, path)?;
            *v = f32::from_le_bytes(b);
        }
        out.push((name, shape, payload));
    }
    Ok(out)
}

/// Restores a parameter set in place; every name must be present with a
/// matching shape.
pub fn load_into(path: &Path, named: &[(String, Tensor)]) -> Result<()> {
    let loaded = load_checkpoint(path)?;
    for (name, tensor) in named {
        let found = loaded.iter().find(|(n, _, _)| n == name).ok_or_else(|| {
            CamlError::Format(format!(
                "{}: checkpoint is missing tensor {name:?}",
                path.display()
            ))
        })?;
        if found.1 != tensor.shape() {
            return Err(CamlError::Format(format!(
                "{}: tensor {name:?} has shape {:?} in the checkpoint but {:?} in the model",
                path.display(),
                found.1,
                tensor.shape()
            )));
        }
        tensor.data_mut().value.copy_from_slice(&found.2);
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|_| {
        CamlError::Format(format!("{}: truncated checkpoint", path.display()))
    })
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = Tensor::from_vec(&[2, 3], vec![1.5, -0.25, 3.0e-8, 0.0, -1.0, 42.0]);
        let b = Tensor::from_vec(&[4], vec![f32::MIN_POSITIVE, 1.0, -2.0, 0.5]);
        let named = vec![("enc.w".to_string(), a), ("enc.b".to_string(), b)];
        save_checkpoint(&path, &named).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "enc.w");
        assert_eq!(loaded[0].1, vec![2, 3]);
        for (x, y) in loaded[0].2.iter().zip(named[0].1.data().value.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        let fresh = vec![
            ("enc.w".to_string(), Tensor::zeros(&[2, 3])),
            ("enc.b".to_string(), Tensor::zeros(&[4])),
        ];
        load_into(&path, &fresh).unwrap();
        assert_eq!(fresh[1].1.value(), named[1].1.value());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT\x00\x00\x00\x00").unwrap();
        match load_checkpoint(&path) {
            Err(CamlError::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.ckpt");
        let t = Tensor::from_vec(&[8], vec![1.0; 8]);
        save_checkpoint(&path, &[("w".to_string(), t)]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        match load_checkpoint(&path) {
            Err(CamlError::Format(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_name_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let t = Tensor::from_vec(&[1], vec![7.0]);
        save_checkpoint(&path, &[("a".to_string(), t)]).unwrap();
        let want = vec![("b".to_string(), Tensor::zeros(&[1]))];
        assert!(load_into(&path, &want).is_err());
    }
}
