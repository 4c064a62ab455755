//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ADVGCKPT"
//! version  u32      1
//! config   u32 length + UTF-8 ModelConfig text form
//! count    u32      number of tensors
//! tensor   u32 name length, name bytes, u32 rank, rank x u32 extents,
//!          product(extents) x f32 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ADVGCKPT";
const VERSION: u32 = 1;

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("file truncated")
    } else {
        Error::Io(e)
    }
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format(format!("{n} does not fit in u32")))
}

/// Values are stored as `f32`, so a save/load/save cycle is byte-identical.
pub fn write_checkpoint<W: Write>(w: &mut W, params: &Params) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    let config = params.config().to_string();
    write_u32(w, to_u32(config.len())?)?;
    w.write_all(config.as_bytes())?;
    write_u32(w, to_u32(params.entries().len())?)?;
    for e in params.entries() {
        write_u32(w, to_u32(e.name.len())?)?;
        w.write_all(e.name.as_bytes())?;
        write_u32(w, to_u32(e.tensor.rank())?)?;
        for &d in e.tensor.shape() {
            write_u32(w, to_u32(d)?)?;
        }
        write_f32s(w, e.tensor.data())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Params> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text).map_err(truncated)?;
    let text = String::from_utf8(text).map_err(|_| Error::format("config is not UTF-8"))?;
    let config: ModelConfig = text.parse()?;
    let mut params = Params::template(&config)?;
    let count = read_u32(r)? as usize;
    if count != params.entries().len() {
        return Err(Error::format(format!(
            "checkpoint holds {count} tensors, architecture needs {}",
            params.entries().len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = read_f32s(r, n)?;
        params.set(&name, Tensor::new(shape, values)?)?;
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &Params) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Params> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn save_load_save_is_byte_identical() {
        let p = build_model(&ModelConfig::tiny(3, 8, 4), 11).unwrap();
        let mut first = Vec::new();
        write_checkpoint(&mut first, &p).unwrap();
        let q = read_checkpoint(&mut first.as_slice()).unwrap();
        let mut second = Vec::new();
        write_checkpoint(&mut second, &q).unwrap();
        assert_eq!(first, second);
        for (a, b) in p.entries().iter().zip(q.entries()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = build_model(&ModelConfig::tiny(3, 8, 4), 11).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &p).unwrap();
        assert!(matches!(read_checkpoint(&mut &bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));
    }
}
