//! Flat binary checkpoint for a [`ParameterStore`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FGM1"  u32 version
//! repeated until EOF:
//!     u32 name_len, name bytes (UTF-8), u8 group tag, u32 rows, u32 cols,
//!     rows*cols f64 values, row-major
//! ```

use std::io::{self, Read, Write};

use ndarray::Array2;
use thiserror::Error;

use super::store::{Group, ParameterStore};

pub const MAGIC: &[u8; 4] = b"FGM1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("parameter name is not UTF-8")]
    Utf8,
    #[error("unknown group tag {0}")]
    GroupTag(u8),
    #[error("truncated record for {0:?}")]
    Truncated(String),
    #[error("{0}")]
    Store(#[from] super::AutodiffError),
}

pub fn write_checkpoint<W: Write>(store: &ParameterStore, mut w: W) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.group.tag()])?;
        let (rows, cols) = p.value.dim();
        w.write_all(&(rows as u32).to_le_bytes())?;
        w.write_all(&(cols as u32).to_le_bytes())?;
        for v in p.value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParameterStore, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut store = ParameterStore::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Utf8)?;
        let truncated = |_| CheckpointError::Truncated(name.clone());
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(truncated)?;
        let group = Group::from_tag(tag[0]).ok_or(CheckpointError::GroupTag(tag[0]))?;
        let rows = read_u32(&mut r).map_err(truncated)? as usize;
        let cols = read_u32(&mut r).map_err(truncated)? as usize;
        let mut values = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf).map_err(truncated)?;
            values.push(f64::from_le_bytes(buf));
        }
        let value = Array2::from_shape_vec((rows, cols), values).expect("length matches shape");
        store.add(name, group, value)?;
    }
    Ok(store)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
