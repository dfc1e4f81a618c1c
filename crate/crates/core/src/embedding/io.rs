//! `RANAEMB1` binary format: magic, little-endian `u32` entity count,
//! relation count and dim, then row-major `f32` entity and relation matrices.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"RANAEMB1";

pub(crate) fn write_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f32s(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn truncated(what: &str) -> Error {
    Error::Format(format!("truncated file while reading {what}"))
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| truncated(what))?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = n
        .checked_mul(4)
        .ok_or_else(|| Error::Format(format!("{what}: size overflow")))?;
    let mut buf = Vec::new();
    r.take(bytes as u64)
        .read_to_end(&mut buf)
        .map_err(|_| truncated(what))?;
    if buf.len() != bytes {
        return Err(truncated(what));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_magic(r: &mut impl Read, magic: &[u8]) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf).map_err(|_| truncated("magic"))?;
    if buf != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub fn write_embeddings(w: &mut impl Write, table: &EmbeddingTable) -> std::io::Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    write_u32(w, table.entity_count())?;
    write_u32(w, table.relation_count())?;
    write_u32(w, table.dim())?;
    write_f32s(w, table.entities.data())?;
    write_f32s(w, table.relations.data())
}

pub fn read_embeddings(r: &mut impl Read) -> Result<EmbeddingTable> {
    read_magic(r, EMBEDDING_MAGIC)?;
    let ne = read_u32(r, "entity count")?;
    let nr = read_u32(r, "relation count")?;
    let dim = read_u32(r, "dim")?;
    if dim == 0 {
        return Err(Error::Format("declared dim is zero".into()));
    }
    let entities = read_f32s(r, ne * dim, "entity matrix")?;
    let relations = read_f32s(r, nr * dim, "relation matrix")?;
    let table = EmbeddingTable {
        entities: Matrix::from_vec(ne, dim, entities),
        relations: Matrix::from_vec(nr, dim, relations),
    };
    if !table.is_finite() {
        return Err(Error::Format("non-finite embedding values".into()));
    }
    Ok(table)
}

pub fn save_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_embeddings(&mut buf, table).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a table, rejecting files whose length disagrees with the header.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let table = read_embeddings(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after declared matrices",
            cursor.len()
        )));
    }
    Ok(table)
}
