//! `RANACKPT1` checkpoints: magic, an embedded `RANAEMB1` section, a `u32`
//! matrix count (5), each encoder matrix as `u32` rows, `u32` cols and
//! row-major `f32` data, then the `f64` LeakyReLU slope. Little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::embedding::io::{read_f32s, read_magic, read_u32, write_f32s, write_u32};
use crate::embedding::{read_embeddings, write_embeddings, EmbeddingTable};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"RANACKPT1";

pub fn write_checkpoint(w: &mut impl Write, embeddings: &EmbeddingTable, encoder: &EncoderParams) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_embeddings(w, embeddings)?;
    let mats = encoder.matrices();
    write_u32(w, mats.len())?;
    for m in mats {
        write_u32(w, m.rows())?;
        write_u32(w, m.cols())?;
        write_f32s(w, m.data())?;
    }
    w.write_all(&encoder.leaky_slope.to_le_bytes())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(EmbeddingTable, EncoderParams)> {
    read_magic(r, CHECKPOINT_MAGIC)?;
    let embeddings = read_embeddings(r)?;
    let count = read_u32(r, "matrix count")?;
    if count != 5 {
        return Err(Error::Format(format!("expected 5 encoder matrices, found {count}")));
    }
    let mut mats = Vec::with_capacity(5);
    for k in 1..=5 {
        let what = format!("W{k}");
        let rows = read_u32(r, &what)?;
        let cols = read_u32(r, &what)?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("{what}: size overflow")))?;
        mats.push(Matrix::from_vec(rows, cols, read_f32s(r, n, &what)?));
    }
    let mut slope = [0u8; 8];
    r.read_exact(&mut slope)
        .map_err(|_| Error::Format("truncated file while reading leaky slope".into()))?;
    let mut it = mats.into_iter();
    let mut next = || it.next().expect("five matrices");
    let encoder = EncoderParams {
        w1: next(),
        w2: next(),
        w3: next(),
        w4: next(),
        w5: next(),
        leaky_slope: f64::from_le_bytes(slope),
    };
    encoder.validate().map_err(|e| Error::Format(e.to_string()))?;
    if encoder.dim() != embeddings.dim() {
        return Err(Error::Format(format!(
            "encoder dim {} does not match embedding dim {}",
            encoder.dim(),
            embeddings.dim()
        )));
    }
    Ok((embeddings, encoder))
}

pub fn save_checkpoint(path: impl AsRef<Path>, embeddings: &EmbeddingTable, encoder: &EncoderParams) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, embeddings, encoder).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, rejecting trailing bytes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EmbeddingTable, EncoderParams)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let out = read_checkpoint(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", cursor.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::init_embeddings;

    fn sample() -> (EmbeddingTable, EncoderParams) {
        (init_embeddings(7, 6, 4, 1), EncoderParams::init(4, 4, 0.01, 2))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (emb, enc) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &emb, &enc).unwrap();
        let (e2, c2) = load_checkpoint(&path).unwrap();
        assert_eq!(e2, emb);
        assert_eq!(c2, enc);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &e2, &c2).unwrap();
        assert_eq!(again, fs::read(&path).unwrap());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (emb, enc) = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &emb, &enc).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));

        let mut inner = buf.clone();
        inner[CHECKPOINT_MAGIC.len()] = b'Q';
        assert!(matches!(read_checkpoint(&mut inner.as_slice()), Err(Error::Format(_))));

        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(&mut &short[..]), Err(Error::Format(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.ckpt");
        let mut long = buf.clone();
        long.push(0);
        fs::write(&path, long).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
