//! Little-endian binary formats for vector files and built indexes.
//!
//! Vector file:
//!
//! ```text
//! magic    b"VLBE"
//! version  u32 = 1
//! dim      u32
//! count    u64
//! count × { id_len u16, id bytes (UTF-8), dim × f32 }
//! ```
//!
//! Index file: magic `b"VLBI"`, version u32, mode u8 (0 exhaustive,
//! 1 approximate), then for approximate mode `m, ef_construction, ef_search`
//! as u32, `seed` u64, `entry, max_level` as u32; then the vector-file body
//! from `dim` onward; then for approximate mode, per node a u8 layer count
//! and per layer a u32 link count followed by u32 links.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::hnsw::HnswGraph;
use super::{EmbeddingIndex, EmbeddingVector, HnswParams, IndexError, IndexMode, Scalar};

pub const VECTOR_MAGIC: [u8; 4] = *b"VLBE";
pub const INDEX_MAGIC: [u8; 4] = *b"VLBI";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("id of {0} bytes exceeds u16")]
    IdTooLong(usize),
    #[error("id is not UTF-8")]
    IdEncoding,
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn write_body<T: Scalar, W: Write>(
    w: &mut W,
    dim: usize,
    items: impl ExactSizeIterator<Item = (String, Vec<T>)>,
) -> Result<(), FormatError> {
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u64::<LittleEndian>(items.len() as u64)?;
    for (id, values) in items {
        let bytes = id.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| FormatError::IdTooLong(bytes.len()))?;
        w.write_u16::<LittleEndian>(len)?;
        w.write_all(bytes)?;
        for v in values {
            w.write_f32::<LittleEndian>(v.to_f64_lossy() as f32)?;
        }
    }
    Ok(())
}

fn read_body<T: Scalar, R: Read>(r: &mut R) -> Result<(usize, Vec<(String, Vec<T>)>), FormatError> {
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u64::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>()? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| FormatError::IdEncoding)?;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(T::from_f64_lossy(r.read_f32::<LittleEndian>()? as f64));
        }
        out.push((id, values));
    }
    Ok((dim, out))
}

fn read_magic<R: Read>(r: &mut R, expected: [u8; 4]) -> Result<(), FormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != expected {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    Ok(())
}

pub fn write_vectors<T: Scalar, W: Write>(mut w: W, vectors: &[EmbeddingVector<T>]) -> Result<(), FormatError> {
    let dim = vectors.first().map_or(0, |v| v.dim());
    for v in vectors {
        if v.dim() != dim {
            return Err(IndexError::DimMismatch {
                expected: dim,
                actual: v.dim(),
            }
            .into());
        }
    }
    w.write_all(&VECTOR_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    write_body(
        &mut w,
        dim,
        vectors.iter().map(|v| (v.id().to_string(), v.values().to_vec())),
    )
}

/// Reads a vector file. Components are stored as `f32`, so vectors are
/// renormalized on load to restore the unit-norm invariant exactly.
pub fn read_vectors<T: Scalar, R: Read>(mut r: R) -> Result<Vec<EmbeddingVector<T>>, FormatError> {
    read_magic(&mut r, VECTOR_MAGIC)?;
    let (_, items) = read_body::<T, _>(&mut r)?;
    items
        .into_iter()
        .map(|(id, v)| EmbeddingVector::normalized(id, v).map_err(FormatError::from))
        .collect()
}

pub fn write_index<T: Scalar, W: Write>(mut w: W, idx: &EmbeddingIndex<T>) -> Result<(), FormatError> {
    w.write_all(&INDEX_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    match (idx.mode(), idx.graph()) {
        (IndexMode::Approximate(p), Some(g)) => {
            w.write_u8(1)?;
            w.write_u32::<LittleEndian>(p.m as u32)?;
            w.write_u32::<LittleEndian>(p.ef_construction as u32)?;
            w.write_u32::<LittleEndian>(p.ef_search as u32)?;
            w.write_u64::<LittleEndian>(p.seed)?;
            w.write_u32::<LittleEndian>(g.entry as u32)?;
            w.write_u32::<LittleEndian>(g.max_level as u32)?;
        }
        _ => w.write_u8(0)?,
    }
    write_body(
        &mut w,
        idx.dim(),
        (0..idx.len()).map(|i| (idx.ids()[i].clone(), idx.vector(i).to_vec())),
    )?;
    if let Some(g) = idx.graph() {
        for node in &g.links {
            w.write_u8(node.len() as u8)?;
            for layer in node {
                w.write_u32::<LittleEndian>(layer.len() as u32)?;
                for &l in layer {
                    w.write_u32::<LittleEndian>(l)?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_index<T: Scalar, R: Read>(mut r: R) -> Result<EmbeddingIndex<T>, FormatError> {
    read_magic(&mut r, INDEX_MAGIC)?;
    let mode = r.read_u8()?;
    let header = match mode {
        0 => None,
        1 => {
            let p = HnswParams {
                m: r.read_u32::<LittleEndian>()? as usize,
                ef_construction: r.read_u32::<LittleEndian>()? as usize,
                ef_search: r.read_u32::<LittleEndian>()? as usize,
                seed: r.read_u64::<LittleEndian>()?,
            };
            let entry = r.read_u32::<LittleEndian>()? as usize;
            let max_level = r.read_u32::<LittleEndian>()? as usize;
            Some((p, entry, max_level))
        }
        other => return Err(FormatError::Corrupt(format!("mode byte {other}"))),
    };
    let (dim, items) = read_body::<T, _>(&mut r)?;
    if items.is_empty() {
        return Err(IndexError::Empty.into());
    }
    let n = items.len();
    let mut ids = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * dim);
    for (id, v) in items {
        ids.push(id);
        data.extend(v);
    }
    let Some((p, entry, max_level)) = header else {
        return Ok(EmbeddingIndex::from_parts(dim, ids, data, IndexMode::Exhaustive, None));
    };
    let mut links = Vec::with_capacity(n);
    for _ in 0..n {
        let layers = r.read_u8()? as usize;
        let mut node = Vec::with_capacity(layers);
        for _ in 0..layers {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut layer = Vec::with_capacity(len);
            for _ in 0..len {
                let l = r.read_u32::<LittleEndian>()?;
                if l as usize >= n {
                    return Err(FormatError::Corrupt(format!("link {l} out of range")));
                }
                layer.push(l);
            }
            node.push(layer);
        }
        links.push(node);
    }
    if entry >= n {
        return Err(FormatError::Corrupt("entry point out of range".into()));
    }
    let graph = HnswGraph {
        entry,
        max_level,
        links,
        ef_search: p.ef_search.max(1),
    };
    Ok(EmbeddingIndex::from_parts(
        dim,
        ids,
        data,
        IndexMode::Approximate(p),
        Some(graph),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corpus(n: usize) -> Vec<EmbeddingVector<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        (0..n)
            .map(|i| {
                let v = (0..12).map(|_| rng.random::<f32>() - 0.5).collect();
                EmbeddingVector::normalized(format!("vec-{i}"), v).unwrap()
            })
            .collect()
    }

    #[test]
    fn header_layout_is_little_endian() {
        let vs = corpus(2);
        let mut buf = Vec::new();
        write_vectors(&mut buf, &vs).unwrap();
        assert_eq!(&buf[..4], b"VLBE");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &12u32.to_le_bytes());
        assert_eq!(&buf[12..20], &2u64.to_le_bytes());
        assert_eq!(&buf[20..22], &5u16.to_le_bytes());
        assert_eq!(&buf[22..27], b"vec-0");
        assert_eq!(buf.len(), 20 + 2 * (2 + 5 + 12 * 4));
    }

    #[test]
    fn vectors_round_trip() {
        let vs = corpus(30);
        let mut buf = Vec::new();
        write_vectors(&mut buf, &vs).unwrap();
        let back: Vec<EmbeddingVector<f32>> = read_vectors(&buf[..]).unwrap();
        assert_eq!(back.len(), 30);
        for (a, b) in vs.iter().zip(&back) {
            assert_eq!(a.id(), b.id());
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            read_vectors::<f32, _>(&b"NOPE\x01\0\0\0"[..]),
            Err(FormatError::BadMagic(_))
        ));
    }

    #[test]
    fn index_round_trip_preserves_answers() {
        let vs = corpus(300);
        let qs = corpus(40);
        for mode in [IndexMode::Exhaustive, IndexMode::Approximate(HnswParams::default())] {
            let idx = EmbeddingIndex::build(vs.clone(), mode).unwrap();
            let mut buf = Vec::new();
            write_index(&mut buf, &idx).unwrap();
            let back: EmbeddingIndex<f32> = read_index(&buf[..]).unwrap();
            assert_eq!(back.mode(), idx.mode());
            assert_eq!(back.graph(), idx.graph());
            for q in &qs {
                assert_eq!(back.max_similarity(q).unwrap(), idx.max_similarity(q).unwrap());
            }
        }
    }
}
