//! Content-addressed artifact store.
//!
//! Blobs are keyed by the SHA-256 of their bytes, so an [`ImageRef`] is
//! resolvable by hash alone and any tampering shows up as a hash mismatch.
//! Per-variant evidence files (prompt, response, mask, edited image) are
//! additionally written under `artifacts/<variant_id>/` for human review.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Cursor};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use image::{GrayImage, ImageFormat, RgbImage};

use crate::model::{sha256_hex, ImageRef};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("blob {0} not found")]
    Missing(String),
    #[error("hash mismatch for {path}: expected {expected}, got {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

enum Backend {
    Memory(RwLock<HashMap<String, Arc<Vec<u8>>>>),
    Dir(PathBuf),
}

pub struct ArtifactStore {
    backend: Backend,
}

pub fn encode_png_rgb(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("png encoding to memory");
    buf.into_inner()
}

pub fn encode_png_gray(img: &GrayImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("png encoding to memory");
    buf.into_inner()
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, image::ImageError> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage, image::ImageError> {
    Ok(image::load_from_memory(bytes)?.to_luma8())
}

impl ArtifactStore {
    pub fn in_memory() -> Self {
        Self {
            backend: Backend::Memory(RwLock::new(HashMap::new())),
        }
    }

    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("blobs"))?;
        Ok(Self {
            backend: Backend::Dir(root),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        match &self.backend {
            Backend::Dir(p) => Some(p),
            Backend::Memory(_) => None,
        }
    }

    /// Stores `bytes` and returns their hash. Idempotent.
    pub fn put(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let hash = sha256_hex(bytes);
        match &self.backend {
            Backend::Memory(map) => {
                map.write()
                    .expect("store lock")
                    .entry(hash.clone())
                    .or_insert_with(|| Arc::new(bytes.to_vec()));
            }
            Backend::Dir(root) => {
                let path = root.join("blobs").join(&hash);
                if !path.exists() {
                    write_atomic(&path, bytes)?;
                }
            }
        }
        Ok(hash)
    }

    pub fn contains(&self, hash: &str) -> bool {
        match &self.backend {
            Backend::Memory(map) => map.read().expect("store lock").contains_key(hash),
            Backend::Dir(root) => root.join("blobs").join(hash).exists(),
        }
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        let bytes = match &self.backend {
            Backend::Memory(map) => map
                .read()
                .expect("store lock")
                .get(hash)
                .map(|b| b.as_ref().clone())
                .ok_or_else(|| StoreError::Missing(hash.to_string()))?,
            Backend::Dir(root) => match fs::read(root.join("blobs").join(hash)) {
                Ok(b) => b,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    return Err(StoreError::Missing(hash.to_string()))
                }
                Err(e) => return Err(e.into()),
            },
        };
        let actual = sha256_hex(&bytes);
        if actual != hash {
            return Err(StoreError::HashMismatch {
                path: hash.to_string(),
                expected: hash.to_string(),
                actual,
            });
        }
        Ok(bytes)
    }

    pub fn put_text(&self, text: &str) -> Result<String, StoreError> {
        self.put(text.as_bytes())
    }

    /// Encodes and stores an image; the returned reference is resolvable by hash.
    pub fn put_image(&self, img: &RgbImage) -> Result<ImageRef, StoreError> {
        let bytes = encode_png_rgb(img);
        let sha256 = self.put(&bytes)?;
        Ok(ImageRef {
            path: format!("blobs/{sha256}"),
            sha256,
            width: img.width(),
            height: img.height(),
        })
    }

    pub fn put_mask(&self, mask: &GrayImage) -> Result<String, StoreError> {
        self.put(&encode_png_gray(mask))
    }

    pub fn load_image(&self, r: &ImageRef) -> Result<RgbImage, StoreError> {
        Ok(decode_rgb(&self.get(&r.sha256)?)?)
    }

    pub fn load_mask(&self, hash: &str) -> Result<GrayImage, StoreError> {
        Ok(decode_gray(&self.get(hash)?)?)
    }

    /// Copies an on-disk original (path relative to `base`) into the blob
    /// store after checking its recorded hash.
    pub fn import(&self, base: &Path, r: &ImageRef) -> Result<(), StoreError> {
        if self.contains(&r.sha256) {
            return Ok(());
        }
        let bytes = fs::read(base.join(&r.path))?;
        let actual = sha256_hex(&bytes);
        if actual != r.sha256 {
            return Err(StoreError::HashMismatch {
                path: r.path.clone(),
                expected: r.sha256.clone(),
                actual,
            });
        }
        self.put(&bytes)?;
        Ok(())
    }

    /// Writes a reviewable evidence file for one variant. No-op in memory.
    pub fn write_evidence(&self, variant_id: &str, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
        if let Backend::Dir(root) = &self.backend {
            let dir = root.join("artifacts").join(variant_id);
            fs::create_dir_all(&dir)?;
            write_atomic(&dir.join(name), bytes)?;
        }
        Ok(())
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes through a temp file and rename so concurrent writers of the same
/// content never expose a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = parent.join(format!(".tmp.{}.{n}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_by_hash() {
        let store = ArtifactStore::in_memory();
        let img = RgbImage::from_fn(4, 3, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let r = store.put_image(&img).unwrap();
        assert_eq!((r.width, r.height), (4, 3));
        assert_eq!(store.load_image(&r).unwrap(), img);
        assert_eq!(store.put_image(&img).unwrap(), r);
    }

    #[test]
    fn tampered_blob_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let h = store.put(b"hello").unwrap();
        fs::write(dir.path().join("blobs").join(&h), b"HELLO").unwrap();
        assert!(matches!(store.get(&h), Err(StoreError::HashMismatch { .. })));
    }

    #[test]
    fn missing_blob() {
        let store = ArtifactStore::in_memory();
        assert!(matches!(store.get("ff"), Err(StoreError::Missing(_))));
    }
}
