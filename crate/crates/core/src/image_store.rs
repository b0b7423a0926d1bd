//! Content-addressed image storage.
//!
//! Images are written under `<root>/images/<sha256>.<ext>` and referenced by
//! that relative URI, so traces never embed absolute paths. An in-memory store
//! (no root) keeps bytes in the cache only.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};

use crate::types::{ImageRef, InvariantError, MediaType};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("image i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image not found: {0}")]
    Missing(String),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
}

#[derive(Debug, Default)]
pub struct ImageStore {
    root: Option<PathBuf>,
    cache: RwLock<HashMap<String, Arc<Vec<u8>>>>,
}

impl ImageStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (and create) a store rooted at `root`.
    pub fn at(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let images = root.join("images");
        std::fs::create_dir_all(&images).map_err(|source| StoreError::Io {
            path: images,
            source,
        })?;
        Ok(Self {
            root: Some(root),
            cache: RwLock::default(),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Store a PNG or JPEG payload and return its reference.
    pub fn put(&self, bytes: Vec<u8>) -> Result<ImageRef, StoreError> {
        let media = MediaType::sniff(&bytes)
            .ok_or_else(|| InvariantError::new("media_type", "payload is neither PNG nor JPEG"))?;
        let digest = crate::types::sha256_hex(&bytes);
        let uri = format!("images/{digest}.{}", media.extension());
        let image = ImageRef {
            uri: uri.clone(),
            media_type: media,
            sha256: digest.clone(),
        };
        if let Some(root) = &self.root {
            let path = root.join(&uri);
            if !path.exists() {
                std::fs::write(&path, &bytes).map_err(|source| StoreError::Io { path, source })?;
            }
        }
        self.cache
            .write()
            .expect("image cache poisoned")
            .insert(digest, Arc::new(bytes));
        Ok(image)
    }

    /// Copy an external image file into the store.
    pub fn import(&self, path: &Path) -> Result<ImageRef, StoreError> {
        let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.put(bytes)
    }

    /// Resolve an image to its bytes, checking the recorded digest.
    pub fn load(&self, image: &ImageRef) -> Result<Arc<Vec<u8>>, StoreError> {
        if let Some(bytes) = self.cache.read().expect("image cache poisoned").get(&image.sha256) {
            return Ok(bytes.clone());
        }
        let path = match &self.root {
            Some(root) if Path::new(&image.uri).is_relative() => root.join(&image.uri),
            _ => PathBuf::from(&image.uri),
        };
        let bytes = std::fs::read(&path).map_err(|_| StoreError::Missing(image.uri.clone()))?;
        image.verify(&bytes)?;
        let bytes = Arc::new(bytes);
        self.cache
            .write()
            .expect("image cache poisoned")
            .insert(image.sha256.clone(), bytes.clone());
        Ok(bytes)
    }

    pub fn contains(&self, image: &ImageRef) -> bool {
        self.load(image).is_ok()
    }
}

/// Deterministic 8x8 RGB PNG whose pixels are derived from `material`.
pub fn synth_png(material: &[u8]) -> Vec<u8> {
    const SIDE: u32 = 8;
    let mut pixels = Vec::with_capacity((SIDE * SIDE * 3) as usize);
    let mut block = Sha256::digest(material);
    while pixels.len() < (SIDE * SIDE * 3) as usize {
        pixels.extend_from_slice(&block);
        block = Sha256::digest(block);
    }
    pixels.truncate((SIDE * SIDE * 3) as usize);

    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, SIDE, SIDE);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("in-memory png header");
        writer.write_image_data(&pixels).expect("in-memory png body");
        writer.finish().expect("in-memory png finish");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_png_is_deterministic_png() {
        let a = synth_png(b"seed");
        assert_eq!(a, synth_png(b"seed"));
        assert_ne!(a, synth_png(b"other"));
        assert_eq!(MediaType::sniff(&a), Some(MediaType::Png));
    }

    #[test]
    fn put_and_load_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::at(dir.path()).unwrap();
        let image = store.put(synth_png(b"x")).unwrap();
        assert!(image.uri.starts_with("images/"));
        assert!(dir.path().join(&image.uri).exists());

        let fresh = ImageStore::at(dir.path()).unwrap();
        assert_eq!(*fresh.load(&image).unwrap(), synth_png(b"x"));
    }

    #[test]
    fn rejects_unknown_payloads() {
        let store = ImageStore::in_memory();
        assert!(matches!(store.put(b"GIF89a".to_vec()), Err(StoreError::Invariant(_))));
    }

    #[test]
    fn detects_tampered_file() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::at(dir.path()).unwrap();
        let image = store.put(synth_png(b"y")).unwrap();
        std::fs::write(dir.path().join(&image.uri), synth_png(b"z")).unwrap();
        let fresh = ImageStore::at(dir.path()).unwrap();
        assert!(matches!(fresh.load(&image), Err(StoreError::Invariant(_))));
    }
}
