//! In-process content-addressed object store.
//!
//! Objects are immutable byte strings addressed by the SHA-256 digest of their
//! contents. Every `put` pins the object; unpinned objects stay readable until
//! the next [`ContentStore::gc`] pass removes them.
//!
//! A store can be persisted to a directory laid out as
//! `objects/<first two hex chars>/<full hex>` plus a `pins.json` array. Loading
//! re-hashes every object and rejects the directory on any mismatch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::RwLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// SHA-256 digest addressing an object, rendered as 64 lowercase hex chars.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentHash([u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn from_bytes(digest: [u8; 32]) -> Self {
        Self(digest)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", &self.to_hex()[..12])
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid content hash: {0}")]
pub struct ParseHashError(String);

impl FromStr for ContentHash {
    type Err = ParseHashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(ParseHashError(s.to_string()));
        }
        let mut digest = [0u8; 32];
        hex::decode_to_slice(s, &mut digest).map_err(|_| ParseHashError(s.to_string()))?;
        Ok(Self(digest))
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("refusing to store an empty payload")]
    EmptyPayload,
    #[error("object {0} not found")]
    NotFound(ContentHash),
    #[error("object at {path} does not hash to its name")]
    DigestMismatch { path: String },
    #[error("malformed store directory: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
struct StoredObject {
    bytes: Vec<u8>,
    pinned: bool,
    #[allow(dead_code)]
    put_seq: u64,
}

#[derive(Debug, Default)]
struct Inner {
    objects: BTreeMap<ContentHash, StoredObject>,
    next_seq: u64,
}

/// Thread-safe content-addressed store. Reads share a lock; `put`, `unpin`
/// and `gc` take it exclusively.
#[derive(Debug, Default)]
pub struct ContentStore {
    inner: RwLock<Inner>,
}

impl ContentStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `bytes` and pins them. Storing content that is already present
    /// re-pins the existing object and returns the same hash.
    pub fn put(&self, bytes: &[u8]) -> Result<ContentHash, StoreError> {
        if bytes.is_empty() {
            return Err(StoreError::EmptyPayload);
        }
        let hash = ContentHash::of(bytes);
        let mut inner = self.inner.write().expect("store lock poisoned");
        if let Some(existing) = inner.objects.get_mut(&hash) {
            existing.pinned = true;
            return Ok(hash);
        }
        let put_seq = inner.next_seq;
        inner.next_seq += 1;
        inner.objects.insert(
            hash,
            StoredObject {
                bytes: bytes.to_vec(),
                pinned: true,
                put_seq,
            },
        );
        Ok(hash)
    }

    pub fn get(&self, hash: &ContentHash) -> Result<Vec<u8>, StoreError> {
        let inner = self.inner.read().expect("store lock poisoned");
        inner
            .objects
            .get(hash)
            .map(|o| o.bytes.clone())
            .ok_or(StoreError::NotFound(*hash))
    }

    /// Clears the pin flag. Unpinning an already unpinned object succeeds.
    pub fn unpin(&self, hash: &ContentHash) -> Result<(), StoreError> {
        let mut inner = self.inner.write().expect("store lock poisoned");
        match inner.objects.get_mut(hash) {
            Some(o) => {
                o.pinned = false;
                Ok(())
            }
            None => Err(StoreError::NotFound(*hash)),
        }
    }

    /// Removes every unpinned object and returns how many were dropped.
    pub fn gc(&self) -> usize {
        let mut inner = self.inner.write().expect("store lock poisoned");
        let before = inner.objects.len();
        inner.objects.retain(|_, o| o.pinned);
        before - inner.objects.len()
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("store lock poisoned").objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        self.inner
            .read()
            .expect("store lock poisoned")
            .objects
            .contains_key(hash)
    }

    pub fn is_pinned(&self, hash: &ContentHash) -> Option<bool> {
        self.inner
            .read()
            .expect("store lock poisoned")
            .objects
            .get(hash)
            .map(|o| o.pinned)
    }

    /// Total payload bytes currently held.
    pub fn stored_bytes(&self) -> usize {
        self.inner
            .read()
            .expect("store lock poisoned")
            .objects
            .values()
            .map(|o| o.bytes.len())
            .sum()
    }

    pub fn hashes(&self) -> Vec<ContentHash> {
        self.inner
            .read()
            .expect("store lock poisoned")
            .objects
            .keys()
            .copied()
            .collect()
    }

    pub fn save_to_dir(&self, dir: &Path) -> Result<(), StoreError> {
        let inner = self.inner.read().expect("store lock poisoned");
        let objects_dir = dir.join("objects");
        fs::create_dir_all(&objects_dir)?;
        let mut pins = Vec::new();
        for (hash, obj) in &inner.objects {
            let hex = hash.to_hex();
            let shard = objects_dir.join(&hex[..2]);
            fs::create_dir_all(&shard)?;
            fs::write(shard.join(&hex), &obj.bytes)?;
            if obj.pinned {
                pins.push(hex);
            }
        }
        let pins_json = serde_json::to_vec_pretty(&pins)
            .map_err(|e| StoreError::Malformed(e.to_string()))?;
        fs::write(dir.join("pins.json"), pins_json)?;
        Ok(())
    }

    pub fn load_from_dir(dir: &Path) -> Result<Self, StoreError> {
        let pins_raw = fs::read(dir.join("pins.json"))?;
        let pin_list: Vec<String> =
            serde_json::from_slice(&pins_raw).map_err(|e| StoreError::Malformed(e.to_string()))?;
        let pins = pin_list
            .iter()
            .map(|s| s.parse::<ContentHash>())
            .collect::<Result<BTreeSet<_>, _>>()
            .map_err(|e| StoreError::Malformed(e.to_string()))?;

        let mut inner = Inner::default();
        let objects_dir = dir.join("objects");
        if objects_dir.exists() {
            let mut paths = Vec::new();
            for shard in fs::read_dir(&objects_dir)? {
                let shard = shard?;
                if !shard.file_type()?.is_dir() {
                    continue;
                }
                for entry in fs::read_dir(shard.path())? {
                    paths.push(entry?.path());
                }
            }
            paths.sort();
            for path in paths {
                let name = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .ok_or_else(|| StoreError::Malformed(path.display().to_string()))?;
                let expected: ContentHash = name
                    .parse()
                    .map_err(|e: ParseHashError| StoreError::Malformed(e.to_string()))?;
                let parent_ok = path
                    .parent()
                    .and_then(|p| p.file_name())
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n == &name[..2]);
                if !parent_ok {
                    return Err(StoreError::Malformed(format!(
                        "{} is filed under the wrong prefix",
                        path.display()
                    )));
                }
                let bytes = fs::read(&path)?;
                if bytes.is_empty() || ContentHash::of(&bytes) != expected {
                    return Err(StoreError::DigestMismatch {
                        path: path.display().to_string(),
                    });
                }
                let put_seq = inner.next_seq;
                inner.next_seq += 1;
                inner.objects.insert(
                    expected,
                    StoredObject {
                        bytes,
                        pinned: pins.contains(&expected),
                        put_seq,
                    },
                );
            }
        }
        if let Some(missing) = pins.iter().find(|h| !inner.objects.contains_key(h)) {
            return Err(StoreError::NotFound(*missing));
        }
        Ok(Self {
            inner: RwLock::new(inner),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_abc_matches_known_digest() {
        let store = ContentStore::new();
        let h = store.put(b"abc").unwrap();
        assert_eq!(
            h.to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn duplicate_put_is_deduplicated() {
        let store = ContentStore::new();
        let a = store.put(b"model").unwrap();
        let b = store.put(b"model").unwrap();
        assert_eq!(a, b);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn empty_payload_rejected() {
        assert!(matches!(
            ContentStore::new().put(b""),
            Err(StoreError::EmptyPayload)
        ));
    }

    #[test]
    fn get_unknown_is_not_found() {
        let store = ContentStore::new();
        let h = ContentHash::of(b"never stored");
        assert!(matches!(store.get(&h), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn unpinned_objects_survive_until_gc() {
        let store = ContentStore::new();
        let h = store.put(b"x").unwrap();
        store.unpin(&h).unwrap();
        store.unpin(&h).unwrap();
        assert_eq!(store.get(&h).unwrap(), b"x");
        assert_eq!(store.gc(), 1);
        assert!(matches!(store.get(&h), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn unpin_unknown_is_not_found() {
        let store = ContentStore::new();
        assert!(store.unpin(&ContentHash::of(b"?")).is_err());
    }

    #[test]
    fn gc_counts() {
        let store = ContentStore::new();
        assert_eq!(store.gc(), 0);
        let hashes: Vec<_> = (0u8..5).map(|i| store.put(&[i]).unwrap()).collect();
        assert_eq!(store.gc(), 0);
        for h in &hashes[..3] {
            store.unpin(h).unwrap();
        }
        assert_eq!(store.gc(), 3);
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn reput_repins() {
        let store = ContentStore::new();
        let h = store.put(b"again").unwrap();
        store.unpin(&h).unwrap();
        store.put(b"again").unwrap();
        assert_eq!(store.gc(), 0);
        assert_eq!(store.is_pinned(&h), Some(true));
    }

    #[test]
    fn hash_parse_roundtrip_and_rejects_uppercase() {
        let h = ContentHash::of(b"abc");
        assert_eq!(h.to_hex().parse::<ContentHash>().unwrap(), h);
        assert!(h.to_hex().to_uppercase().parse::<ContentHash>().is_err());
        assert!("abc".parse::<ContentHash>().is_err());
        let json = serde_json::to_string(&h).unwrap();
        assert_eq!(json, format!("\"{}\"", h.to_hex()));
        assert_eq!(serde_json::from_str::<ContentHash>(&json).unwrap(), h);
    }

    #[test]
    fn persistence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ContentStore::new();
        let kept = store.put(b"pinned object").unwrap();
        let loose = store.put(b"loose object").unwrap();
        store.unpin(&loose).unwrap();
        store.save_to_dir(dir.path()).unwrap();

        let hex = kept.to_hex();
        assert!(dir.path().join("objects").join(&hex[..2]).join(&hex).exists());

        let loaded = ContentStore::load_from_dir(dir.path()).unwrap();
        assert_eq!(loaded.get(&kept).unwrap(), b"pinned object");
        assert_eq!(loaded.is_pinned(&kept), Some(true));
        assert_eq!(loaded.is_pinned(&loose), Some(false));
    }

    #[test]
    fn load_rejects_tampered_object() {
        let dir = tempfile::tempdir().unwrap();
        let store = ContentStore::new();
        let h = store.put(b"original").unwrap();
        store.save_to_dir(dir.path()).unwrap();
        let hex = h.to_hex();
        fs::write(dir.path().join("objects").join(&hex[..2]).join(&hex), b"tampered").unwrap();
        assert!(matches!(
            ContentStore::load_from_dir(dir.path()),
            Err(StoreError::DigestMismatch { .. })
        ));
    }
}
