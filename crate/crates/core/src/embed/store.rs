use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const STORE_MAGIC: &[u8; 4] = b"MMEB";
pub const STORE_VERSION: u32 = 1;
pub const STORE_DIM: usize = 768;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported store version {0}")]
    Version(u32),
    #[error("unknown modality tag {0}")]
    Modality(u8),
    #[error("dim mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("truncated store at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last record")]
    Trailing(usize),
    #[error("duplicate id {0}")]
    DuplicateId(u32),
    #[error("non-finite value in vector for id {0}")]
    NonFinite(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Title,
    Intro,
    Poster,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Title, Modality::Intro, Modality::Poster];

    pub fn tag(self) -> u8 {
        match self {
            Self::Title => 0,
            Self::Intro => 1,
            Self::Poster => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, StoreError> {
        match tag {
            0 => Ok(Self::Title),
            1 => Ok(Self::Intro),
            2 => Ok(Self::Poster),
            t => Err(StoreError::Modality(t)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Title => "title",
            Self::Intro => "intro",
            Self::Poster => "poster",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown modality {s:?}"))
    }
}

/// Result of [`EmbeddingStore::lookup`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StoreToken<'a> {
    Stored(&'a [f32]),
    /// The id has no vector; the model substitutes its trainable
    /// missing-token for this modality.
    Missing,
}

/// Read-only map from movie id to a fixed-width modality embedding.
#[derive(Debug)]
pub struct EmbeddingStore {
    modality: Modality,
    dim: usize,
    vectors: BTreeMap<u32, Vec<f32>>,
    lookups: AtomicUsize,
}

impl EmbeddingStore {
    pub fn new(modality: Modality, dim: usize) -> Self {
        Self {
            modality,
            dim,
            vectors: BTreeMap::new(),
            lookups: AtomicUsize::new(0),
        }
    }

    pub fn insert(&mut self, id: u32, vector: Vec<f32>) -> Result<(), StoreError> {
        if vector.len() != self.dim {
            return Err(StoreError::DimMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(StoreError::NonFinite(id));
        }
        if self.vectors.insert(id, vector).is_some() {
            return Err(StoreError::DuplicateId(id));
        }
        Ok(())
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.vectors.keys().copied()
    }

    /// Never fails: ids without a vector map to [`StoreToken::Missing`].
    pub fn lookup(&self, id: u32) -> StoreToken<'_> {
        self.lookups.fetch_add(1, Ordering::Relaxed);
        match self.vectors.get(&id) {
            Some(v) => StoreToken::Stored(v),
            None => StoreToken::Missing,
        }
    }

    /// Number of [`EmbeddingStore::lookup`] calls so far.
    pub fn access_count(&self) -> usize {
        self.lookups.load(Ordering::Relaxed)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), StoreError> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&[self.modality.tag()])?;
        w.write_all(&(self.vectors.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(4 + 4 * self.dim);
        for (id, v) in &self.vectors {
            buf.clear();
            buf.extend_from_slice(&id.to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    /// Parses an MMEB store; the header dimension must be 768.
    pub fn read<R: Read>(mut r: R) -> Result<Self, StoreError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], StoreError> {
            if pos + n > bytes.len() {
                return Err(StoreError::Truncated(pos));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        let magic: [u8; 4] = take(4)?.try_into().unwrap();
        if &magic != STORE_MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != STORE_VERSION {
            return Err(StoreError::Version(version));
        }
        let modality = Modality::from_tag(take(1)?[0])?;
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if dim != STORE_DIM {
            return Err(StoreError::DimMismatch {
                expected: STORE_DIM,
                found: dim,
            });
        }
        let mut store = Self::new(modality, dim);
        for _ in 0..count {
            let id = u32::from_le_bytes(take(4)?.try_into().unwrap());
            let raw = take(4 * dim)?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(id, v)?;
        }
        let rest = bytes.len() - pos;
        if rest != 0 {
            return Err(StoreError::Trailing(rest));
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::read(std::fs::File::open(path)?)
    }

    /// Seeded standard-normal vectors for `ids`, standing in for extractor
    /// output when real stores are not available.
    pub fn synthetic(modality: Modality, ids: impl IntoIterator<Item = u32>, dim: usize, seed: u64) -> Self {
        let mut store = Self::new(modality, dim);
        for id in ids {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ ((modality.tag() as u64) << 56) ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let v = (0..dim)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x as f32
                })
                .collect();
            // ids are unique by construction of the iterator's caller
            let _ = store.insert(id, v);
        }
        store
    }
}
