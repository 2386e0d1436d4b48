//! Structured-feature encoders, up-sampling layers and the modality
//! embedding stores that feed the fusion encoder.
//!
//! Every interaction is turned into ten feature tokens in a fixed slot order
//! (see [`FeatureSlot`]). Categorical and scalar attributes are first encoded
//! into a short vector by [`encode_low`], then lifted to the model width by an
//! [`Upsampler`]; user and movie ids go through a trainable [`IdTable`] first.
//! Title, introduction and poster tokens come from [`EmbeddingStore`]s.

mod layers;
mod store;

use thiserror::Error;

use crate::data::{DatasetFormat, Occupation, AGE_BUCKETS_1M, OCCUPATIONS_100K};

pub use layers::{IdTable, Linear, Upsampler, EMBED_INIT};
pub use store::{EmbeddingStore, Modality, StoreError, StoreToken, STORE_DIM, STORE_MAGIC, STORE_VERSION};

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("{feature}: category {value} outside 0..{cardinality}")]
    UnknownCategory {
        feature: &'static str,
        value: String,
        cardinality: usize,
    },
    #[error("{0}: multi-hot value with no flag set")]
    EmptyMultiHot(&'static str),
    #[error("{feature}: raw value does not fit a {kind} feature")]
    WrongKind {
        feature: &'static str,
        kind: &'static str,
    },
    #[error("id {id} out of range for table of capacity {capacity}")]
    IdOutOfRange { id: usize, capacity: usize },
}

/// Position of a feature token in the fused sequence (1-based, CLS is 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureSlot {
    UserId = 1,
    Gender = 2,
    Age = 3,
    Occupation = 4,
    Zip = 5,
    MovieId = 6,
    Genres = 7,
    Title = 8,
    Intro = 9,
    Poster = 10,
}

impl FeatureSlot {
    pub const ALL: [FeatureSlot; 10] = [
        Self::UserId,
        Self::Gender,
        Self::Age,
        Self::Occupation,
        Self::Zip,
        Self::MovieId,
        Self::Genres,
        Self::Title,
        Self::Intro,
        Self::Poster,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureKind {
    OneHot { cardinality: usize },
    MultiHot { cardinality: usize },
    Hashed { buckets: usize },
    /// Min-max normalized into a single value in `[0, 1]`.
    Scalar { min: f64, max: f64 },
    /// Trainable lookup table over positive integer ids.
    Id { capacity: usize },
    /// Vector from a modality store.
    Stored(Modality),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec {
    pub name: &'static str,
    pub kind: FeatureKind,
    pub slot: FeatureSlot,
}

impl FeatureSpec {
    /// Width of the vector produced by [`encode_low`], when the kind has one.
    pub fn low_dim(&self) -> Option<usize> {
        match self.kind {
            FeatureKind::OneHot { cardinality } | FeatureKind::MultiHot { cardinality } => Some(cardinality),
            FeatureKind::Hashed { buckets } => Some(buckets),
            FeatureKind::Scalar { .. } => Some(1),
            FeatureKind::Id { .. } | FeatureKind::Stored(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RawFeature<'a> {
    Category(usize),
    Categories(&'a [usize]),
    Text(&'a str),
    Scalar(f64),
}

/// Low-dimensional encoding of one raw attribute.
pub fn encode_low(spec: &FeatureSpec, raw: RawFeature<'_>) -> Result<Vec<f64>, EmbedError> {
    let wrong = |kind| EmbedError::WrongKind {
        feature: spec.name,
        kind,
    };
    match (spec.kind, raw) {
        (FeatureKind::OneHot { cardinality }, RawFeature::Category(c)) => {
            if c >= cardinality {
                return Err(EmbedError::UnknownCategory {
                    feature: spec.name,
                    value: c.to_string(),
                    cardinality,
                });
            }
            let mut v = vec![0.0; cardinality];
            v[c] = 1.0;
            Ok(v)
        }
        (FeatureKind::MultiHot { cardinality }, RawFeature::Categories(cs)) => {
            if cs.is_empty() {
                return Err(EmbedError::EmptyMultiHot(spec.name));
            }
            let mut v = vec![0.0; cardinality];
            for &c in cs {
                if c >= cardinality {
                    return Err(EmbedError::UnknownCategory {
                        feature: spec.name,
                        value: c.to_string(),
                        cardinality,
                    });
                }
                v[c] = 1.0;
            }
            Ok(v)
        }
        (FeatureKind::Hashed { buckets }, RawFeature::Text(s)) => {
            let mut v = vec![0.0; buckets];
            v[hash_bucket(s, buckets)] = 1.0;
            Ok(v)
        }
        (FeatureKind::Scalar { min, max }, RawFeature::Scalar(x)) => {
            let span = max - min;
            let t = if span > 0.0 { (x - min) / span } else { 0.0 };
            Ok(vec![t.clamp(0.0, 1.0)])
        }
        (FeatureKind::OneHot { .. }, _) => Err(wrong("one-hot")),
        (FeatureKind::MultiHot { .. }, _) => Err(wrong("multi-hot")),
        (FeatureKind::Hashed { .. }, _) => Err(wrong("hashed")),
        (FeatureKind::Scalar { .. }, _) => Err(wrong("scalar")),
        (FeatureKind::Id { .. }, _) => Err(wrong("id")),
        (FeatureKind::Stored(_), _) => Err(wrong("stored")),
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hash_bucket(s: &str, buckets: usize) -> usize {
    (fnv1a64(s.as_bytes()) % buckets as u64) as usize
}

/// Category index of an occupation: position in u.occupation for 100K, the
/// numeric code from users.dat for 1M.
pub fn occupation_index(occ: &Occupation) -> Result<usize, EmbedError> {
    match occ {
        Occupation::Named(name) => OCCUPATIONS_100K
            .iter()
            .position(|o| o == name)
            .ok_or_else(|| EmbedError::UnknownCategory {
                feature: "occupation",
                value: name.clone(),
                cardinality: OCCUPATIONS_100K.len(),
            }),
        Occupation::Code(c) => Ok(*c as usize),
    }
}

/// Category index of a 1M age bucket code.
pub fn age_bucket_index(code: u32) -> Result<usize, EmbedError> {
    AGE_BUCKETS_1M
        .iter()
        .position(|&a| a == code)
        .ok_or_else(|| EmbedError::UnknownCategory {
            feature: "age",
            value: code.to_string(),
            cardinality: AGE_BUCKETS_1M.len(),
        })
}

/// Layout of the ten feature slots for one dataset release.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayout {
    pub specs: Vec<FeatureSpec>,
}

impl FeatureLayout {
    /// `age_range` is the observed (min, max) user age, used for 100K only.
    pub fn new(
        format: DatasetFormat,
        user_capacity: usize,
        movie_capacity: usize,
        zip_buckets: usize,
        age_range: (f64, f64),
    ) -> Self {
        let age = match format {
            DatasetFormat::Ml100k => FeatureKind::Scalar {
                min: age_range.0,
                max: age_range.1,
            },
            DatasetFormat::Ml1m => FeatureKind::OneHot {
                cardinality: AGE_BUCKETS_1M.len(),
            },
        };
        let spec = |name, kind, slot| FeatureSpec { name, kind, slot };
        Self {
            specs: vec![
                spec("user_id", FeatureKind::Id { capacity: user_capacity }, FeatureSlot::UserId),
                spec("gender", FeatureKind::OneHot { cardinality: 2 }, FeatureSlot::Gender),
                spec("age", age, FeatureSlot::Age),
                spec("occupation", FeatureKind::OneHot { cardinality: OCCUPATIONS_100K.len() }, FeatureSlot::Occupation),
                spec("zip", FeatureKind::Hashed { buckets: zip_buckets }, FeatureSlot::Zip),
                spec("movie_id", FeatureKind::Id { capacity: movie_capacity }, FeatureSlot::MovieId),
                spec("genres", FeatureKind::MultiHot { cardinality: format.genres().len() }, FeatureSlot::Genres),
                spec("title", FeatureKind::Stored(Modality::Title), FeatureSlot::Title),
                spec("intro", FeatureKind::Stored(Modality::Intro), FeatureSlot::Intro),
                spec("poster", FeatureKind::Stored(Modality::Poster), FeatureSlot::Poster),
            ],
        }
    }

    pub fn spec(&self, slot: FeatureSlot) -> &FeatureSpec {
        &self.specs[slot.index() - 1]
    }
}
