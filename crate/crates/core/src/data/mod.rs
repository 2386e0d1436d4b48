//! MovieLens ingestion: ratings, users and movies for the 100K and 1M
//! releases, corpus statistics, seeded splits and the split manifest.

mod parse;
mod split;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub use parse::{
    parse_movies, parse_movies_str, parse_ratings, parse_ratings_str, parse_users,
    parse_users_str, write_ratings,
};
pub use split::{read_manifest, split_dataset, write_manifest, Part, SplitRatios, Splits};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}:{line}: {msg}")]
    Malformed {
        origin: String,
        line: usize,
        msg: String,
    },
    #[error("{origin}:{line}: duplicate id {id}")]
    DuplicateId { origin: String, line: usize, id: u32 },
    #[error("no ratings")]
    Empty,
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("unknown dataset format {0:?} (expected ml100k or ml1m)")]
    UnknownFormat(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetFormat {
    Ml100k,
    Ml1m,
}

impl DatasetFormat {
    pub fn ratings_file(self) -> &'static str {
        match self {
            Self::Ml100k => "u.data",
            Self::Ml1m => "ratings.dat",
        }
    }

    pub fn users_file(self) -> &'static str {
        match self {
            Self::Ml100k => "u.user",
            Self::Ml1m => "users.dat",
        }
    }

    pub fn movies_file(self) -> &'static str {
        match self {
            Self::Ml100k => "u.item",
            Self::Ml1m => "movies.dat",
        }
    }

    /// Genre vocabulary in flag order.
    pub fn genres(self) -> &'static [&'static str] {
        match self {
            Self::Ml100k => &GENRES_100K,
            Self::Ml1m => &GENRES_100K[1..],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ml100k => "ml100k",
            Self::Ml1m => "ml1m",
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml100k" | "ml-100k" | "100k" => Ok(Self::Ml100k),
            "ml1m" | "ml-1m" | "1m" => Ok(Self::Ml1m),
            _ => Err(DataError::UnknownFormat(s.to_string())),
        }
    }
}

/// u.genre order.
pub const GENRES_100K: [&str; 19] = [
    "unknown",
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

/// u.occupation order. The 1M release uses codes 0..=20 instead.
pub const OCCUPATIONS_100K: [&str; 21] = [
    "administrator",
    "artist",
    "doctor",
    "educator",
    "engineer",
    "entertainment",
    "executive",
    "healthcare",
    "homemaker",
    "lawyer",
    "librarian",
    "marketing",
    "none",
    "other",
    "programmer",
    "retired",
    "salesman",
    "scientist",
    "student",
    "technician",
    "writer",
];

/// Age bucket codes of users.dat.
pub const AGE_BUCKETS_1M: [u32; 7] = [1, 18, 25, 35, 45, 50, 56];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RatingRecord {
    pub user_id: u32,
    pub movie_id: u32,
    pub rating: u8,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    pub fn index(self) -> usize {
        match self {
            Self::M => 0,
            Self::F => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Occupation {
    Named(String),
    Code(u8),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserProfile {
    pub user_id: u32,
    /// Years in 100K, bucket code in 1M.
    pub age: u32,
    pub gender: Gender,
    pub occupation: Occupation,
    pub zip: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MovieMeta {
    pub movie_id: u32,
    pub title: String,
    /// Indices into [`DatasetFormat::genres`], ascending.
    pub genres: Vec<usize>,
    pub release_year: Option<i32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_ratings: usize,
    pub sparsity: f64,
}

impl DatasetStats {
    fn new(n_users: usize, n_items: usize, n_ratings: usize) -> Self {
        let cells = (n_users * n_items) as f64;
        Self {
            n_users,
            n_items,
            n_ratings,
            sparsity: 1.0 - n_ratings as f64 / cells,
        }
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Users     {}", self.n_users)?;
        writeln!(f, "Items     {}", self.n_items)?;
        writeln!(f, "Ratings   {}", self.n_ratings)?;
        write!(f, "Sparsity  {:.3}%", self.sparsity * 100.0)
    }
}

/// Statistics over the users and items that appear in `records`.
pub fn compute_stats(records: &[RatingRecord]) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    let users: HashSet<u32> = records.iter().map(|r| r.user_id).collect();
    let items: HashSet<u32> = records.iter().map(|r| r.movie_id).collect();
    Ok(DatasetStats::new(users.len(), items.len(), records.len()))
}

/// A fully parsed MovieLens release.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub format: DatasetFormat,
    pub ratings: Vec<RatingRecord>,
    pub users: Vec<UserProfile>,
    pub movies: Vec<MovieMeta>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>, format: DatasetFormat) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self {
            format,
            ratings: parse_ratings(dir.join(format.ratings_file()), format)?,
            users: parse_users(dir.join(format.users_file()), format)?,
            movies: parse_movies(dir.join(format.movies_file()), format)?,
        })
    }

    /// Statistics over the union of ids in the rating file and the declared
    /// user and movie catalogs.
    pub fn stats(&self) -> Result<DatasetStats> {
        if self.ratings.is_empty() {
            return Err(DataError::Empty);
        }
        let mut users: HashSet<u32> = self.ratings.iter().map(|r| r.user_id).collect();
        users.extend(self.users.iter().map(|u| u.user_id));
        let mut items: HashSet<u32> = self.ratings.iter().map(|r| r.movie_id).collect();
        items.extend(self.movies.iter().map(|m| m.movie_id));
        Ok(DatasetStats::new(users.len(), items.len(), self.ratings.len()))
    }
}
