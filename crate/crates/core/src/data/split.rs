use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, RatingRecord, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Part {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.9,
            val: 0.05,
            test: 0.05,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        let ok = all.iter().all(|x| x.is_finite() && *x >= 0.0)
            && (all.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DataError::BadRatios(all))
        }
    }
}

/// Per-interaction partition of a rating list.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    /// One label per input record, in input order.
    pub labels: Vec<Part>,
    pub train: Vec<RatingRecord>,
    pub val: Vec<RatingRecord>,
    pub test: Vec<RatingRecord>,
}

impl Splits {
    pub fn from_labeled(labeled: &[(RatingRecord, Part)]) -> Self {
        let mut s = Splits {
            labels: Vec::with_capacity(labeled.len()),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for &(r, p) in labeled {
            s.labels.push(p);
            s.part_mut(p).push(r);
        }
        s
    }

    pub fn part(&self, p: Part) -> &[RatingRecord] {
        match p {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }

    fn part_mut(&mut self, p: Part) -> &mut Vec<RatingRecord> {
        match p {
            Part::Train => &mut self.train,
            Part::Val => &mut self.val,
            Part::Test => &mut self.test,
        }
    }
}

/// Uniform random split of individual interactions, reproducible from `seed`.
///
/// Part sizes are the rounded products of the ratios with the record count,
/// with the test part taking the remainder. Within each part records keep
/// their input order.
pub fn split_dataset(records: &[RatingRecord], ratios: SplitRatios, seed: u64) -> Result<Splits> {
    ratios.validate()?;
    let n = records.len();
    let n_train = ((n as f64) * ratios.train).round() as usize;
    let n_val = (((n as f64) * ratios.val).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![Part::Test; n];
    for &i in &order[..n_train] {
        labels[i] = Part::Train;
    }
    for &i in &order[n_train..n_train + n_val] {
        labels[i] = Part::Val;
    }
    let labeled: Vec<(RatingRecord, Part)> = records.iter().copied().zip(labels).collect();
    Ok(Splits::from_labeled(&labeled))
}

/// One line per record: `user,movie,rating,timestamp,split`.
pub fn write_manifest<W: Write>(mut w: W, records: &[RatingRecord], labels: &[Part]) -> std::io::Result<()> {
    assert_eq!(records.len(), labels.len());
    for (r, p) in records.iter().zip(labels) {
        writeln!(w, "{},{},{},{},{}", r.user_id, r.movie_id, r.rating, r.timestamp, p)?;
    }
    w.flush()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(RatingRecord, Part)>> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let origin = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        let bad = |msg: String| DataError::Malformed {
            origin: origin.clone(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<i64>().map_err(|_| bad(format!("{s:?} is not a number")));
        let (u, m, r, ts) = (num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?);
        if u <= 0 || m <= 0 || !(1..=5).contains(&r) || u > u32::MAX as i64 || m > u32::MAX as i64 {
            return Err(bad(format!("invalid record {line:?}")));
        }
        let part = f[4].parse::<Part>().map_err(bad)?;
        out.push((
            RatingRecord {
                user_id: u as u32,
                movie_id: m as u32,
                rating: r as u8,
                timestamp: ts,
            },
            part,
        ));
    }
    Ok(out)
}
