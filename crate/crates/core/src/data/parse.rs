use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use super::{
    DataError, DatasetFormat, Gender, MovieMeta, Occupation, RatingRecord, Result, UserProfile,
    AGE_BUCKETS_1M,
};

/// Reads a file as Latin-1. ASCII files decode identically.
fn read_latin1(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(bytes.iter().map(|&b| b as char).collect())
}

fn separator(format: DatasetFormat, hundred_k: &'static str) -> &'static str {
    match format {
        DatasetFormat::Ml100k => hundred_k,
        DatasetFormat::Ml1m => "::",
    }
}

struct LineCtx<'a> {
    origin: &'a str,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, msg: impl Into<String>) -> DataError {
        DataError::Malformed {
            origin: self.origin.to_string(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn fields<'s>(&self, text: &'s str, sep: &str, n: usize) -> Result<Vec<&'s str>> {
        let f: Vec<&str> = text.split(sep).collect();
        if f.len() != n {
            return Err(self.err(format!("expected {n} fields, found {}", f.len())));
        }
        Ok(f)
    }

    fn num<T: std::str::FromStr>(&self, field: &str, what: &str) -> Result<T> {
        field
            .trim()
            .parse()
            .map_err(|_| self.err(format!("{what} {field:?} is not a number")))
    }

    fn id(&self, field: &str, what: &str) -> Result<u32> {
        let id: u32 = self.num(field, what)?;
        if id == 0 {
            return Err(self.err(format!("{what} must be positive")));
        }
        Ok(id)
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
}

pub fn parse_ratings(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Vec<RatingRecord>> {
    let path = path.as_ref();
    parse_ratings_str(&read_latin1(path)?, format, &path.display().to_string())
}

pub fn parse_ratings_str(text: &str, format: DatasetFormat, origin: &str) -> Result<Vec<RatingRecord>> {
    let sep = separator(format, "\t");
    lines(text)
        .map(|(line, l)| {
            let cx = LineCtx { origin, line };
            let f = cx.fields(l, sep, 4)?;
            let rating: u8 = cx.num(f[2], "rating")?;
            if !(1..=5).contains(&rating) {
                return Err(cx.err(format!("rating {rating} outside 1..=5")));
            }
            Ok(RatingRecord {
                user_id: cx.id(f[0], "user id")?,
                movie_id: cx.id(f[1], "movie id")?,
                rating,
                timestamp: cx.num(f[3], "timestamp")?,
            })
        })
        .collect()
}

/// Writes records in the rating-file layout of `format`.
pub fn write_ratings<W: Write>(mut w: W, records: &[RatingRecord], format: DatasetFormat) -> std::io::Result<()> {
    let sep = separator(format, "\t");
    for r in records {
        writeln!(w, "{}{sep}{}{sep}{}{sep}{}", r.user_id, r.movie_id, r.rating, r.timestamp)?;
    }
    Ok(())
}

pub fn parse_users(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Vec<UserProfile>> {
    let path = path.as_ref();
    parse_users_str(&read_latin1(path)?, format, &path.display().to_string())
}

pub fn parse_users_str(text: &str, format: DatasetFormat, origin: &str) -> Result<Vec<UserProfile>> {
    let sep = separator(format, "|");
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, l) in lines(text) {
        let cx = LineCtx { origin, line };
        let f = cx.fields(l, sep, 5)?;
        let user_id = cx.id(f[0], "user id")?;
        // 100K: id|age|gender|occupation|zip; 1M: id::gender::age::occupation::zip
        let (age_f, gender_f) = match format {
            DatasetFormat::Ml100k => (f[1], f[2]),
            DatasetFormat::Ml1m => (f[2], f[1]),
        };
        let age: u32 = cx.num(age_f, "age")?;
        match format {
            DatasetFormat::Ml100k if age == 0 => return Err(cx.err("age must be positive")),
            DatasetFormat::Ml1m if !AGE_BUCKETS_1M.contains(&age) => {
                return Err(cx.err(format!("unknown age bucket {age}")))
            }
            _ => {}
        }
        let gender = match gender_f {
            "M" => Gender::M,
            "F" => Gender::F,
            g => return Err(cx.err(format!("gender {g:?} is not M or F"))),
        };
        let occupation = match format {
            DatasetFormat::Ml100k => Occupation::Named(f[3].to_string()),
            DatasetFormat::Ml1m => {
                let code: u8 = cx.num(f[3], "occupation")?;
                if code > 20 {
                    return Err(cx.err(format!("occupation code {code} outside 0..=20")));
                }
                Occupation::Code(code)
            }
        };
        if !seen.insert(user_id) {
            return Err(DataError::DuplicateId {
                origin: origin.to_string(),
                line,
                id: user_id,
            });
        }
        out.push(UserProfile {
            user_id,
            age,
            gender,
            occupation,
            zip: f[4].to_string(),
        });
    }
    Ok(out)
}

pub fn parse_movies(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Vec<MovieMeta>> {
    let path = path.as_ref();
    parse_movies_str(&read_latin1(path)?, format, &path.display().to_string())
}

pub fn parse_movies_str(text: &str, format: DatasetFormat, origin: &str) -> Result<Vec<MovieMeta>> {
    let vocab = format.genres();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, l) in lines(text) {
        let cx = LineCtx { origin, line };
        let meta = match format {
            DatasetFormat::Ml100k => {
                // id|title|release date|video release date|IMDb URL|19 flags
                let f = cx.fields(l, "|", 5 + vocab.len())?;
                let mut genres = Vec::new();
                for (g, flag) in f[5..].iter().enumerate() {
                    match *flag {
                        "1" => genres.push(g),
                        "0" => {}
                        other => return Err(cx.err(format!("genre flag {other:?}"))),
                    }
                }
                MovieMeta {
                    movie_id: cx.id(f[0], "movie id")?,
                    title: f[1].to_string(),
                    genres,
                    release_year: year_from_date(f[2]),
                }
            }
            DatasetFormat::Ml1m => {
                let f = cx.fields(l, "::", 3)?;
                let mut genres = Vec::new();
                for name in f[2].split('|') {
                    let g = vocab
                        .iter()
                        .position(|v| *v == name)
                        .ok_or_else(|| cx.err(format!("unknown genre {name:?}")))?;
                    genres.push(g);
                }
                genres.sort_unstable();
                genres.dedup();
                MovieMeta {
                    movie_id: cx.id(f[0], "movie id")?,
                    title: f[1].to_string(),
                    genres,
                    release_year: year_from_title(f[1]),
                }
            }
        };
        if meta.genres.is_empty() {
            return Err(cx.err("no genre flag set"));
        }
        if !seen.insert(meta.movie_id) {
            return Err(DataError::DuplicateId {
                origin: origin.to_string(),
                line,
                id: meta.movie_id,
            });
        }
        out.push(meta);
    }
    Ok(out)
}

/// "01-Jan-1995" -> 1995
fn year_from_date(date: &str) -> Option<i32> {
    date.rsplit('-').next().and_then(|y| y.parse().ok()).filter(|_| !date.is_empty())
}

/// "Toy Story (1995)" -> 1995
fn year_from_title(title: &str) -> Option<i32> {
    let t = title.trim_end();
    let inner = t.strip_suffix(')')?;
    let open = inner.rfind('(')?;
    inner[open + 1..].parse().ok()
}
