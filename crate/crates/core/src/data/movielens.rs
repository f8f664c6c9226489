//! MovieLens-1m ingestion (`::`-delimited, latin-1).
//!
//! Ten fields are encoded: user_id, age, gender, occupation,
//! user_history_genre, user_history_movie, movie_id, movie_genre,
//! day_of_week and season. Ids get identity buckets sized to their
//! vocabulary; small categorical fields get power-of-two bucket ranges with
//! known codes mapped directly and anything unrecognised hashed into range.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{DateTime, Datelike};

use super::{Dataset, FeatureSpace, Sample, UserId, UserSamples};
use crate::{Error, Result};

pub const FIELD_NAMES: [&str; 10] = [
    "user_id",
    "age",
    "gender",
    "occupation",
    "user_history_genre",
    "user_history_movie",
    "movie_id",
    "movie_genre",
    "day_of_week",
    "season",
];

const F_USER: usize = 0;
const F_AGE: usize = 1;
const F_GENDER: usize = 2;
const F_OCCUPATION: usize = 3;
const F_HIST_GENRE: usize = 4;
const F_HIST_MOVIE: usize = 5;
const F_MOVIE: usize = 6;
const F_GENRE: usize = 7;
const F_DOW: usize = 8;
const F_SEASON: usize = 9;

const AGE_BUCKETS: usize = 8;
const GENDER_BUCKETS: usize = 2;
const OCCUPATION_BUCKETS: usize = 32;
const GENRE_BUCKETS: usize = 32;
const DOW_BUCKETS: usize = 8;
const SEASON_BUCKETS: usize = 4;

/// Most recent positively rated items kept in the history fields.
pub const HISTORY_LEN: usize = 5;

const AGE_CODES: [u32; 7] = [1, 18, 25, 35, 45, 50, 56];
const GENRES: [&str; 18] = [
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

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestStats {
    pub raw_ratings: usize,
    pub skipped_unknown_movie: usize,
    pub skipped_unknown_user: usize,
    pub distinct_items: usize,
}

impl IngestStats {
    pub fn skipped(&self) -> usize {
        self.skipped_unknown_movie + self.skipped_unknown_user
    }
}

/// FNV-1a, used to place unrecognised categorical values. Fixed constants keep
/// the encoding independent of process, platform and ingestion order.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hashed(value: &str, buckets: usize) -> usize {
    (fnv1a(value) % buckets as u64) as usize
}

fn genre_bucket(name: &str) -> usize {
    match GENRES.iter().position(|g| *g == name) {
        Some(i) => i,
        // last slot is reserved for the empty history
        None => GENRES.len() + hashed(name, GENRE_BUCKETS - 1 - GENRES.len()),
    }
}

const EMPTY_GENRE_BUCKET: usize = GENRE_BUCKETS - 1;

fn read_latin1(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes.iter().map(|&b| b as char).collect())
}

fn records<'a>(
    path: &'a Path,
    text: &'a str,
    arity: usize,
) -> impl Iterator<Item = Result<(usize, Vec<&'a str>)>> + 'a {
    text.lines().enumerate().filter_map(move |(i, line)| {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            return None;
        }
        let parts: Vec<&str> = line.split("::").collect();
        if parts.len() != arity {
            return Some(Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected {arity} '::'-separated fields, found {}", parts.len()),
            }));
        }
        Some(Ok((i + 1, parts)))
    })
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, what: &str, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        msg: format!("invalid {what}: {s:?}"),
    })
}

struct UserInfo {
    age: usize,
    gender: usize,
    occupation: usize,
}

struct MovieInfo {
    genres: Vec<usize>,
}

/// Parse the three MovieLens-1m files into per-user chronological samples.
///
/// Ratings of 4 or 5 are positives. Ratings naming an unknown movie (or user)
/// are skipped and counted.
pub fn load_movielens(
    ratings: impl AsRef<Path>,
    users: impl AsRef<Path>,
    movies: impl AsRef<Path>,
) -> Result<(Dataset, IngestStats)> {
    let (ratings, users, movies) = (ratings.as_ref(), users.as_ref(), movies.as_ref());

    let users_text = read_latin1(users)?;
    let mut user_info: HashMap<UserId, UserInfo> = HashMap::new();
    let mut max_user = 0u32;
    for rec in records(users, &users_text, 5) {
        let (line, p) = rec?;
        let id: UserId = parse_num(users, line, "user id", p[0])?;
        if id == 0 {
            return Err(Error::Parse {
                path: users.display().to_string(),
                line,
                msg: "user ids start at 1".into(),
            });
        }
        let gender = match p[1].trim() {
            "F" => 0,
            "M" => 1,
            other => hashed(other, GENDER_BUCKETS),
        };
        let age_code: u32 = parse_num(users, line, "age", p[2])?;
        let age = AGE_CODES
            .iter()
            .position(|&a| a == age_code)
            .unwrap_or_else(|| hashed(p[2].trim(), AGE_BUCKETS));
        let occ: usize = parse_num(users, line, "occupation", p[3])?;
        let occupation = if occ < OCCUPATION_BUCKETS {
            occ
        } else {
            hashed(p[3].trim(), OCCUPATION_BUCKETS)
        };
        max_user = max_user.max(id);
        user_info.insert(
            id,
            UserInfo {
                age,
                gender,
                occupation,
            },
        );
    }

    let movies_text = read_latin1(movies)?;
    let mut movie_info: HashMap<u32, MovieInfo> = HashMap::new();
    let mut max_movie = 0u32;
    for rec in records(movies, &movies_text, 3) {
        let (line, p) = rec?;
        let id: u32 = parse_num(movies, line, "movie id", p[0])?;
        if id == 0 {
            return Err(Error::Parse {
                path: movies.display().to_string(),
                line,
                msg: "movie ids start at 1".into(),
            });
        }
        let mut genres: Vec<usize> = p[2]
            .split('|')
            .map(str::trim)
            .filter(|g| !g.is_empty())
            .map(genre_bucket)
            .collect();
        genres.sort_unstable();
        genres.dedup();
        max_movie = max_movie.max(id);
        movie_info.insert(id, MovieInfo { genres });
    }

    let ratings_text = read_latin1(ratings)?;
    let mut per_user: BTreeMap<UserId, Vec<(i64, u32, u8)>> = BTreeMap::new();
    let mut stats = IngestStats {
        raw_ratings: 0,
        skipped_unknown_movie: 0,
        skipped_unknown_user: 0,
        distinct_items: 0,
    };
    let mut items = std::collections::BTreeSet::new();
    for rec in records(ratings, &ratings_text, 4) {
        let (line, p) = rec?;
        stats.raw_ratings += 1;
        let user: UserId = parse_num(ratings, line, "user id", p[0])?;
        let movie: u32 = parse_num(ratings, line, "movie id", p[1])?;
        let rating: u8 = parse_num(ratings, line, "rating", p[2])?;
        let ts: i64 = parse_num(ratings, line, "timestamp", p[3])?;
        if !(1..=5).contains(&rating) {
            return Err(Error::Parse {
                path: ratings.display().to_string(),
                line,
                msg: format!("rating {rating} outside 1..=5"),
            });
        }
        if !movie_info.contains_key(&movie) {
            stats.skipped_unknown_movie += 1;
            continue;
        }
        if !user_info.contains_key(&user) {
            stats.skipped_unknown_user += 1;
            continue;
        }
        items.insert(movie);
        per_user
            .entry(user)
            .or_default()
            .push((ts, movie, u8::from(rating >= 4)));
    }
    if stats.raw_ratings == 0 {
        return Err(Error::Empty("ratings file"));
    }
    stats.distinct_items = items.len();

    let space = FeatureSpace::new(vec![
        (FIELD_NAMES[F_USER].into(), max_user as usize),
        (FIELD_NAMES[F_AGE].into(), AGE_BUCKETS),
        (FIELD_NAMES[F_GENDER].into(), GENDER_BUCKETS),
        (FIELD_NAMES[F_OCCUPATION].into(), OCCUPATION_BUCKETS),
        (FIELD_NAMES[F_HIST_GENRE].into(), GENRE_BUCKETS),
        // one extra slot for the empty history
        (FIELD_NAMES[F_HIST_MOVIE].into(), max_movie as usize + 1),
        (FIELD_NAMES[F_MOVIE].into(), max_movie as usize),
        (FIELD_NAMES[F_GENRE].into(), GENRE_BUCKETS),
        (FIELD_NAMES[F_DOW].into(), DOW_BUCKETS),
        (FIELD_NAMES[F_SEASON].into(), SEASON_BUCKETS),
    ])?;
    let empty_movie_bucket = max_movie as usize;

    let mut out = Vec::with_capacity(per_user.len());
    for (user, mut events) in per_user {
        events.sort_by_key(|&(ts, movie, _)| (ts, movie));
        let info = &user_info[&user];
        let mut positives: Vec<u32> = Vec::new();
        let mut samples = Vec::with_capacity(events.len());
        let mut i = 0;
        while i < events.len() {
            // events sharing a timestamp all see the history strictly before it
            let ts = events[i].0;
            let group_end = events[i..]
                .iter()
                .position(|e| e.0 != ts)
                .map_or(events.len(), |k| i + k);
            let recent = &positives[positives.len().saturating_sub(HISTORY_LEN)..];
            let hist_movies: Vec<usize> = if recent.is_empty() {
                vec![empty_movie_bucket]
            } else {
                recent.iter().map(|&m| m as usize - 1).collect()
            };
            let mut hist_genres: Vec<usize> = recent
                .iter()
                .flat_map(|m| movie_info[m].genres.iter().copied())
                .collect();
            hist_genres.sort_unstable();
            hist_genres.dedup();
            if hist_genres.is_empty() {
                hist_genres.push(EMPTY_GENRE_BUCKET);
            }
            let (dow, season) = calendar(ts);
            for &(_, movie, label) in &events[i..group_end] {
                let features = Sample::pooled(
                    &space,
                    &[
                        (F_USER, vec![user as usize - 1]),
                        (F_AGE, vec![info.age]),
                        (F_GENDER, vec![info.gender]),
                        (F_OCCUPATION, vec![info.occupation]),
                        (F_HIST_GENRE, hist_genres.clone()),
                        (F_HIST_MOVIE, hist_movies.clone()),
                        (F_MOVIE, vec![movie as usize - 1]),
                        (F_GENRE, movie_info[&movie].genres.clone()),
                        (F_DOW, vec![dow]),
                        (F_SEASON, vec![season]),
                    ],
                );
                let mut s = Sample::new(user, label, features)?;
                s.timestamp = Some(ts);
                samples.push(s);
            }
            for &(_, movie, label) in &events[i..group_end] {
                if label == 1 {
                    positives.push(movie);
                }
            }
            i = group_end;
        }
        out.push(UserSamples { user_id: user, samples });
    }
    Ok((Dataset { space, users: out }, stats))
}

/// `(day_of_week, quarter)` of a UTC unix timestamp, Monday = 0.
fn calendar(ts: i64) -> (usize, usize) {
    match DateTime::from_timestamp(ts, 0) {
        Some(dt) => (dt.weekday().num_days_from_monday() as usize, dt.month0() as usize / 3),
        None => (DOW_BUCKETS - 1, 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn fixture(dir: &Path, ratings: &str) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
        let users = write(dir, "users.dat", "1::F::1::10::48067\n2::M::56::16::70072\n");
        let movies = write(
            dir,
            "movies.dat",
            "1::Toy Story (1995)::Animation|Children's|Comedy\n2::Jumanji (1995)::Adventure|Children's|Fantasy\n3::Heat (1995)::Action|Crime|Thriller\n",
        );
        let ratings = write(dir, "ratings.dat", ratings);
        (ratings, users, movies)
    }

    #[test]
    fn labels_history_and_calendar() {
        let dir = tempfile::tempdir().unwrap();
        // 978300760 = 2000-12-31 22:12:40 UTC, a Sunday in Q4
        let (r, u, m) = fixture(
            dir.path(),
            "1::1::5::978300760\n1::2::3::978300761\n1::3::4::978300762\n1::2::4::978300762\n2::1::1::978300000\n2::9::5::978300001\n",
        );
        let (ds, stats) = load_movielens(&r, &u, &m).unwrap();
        assert_eq!(stats.raw_ratings, 6);
        assert_eq!(stats.skipped_unknown_movie, 1);
        assert_eq!(ds.num_samples(), 5);
        assert_eq!(ds.num_samples(), stats.raw_ratings - stats.skipped());
        assert_eq!(ds.space.num_fields(), 10);

        let u1 = &ds.users[0];
        assert_eq!(u1.user_id, 1);
        let labels: Vec<u8> = u1.samples.iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![1, 0, 1, 1]);

        let hist_movie = |s: &Sample| -> Vec<u32> {
            s.features
                .iter()
                .filter(|f| f.field as usize == F_HIST_MOVIE)
                .map(|f| f.index - ds.space.offset(F_HIST_MOVIE) as u32)
                .collect()
        };
        // first event: empty-history bucket (= max_movie)
        assert_eq!(hist_movie(&u1.samples[0]), vec![3]);
        assert_eq!(hist_movie(&u1.samples[1]), vec![0]);
        // the two events at ts=...762 share the same history
        assert_eq!(hist_movie(&u1.samples[2]), vec![0]);
        assert_eq!(hist_movie(&u1.samples[3]), vec![0]);

        let s0 = &u1.samples[0];
        let dow = s0.features.iter().find(|f| f.field as usize == F_DOW).unwrap();
        assert_eq!(dow.index as usize - ds.space.offset(F_DOW), 6);
        let season = s0.features.iter().find(|f| f.field as usize == F_SEASON).unwrap();
        assert_eq!(season.index as usize - ds.space.offset(F_SEASON), 3);

        // multi-valued genre field is mean pooled
        let genres: Vec<f32> = s0
            .features
            .iter()
            .filter(|f| f.field as usize == F_GENRE)
            .map(|f| f.value)
            .collect();
        assert_eq!(genres.len(), 3);
        assert!(genres.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-7));

        for u in &ds.users {
            for s in &u.samples {
                s.validate(&ds.space).unwrap();
            }
        }
    }

    #[test]
    fn rating_four_is_positive() {
        let dir = tempfile::tempdir().unwrap();
        let (r, u, m) = fixture(dir.path(), "2::3::4::978300000\n2::1::3::978300001\n");
        let (ds, _) = load_movielens(&r, &u, &m).unwrap();
        assert_eq!(ds.users[0].samples[0].label, 1);
        assert_eq!(ds.users[0].samples[1].label, 0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let (r, u, m) = fixture(dir.path(), "1::1::5::978300760\n1::2::x::978300761\n");
        match load_movielens(&r, &u, &m) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let (r, u, m) = fixture(dir.path(), "1::1::5\n");
        assert!(matches!(load_movielens(&r, &u, &m), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_ratings_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (r, u, m) = fixture(dir.path(), "");
        assert!(matches!(load_movielens(&r, &u, &m), Err(Error::Empty(_))));
    }

    #[test]
    fn reencoding_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (r, u, m) = fixture(dir.path(), "1::1::5::978300760\n1::2::3::978300761\n2::3::4::1\n");
        let a = load_movielens(&r, &u, &m).unwrap();
        let b = load_movielens(&r, &u, &m).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn latin1_titles_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let users = write(dir.path(), "users.dat", "1::F::1::10::48067\n");
        let movies = dir.path().join("movies.dat");
        let mut body = b"1::Caf".to_vec();
        body.push(0xE9); // latin-1 e-acute, invalid as utf-8
        body.extend_from_slice(b" (1990)::Drama|Unknown-Genre\n");
        std::fs::write(&movies, body).unwrap();
        let ratings = write(dir.path(), "ratings.dat", "1::1::4::5\n");
        let (ds, _) = load_movielens(&ratings, &users, &movies).unwrap();
        let s = &ds.users[0].samples[0];
        s.validate(&ds.space).unwrap();
    }
}
